import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from raysurf.losses import (
    AdaptiveConfig,
    StepAborted,
    eikonal_loss,
    geometric_bias_factor,
    render_error_factor,
    rgb_loss,
    total_loss,
)
from raysurf.renderer import RenderResult


def _result(m=4, n=8, seed=0, **overrides):
    """A synthetic RenderResult with plausible, finite contents."""
    gen = torch.Generator().manual_seed(seed)
    fields = dict(
        color=torch.rand(m, 3, generator=gen),
        opacity=torch.rand(m, generator=gen),
        t_r=1.0 + torch.rand(m, generator=gen),
        t_s=1.0 + torch.rand(m, generator=gen),
        has_ts=torch.ones(m, dtype=torch.bool),
        low_opacity=torch.zeros(m, dtype=torch.bool),
        weights=torch.rand(m, n, generator=gen) / n,
        t=torch.cumsum(torch.rand(m, n, generator=gen), dim=1),
        sdf=torch.randn(m, n, generator=gen),
        gradients=torch.randn(m, n, 3, generator=gen),
        t_near=torch.full((m,), 1.0),
        t_far=torch.full((m,), 2.0),
        finite=torch.ones(m, dtype=torch.bool),
    )
    fields.update(overrides)
    return RenderResult(**fields)


# --------------------------------------------------------------- rgb loss


def test_rgb_loss_hand_computed():
    rendered = torch.tensor([[0.5, 0.5, 0.5], [1.0, 0.0, 0.0]])
    truth = torch.tensor([[0.5, 0.5, 0.2], [0.0, 0.0, 0.0]])
    # ray 0: L2 = 0.3, L1 = 0.3 ; ray 1: L2 = 1, L1 = 1 -> mean = (0.6 + 2)/2
    assert abs(rgb_loss(rendered, truth).item() - 1.3) < 1e-6


def test_rgb_loss_zero_on_exact_match():
    x = torch.rand(5, 3)
    assert rgb_loss(x, x.clone()).item() == 0.0


def test_rgb_loss_shape_mismatch():
    with pytest.raises(ValueError):
        rgb_loss(torch.zeros(3, 3), torch.zeros(4, 3))


# ---------------------------------------------------------- render factor


def test_render_error_factor_closed_form():
    cfg = AdaptiveConfig(alpha=1e-6, c_min=1e-6, c_max=0.5)
    d = torch.tensor([0.0, 1e-6, 0.01, 0.5, 3.0])
    f = render_error_factor(d, cfg)
    clamped = d.clamp(1e-6, 0.5)
    assert torch.allclose(f, 1e-6 / (clamped + 1e-6))
    # small error -> factor near its max of 1/2 at the c_min clamp;
    # large error -> factor tiny: regularization relaxed on bad rays
    assert f[0] == f[1] == pytest.approx(0.5)
    assert f[3] == f[4] < 1e-5


def test_render_error_factor_is_detached():
    cfg = AdaptiveConfig()
    d = torch.tensor([0.1, 0.2], requires_grad=True)
    f = render_error_factor(d, cfg)
    assert not f.requires_grad


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.0, 1e6, allow_nan=False),
    st.floats(1e-8, 1.0),
)
def test_render_error_factor_bounded(d, alpha):
    cfg = AdaptiveConfig(alpha=alpha)
    f = render_error_factor(torch.tensor([d]), cfg)
    assert 0.0 < f.item() <= 1.0


# ------------------------------------------------------------ bias factor


def test_geometric_bias_factor_closed_form():
    t_r = torch.tensor([1.5, 1.0, 1.9])
    t_s = torch.tensor([1.5, 1.8, 1.0])
    near = torch.full((3,), 1.0)
    far = torch.full((3,), 2.0)
    has = torch.ones(3, dtype=torch.bool)
    low = torch.zeros(3, dtype=torch.bool)
    f = geometric_bias_factor(t_r, t_s, has, low, near, far)
    assert torch.allclose(f, torch.tensor([1.0, 0.2, 0.1]), atol=1e-6)


def test_geometric_bias_factor_clamps_to_zero():
    f = geometric_bias_factor(
        torch.tensor([0.0]), torch.tensor([5.0]),
        torch.tensor([True]), torch.tensor([False]),
        torch.tensor([1.0]), torch.tensor([2.0]),
    )
    assert f.item() == 0.0


def test_geometric_bias_factor_neutral_rays():
    t_r = torch.tensor([1.2, 1.2])
    t_s = torch.tensor([1.9, 1.9])
    near, far = torch.full((2,), 1.0), torch.full((2,), 2.0)
    # no crossing and low-opacity both neutralize to exactly 1
    f = geometric_bias_factor(
        t_r, t_s, torch.tensor([False, True]), torch.tensor([False, True]), near, far
    )
    assert (f == 1.0).all()


def test_geometric_bias_factor_gradient_flows():
    t_r = torch.tensor([1.4], requires_grad=True)
    t_s = torch.tensor([1.6], requires_grad=True)
    f = geometric_bias_factor(
        t_r, t_s, torch.tensor([True]), torch.tensor([False]),
        torch.tensor([1.0]), torch.tensor([2.0]),
    )
    f.sum().backward()
    # d/dt_r of 1 - |t_r - t_s| = +1 here (t_r < t_s), scaled by 1/span
    assert t_r.grad.item() == pytest.approx(1.0)
    assert t_s.grad.item() == pytest.approx(-1.0)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-10, 10, allow_nan=False),
    st.floats(-10, 10, allow_nan=False),
)
def test_geometric_bias_factor_bounded(t_r, t_s):
    f = geometric_bias_factor(
        torch.tensor([t_r]), torch.tensor([t_s]),
        torch.tensor([True]), torch.tensor([False]),
        torch.tensor([0.0]), torch.tensor([1.0]),
    )
    assert 0.0 <= f.item() <= 1.0


# ---------------------------------------------------------- eikonal loss


def test_eikonal_loss_hand_computed():
    # 2 rays x 2 samples; gradient norms 2 and 1 -> per-sample penalties 1, 0
    g = torch.zeros(2, 2, 3)
    g[0, 0, 0] = 2.0
    g[0, 1, 1] = 1.0
    g[1, 0, 2] = 1.0
    g[1, 1, 0] = 1.0
    rf = torch.tensor([0.5, 1.0])
    bf = torch.tensor([1.0, 0.25])
    # weight/(m*n) * sum_i rf*bf*sum_j penalty = 0.1/4 * (0.5*1*1 + 0) = 0.0125
    assert eikonal_loss(g, rf, bf, 0.1).item() == pytest.approx(0.0125)


def test_eikonal_loss_zero_for_unit_gradients():
    g = torch.nn.functional.normalize(torch.randn(3, 5, 3), dim=-1)
    loss = eikonal_loss(g, torch.ones(3), torch.ones(3), 0.1)
    assert loss.item() < 1e-12


# ------------------------------------------------------------- total loss


def test_total_loss_components_add_up():
    res = _result()
    truth = torch.rand(4, 3, generator=torch.Generator().manual_seed(1))
    cfg = AdaptiveConfig()
    out = total_loss(res, truth, cfg)
    assert out.total == pytest.approx(out.l_rgb + out.l_sdf)
    assert out.total_tensor.item() == pytest.approx(out.total)
    assert out.l_rgb == pytest.approx(rgb_loss(res.color, truth).item())
    assert (out.render_factor > 0).all() and (out.render_factor <= 1).all()
    assert (out.bias_factor >= 0).all() and (out.bias_factor <= 1).all()


def test_total_loss_ablations_reduce_to_constant_eikonal():
    res = _result(seed=2)
    truth = torch.rand(4, 3, generator=torch.Generator().manual_seed(3))
    cfg = AdaptiveConfig(use_render_factor=False, use_bias_factor=False)
    out = total_loss(res, truth, cfg)
    assert (out.render_factor == 1.0).all()
    assert (out.bias_factor == 1.0).all()
    plain = eikonal_loss(res.gradients, torch.ones(4), torch.ones(4), cfg.eikonal_weight)
    assert abs(out.l_sdf - plain.item()) < 1e-12


def test_total_loss_render_factor_override():
    res = _result(seed=4)
    truth = torch.rand(4, 3, generator=torch.Generator().manual_seed(5))
    pinned = torch.tensor([0.25, 0.5, 0.75, 1.0])
    out = total_loss(res, truth, AdaptiveConfig(), render_factor_override=pinned)
    assert np.allclose(out.render_factor, pinned.numpy())


def test_total_loss_aborts_on_non_finite():
    res = _result(seed=6, finite=torch.tensor([True, True, False, True]))
    with pytest.raises(StepAborted):
        total_loss(res, torch.rand(4, 3), AdaptiveConfig())
    res = _result(seed=7)
    res.color[0, 0] = float("nan")
    with pytest.raises(StepAborted):
        total_loss(res, torch.rand(4, 3), AdaptiveConfig())


def test_total_loss_backward_reaches_sharpness():
    # t_r and t_s enter the bias factor, so s-dependent tensors must get grads
    m, n = 3, 6
    gen = torch.Generator().manual_seed(8)
    s = torch.tensor(2.0, requires_grad=True)
    t = torch.sort(1.0 + torch.rand(m, n, generator=gen), dim=1).values
    w = torch.softmax(torch.rand(m, n, generator=gen) * s, dim=1)
    t_r = (w * t).sum(dim=1)
    res = _result(
        m=m, n=n, seed=9,
        t=t, weights=w, t_r=t_r,
        gradients=torch.randn(m, n, 3, generator=gen).requires_grad_(True),
    )
    out = total_loss(res, torch.rand(m, 3, generator=gen), AdaptiveConfig())
    out.total_tensor.backward()
    assert s.grad is not None and torch.isfinite(s.grad)


def test_adaptive_config_validation():
    with pytest.raises(ValueError):
        AdaptiveConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AdaptiveConfig(c_min=0.5, c_max=0.1)
    with pytest.raises(ValueError):
        AdaptiveConfig(eikonal_weight=-1.0)
