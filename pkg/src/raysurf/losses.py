"""Training losses: color loss, adaptive per-ray Eikonal weighting, totals.

The Eikonal penalty (|grad f| - 1)^2 is weighted per ray by two factors:

* a render-error factor alpha / (d + alpha), where d is the per-ray color
  error clamped to [c_min, c_max] — rays whose rendering is still poor relax
  the geometric regularization; treated as a constant during backprop;
* a geometric-bias factor 1 - |t_r - t_s| / (t_far - t_near), clamped to
  [0, 1] — full regularization only where the weighted rendering point agrees
  with the SDF zero crossing; gradients flow through t_r and t_s (and hence
  into the sharpness s).

Setting both factors to 1 recovers the constant-weight Eikonal regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .renderer import RenderResult


class StepAborted(RuntimeError):
    """A non-finite intermediate was produced; parameters must stay untouched."""


@dataclass
class AdaptiveConfig:
    alpha: float = 1e-6
    c_min: float = 1e-6
    c_max: float = 0.5
    eikonal_weight: float = 0.1  # constant scale of the Eikonal term
    use_render_factor: bool = True  # ablation: force the render-error factor to 1
    use_bias_factor: bool = True  # ablation: force the geometric-bias factor to 1

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not (0 < self.c_min < self.c_max):
            raise ValueError("need 0 < c_min < c_max")
        if self.eikonal_weight < 0:
            raise ValueError("eikonal_weight must be >= 0")


@dataclass
class LossBreakdown:
    l_rgb: float
    l_sdf: float
    total: float
    d_r: np.ndarray  # per-ray color error
    render_factor: np.ndarray  # per-ray, in (0, 1]
    bias_factor: np.ndarray  # per-ray, in [0, 1]
    total_tensor: torch.Tensor  # scalar with graph, for backward


def rgb_loss(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean over rays of (L2 norm over RGB + L1 over channels)."""
    if rendered.shape != truth.shape or rendered.ndim != 2:
        raise ValueError(
            f"batch shape mismatch: {tuple(rendered.shape)} vs {tuple(truth.shape)}"
        )
    diff = rendered - truth
    return (diff.norm(dim=-1) + diff.abs().sum(dim=-1)).mean()


def render_error_factor(d_r: torch.Tensor, cfg: AdaptiveConfig) -> torch.Tensor:
    """alpha / (clamp(d_r) + alpha), detached from the graph."""
    d = d_r.detach().clamp(cfg.c_min, cfg.c_max)
    return cfg.alpha / (d + cfg.alpha)


def geometric_bias_factor(
    t_r: torch.Tensor,
    t_s: torch.Tensor,
    has_ts: torch.Tensor,
    low_opacity: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
) -> torch.Tensor:
    """clamp(1 - |t_r - t_s| / (t_far - t_near), 0, 1).

    Rays without a zero crossing, or flagged low-opacity, contribute factor 1
    (no measurable bias). Differentiable through t_r and t_s away from the
    clamp boundaries.
    """
    span = t_far - t_near
    raw = 1.0 - (t_r - t_s).abs() / span
    factor = raw.clamp(0.0, 1.0)
    neutral = ~has_ts | low_opacity
    return torch.where(neutral, torch.ones_like(factor), factor)


def eikonal_loss(
    gradients: torch.Tensor,
    render_factor: torch.Tensor,
    bias_factor: torch.Tensor,
    eikonal_weight: float,
) -> torch.Tensor:
    """weight / (m*n) * sum_i rf_i * bf_i * sum_j (|n_ij| - 1)^2."""
    m, n = gradients.shape[0], gradients.shape[1]
    per_sample = (gradients.norm(dim=-1) - 1.0) ** 2
    per_ray = per_sample.sum(dim=1)
    return eikonal_weight / (m * n) * (render_factor * bias_factor * per_ray).sum()


def total_loss(
    result: RenderResult,
    truth: torch.Tensor,
    cfg: AdaptiveConfig,
    render_factor_override: torch.Tensor | None = None,
) -> LossBreakdown:
    """Assemble color + adaptively weighted Eikonal loss for one batch.

    ``render_factor_override`` pins the (always-constant) render-error factor,
    used by finite-difference checks. Raises StepAborted on any non-finite
    intermediate so the optimizer skips the step.
    """
    if not bool(result.finite.all()):
        raise StepAborted(
            f"{int((~result.finite).sum())} rays produced non-finite field outputs"
        )
    truth = torch.as_tensor(truth, dtype=result.color.dtype)
    l_rgb = rgb_loss(result.color, truth)

    d_r = (result.color - truth).norm(dim=-1)
    if render_factor_override is not None:
        rf = render_factor_override
    elif cfg.use_render_factor:
        rf = render_error_factor(d_r, cfg)
    else:
        rf = torch.ones_like(d_r)
    if cfg.use_bias_factor:
        bf = geometric_bias_factor(
            result.t_r, result.t_s, result.has_ts, result.low_opacity,
            result.t_near, result.t_far,
        )
    else:
        bf = torch.ones_like(d_r)

    l_sdf = eikonal_loss(result.gradients, rf, bf, cfg.eikonal_weight)
    total = l_rgb + l_sdf
    if not torch.isfinite(total):
        raise StepAborted("non-finite loss")
    return LossBreakdown(
        l_rgb=l_rgb.detach().item(),
        l_sdf=l_sdf.detach().item(),
        total=total.detach().item(),
        d_r=d_r.detach().numpy().copy(),
        render_factor=rf.detach().numpy().copy(),
        bias_factor=bf.detach().numpy().copy(),
        total_tensor=total,
    )
