"""Multi-resolution hash-grid SDF + radiance field.

A position in the unit cube is encoded by trilinearly interpolated feature
vectors from L hash-grid levels, concatenated and fed (together with the raw
position) through a small softplus MLP that predicts the signed distance and a
geometry feature. A second MLP maps (geometry feature, position, view
direction, surface normal) to RGB. All stages are differentiable through
torch autograd, including second-order terms needed to backpropagate losses
that depend on the SDF spatial gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

# XOR spatial-hash primes (first axis uses identity so dense-ish grids
# degrade gracefully under collisions).
_PRIMES = (1, 2654435761, 805459861)
# Same primes reduced to signed 32-bit range for int32 wraparound arithmetic.
_PRIMES_I32 = tuple(p - (1 << 32) if p >= (1 << 31) else p for p in _PRIMES)

_CORNER_OFFSETS = torch.tensor(
    [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int64
)


class FieldInitError(RuntimeError):
    """Raised when the geometric (sphere) initialization fails to converge."""


@dataclass(frozen=True)
class HashGridConfig:
    num_levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 256
    features_per_level: int = 2
    table_size_log2: int = 19

    def __post_init__(self):
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.features_per_level < 1:
            raise ValueError("features_per_level must be >= 1")
        if not (1 <= self.table_size_log2 <= 30):
            raise ValueError("table_size_log2 out of range")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    def level_resolutions(self) -> list[int]:
        """Per-axis vertex counts, geometric progression base -> max."""
        if self.num_levels == 1:
            return [self.base_resolution]
        growth = (self.max_resolution / self.base_resolution) ** (
            1.0 / (self.num_levels - 1)
        )
        return [
            int(round(self.base_resolution * growth**i))
            for i in range(self.num_levels)
        ]

    def level_table_size(self, level: int) -> int:
        """Entries actually allocated: dense when the full grid fits."""
        res = self.level_resolutions()[level]
        return min(res**3, self.table_size)


@dataclass
class LevelMask:
    """Number of active coarse-to-fine hash levels; inactive levels emit zeros."""

    active_levels: int

    def clamp(self, num_levels: int) -> int:
        return max(0, min(self.active_levels, num_levels))


class SurfaceField(torch.nn.Module):
    """Trainable SDF + radiance field over the unit scene cube.

    Holds all trainable state: hash tables, SDF MLP, color MLP and the log of
    the sharpness s that controls the SDF -> transparency projection.
    """

    def __init__(
        self,
        config: HashGridConfig | None = None,
        sdf_hidden: int = 64,
        color_hidden: int = 64,
        geo_feat_dim: int = 15,
        s_init: float = 30.0,
        dtype: torch.dtype = torch.float32,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config or HashGridConfig()
        self.geo_feat_dim = geo_feat_dim
        self.sdf_hidden = sdf_hidden
        self.color_hidden = color_hidden
        self._dtype = dtype
        self.resolutions = self.config.level_resolutions()

        gen = torch.Generator().manual_seed(seed)
        cfg = self.config
        sizes = [cfg.level_table_size(lvl) for lvl in range(cfg.num_levels)]
        offsets = [0]
        for n in sizes:
            offsets.append(offsets[-1] + n)
        table = torch.empty(offsets[-1], cfg.features_per_level, dtype=dtype)
        table.uniform_(-1e-4, 1e-4, generator=gen)
        self.table = torch.nn.Parameter(table)
        self.register_buffer(
            "_level_offsets", torch.tensor(offsets[:-1], dtype=torch.int64)
        )
        self.register_buffer(
            "_level_res", torch.tensor(self.config.level_resolutions(), dtype=torch.int64)
        )
        self.register_buffer(
            "_level_hashed",
            torch.tensor(
                [r**3 > cfg.table_size for r in self.config.level_resolutions()]
            ),
        )

        enc_dim = cfg.num_levels * cfg.features_per_level
        self.sdf_mlp = _make_mlp(
            3 + enc_dim, sdf_hidden, 1 + geo_feat_dim, dtype, gen
        )
        self.color_mlp = _make_mlp(
            geo_feat_dim + 9, color_hidden, 3, dtype, gen
        )
        self.s_log = torch.nn.Parameter(
            torch.tensor(math.log(s_init), dtype=dtype)
        )
        self._offsets = _CORNER_OFFSETS  # shared constant

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    @property
    def s(self) -> torch.Tensor:
        """Sharpness of the SDF->transparency sigmoid; positive by construction."""
        return torch.exp(self.s_log)

    # ---------------------------------------------------------------- encode

    def level_table(self, level: int) -> torch.Tensor:
        """View of the fused feature table holding one level's entries."""
        start = int(self._level_offsets[level])
        return self.table[start : start + self.config.level_table_size(level)]

    def encode(self, position: torch.Tensor, active_levels: int | None = None) -> torch.Tensor:
        """Concatenated per-level trilinear features, (B, L*d).

        Positions outside [0,1]^3 are clamped to the cube boundary. Levels at
        or beyond ``active_levels`` output exact zeros and receive no
        gradient. All active levels are processed in one vectorized pass over
        the fused table.
        """
        cfg = self.config
        if active_levels is None:
            active_levels = cfg.num_levels
        la = max(0, min(active_levels, cfg.num_levels))
        b = position.shape[0]
        d = cfg.features_per_level
        if la == 0:
            return torch.zeros(b, cfg.num_levels * d, dtype=position.dtype,
                               device=position.device)
        x = position.clamp(0.0, 1.0)
        # Resolutions grow monotonically, so collision-free (dense) levels are
        # always a prefix and hashed levels a suffix; encode each group in one
        # vectorized pass so neither pays for the other's index arithmetic.
        n_dense = int((~self._level_hashed[:la]).sum())
        parts = []
        if n_dense:
            parts.append(self._encode_group(x, 0, n_dense, hashed=False))
        if la > n_dense:
            parts.append(self._encode_group(x, n_dense, la, hashed=True))
        out = torch.cat(parts, dim=0) if len(parts) > 1 else parts[0]
        out = out.permute(1, 0, 2).reshape(b, la * d)
        if la < cfg.num_levels:
            pad = torch.zeros(
                b, (cfg.num_levels - la) * d, dtype=x.dtype, device=x.device
            )
            out = torch.cat([out, pad], dim=-1)
        return out

    def _encode_group(self, x: torch.Tensor, lo: int, hi: int, hashed: bool) -> torch.Tensor:
        """Trilinear features for a contiguous run of levels, (hi-lo, B, d)."""
        cfg = self.config
        b = x.shape[0]
        offs = self._offsets.to(x.device)
        res = self._level_res[lo:hi, None, None]  # (g, 1, 1)
        g = x.unsqueeze(0) * (res - 1).to(x.dtype)  # (g, B, 3)
        # Containing-voxel convention: half-open voxels, top face closed.
        c0 = g.detach().floor().long().clamp_(torch.zeros_like(res), res - 2)
        frac = g - c0.to(x.dtype)
        corners = (c0.unsqueeze(2) + offs).int()  # (g, B, 8, 3)
        if hashed:
            # int32 wraparound leaves the masked low bits unchanged.
            idx = (
                corners[..., 0] * _PRIMES_I32[0]
                ^ corners[..., 1] * _PRIMES_I32[1]
                ^ corners[..., 2] * _PRIMES_I32[2]
            ) & (cfg.table_size - 1)
        else:
            r32 = res.int()
            idx = (corners[..., 0] * r32 + corners[..., 1]) * r32 + corners[..., 2]
        idx = idx + self._level_offsets[lo:hi, None, None].int()
        feats = self.table.index_select(0, idx.reshape(-1))
        feats = feats.reshape(hi - lo, b, 8, cfg.features_per_level)
        fx, fy, fz = frac.unbind(-1)  # (g, B) each
        gy, gz = 1.0 - fy, 1.0 - fz
        w00, w01, w10, w11 = gy * gz, gy * fz, fy * gz, fy * fz
        gx = 1.0 - fx
        # Corner k carries offset bits (k>>2, k>>1, k) for (x, y, z).
        w = torch.stack(
            [gx * w00, gx * w01, gx * w10, gx * w11,
             fx * w00, fx * w01, fx * w10, fx * w11],
            dim=-1,
        )  # (g, B, 8)
        return (w.unsqueeze(-1) * feats).sum(dim=2)  # (g, B, d)

    # ------------------------------------------------------------------- sdf

    def sdf_and_feature(
        self, position: torch.Tensor, active_levels: int | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        enc = self.encode(position, active_levels)
        h = torch.cat([position, enc], dim=-1)
        out = _run_mlp(self.sdf_mlp, h)
        return out[..., 0], out[..., 1:]

    def eval_sdf(
        self,
        position: torch.Tensor,
        active_levels: int | None = None,
        create_graph: bool = False,
        with_feature: bool = False,
    ):
        """SDF value and its exact spatial gradient at ``position``.

        With ``create_graph`` the returned gradient stays differentiable with
        respect to the field parameters (needed by gradient-penalty losses).
        """
        with torch.enable_grad():
            x = position.detach().clone().requires_grad_(True)
            sdf, feat = self.sdf_and_feature(x, active_levels)
            (grad,) = torch.autograd.grad(
                sdf.sum(), x, create_graph=create_graph
            )
        if with_feature:
            return sdf, grad, feat
        return sdf, grad

    # ----------------------------------------------------------------- color

    def eval_color(
        self,
        position: torch.Tensor,
        view_direction: torch.Tensor,
        normal: torch.Tensor,
        geometry_feature: torch.Tensor,
    ) -> torch.Tensor:
        """View-dependent radiance, squashed to [0,1]^3 by a sigmoid."""
        h = torch.cat([geometry_feature, position, view_direction, normal], dim=-1)
        return torch.sigmoid(_run_mlp(self.color_mlp, h))

    # -------------------------------------------------------------- backprop

    def record(
        self,
        position: torch.Tensor,
        view_direction: torch.Tensor,
        active_levels: int | None = None,
    ) -> "FieldTape":
        """Run a recorded forward pass for later parameter backpropagation."""
        return FieldTape(self, position, view_direction, active_levels)

    # ------------------------------------------------------- initialization

    @torch.no_grad()
    def _check_finite(self):
        for p in self.parameters():
            if not torch.isfinite(p).all():
                raise FieldInitError("non-finite field parameter")

    @torch.no_grad()
    def _geometric_init(self, center: torch.Tensor, radius: float, gen) -> None:
        """Initialize the SDF MLP near the sphere SDF |x-c| - r analytically
        (variance-scaled hidden layers, constant-sign output row)."""
        first, hidden, last = self.sdf_mlp[0], self.sdf_mlp[1], self.sdf_mlp[2]
        for lin in (first, hidden):
            lin.weight.normal_(0.0, math.sqrt(2.0 / lin.out_features), generator=gen)
            lin.bias.zero_()
        first.weight[:, 3:].normal_(0.0, 1e-4, generator=gen)
        first.bias.copy_(-(first.weight[:, :3] @ center))
        last.weight.normal_(0.0, 1e-4, generator=gen)
        last.bias.zero_()
        last.weight[0].normal_(
            math.sqrt(math.pi / last.in_features), 1e-4, generator=gen
        )
        last.bias[0] = -radius

    def init_sphere(
        self,
        center=(0.5, 0.5, 0.5),
        radius: float = 0.5,
        max_error: float = 0.02,
        max_steps: int = 2500,
        seed: int = 0,
    ) -> float:
        """Fit the SDF head to the analytic sphere SDF |x-c| - r.

        Analytic geometric initialization followed by a short regression
        polish. Hash features stay at their near-zero init so the fit is
        independent of the level mask; only the SDF MLP is regressed. Returns
        the achieved max abs error on a held-out set; raises FieldInitError
        when the requested tolerance is not reached.
        """
        gen = torch.Generator().manual_seed(seed)
        c = torch.tensor(center, dtype=self._dtype)
        self._geometric_init(c, radius, gen)

        def draw(n):
            # Uniform cube points plus extra mass near the cone apex at the
            # center, where the distance function is hardest to fit.
            cube = torch.rand(n, 3, generator=gen, dtype=self._dtype)
            near = c + 0.12 * (torch.rand(n // 2, 3, generator=gen, dtype=self._dtype) - 0.5)
            return torch.cat([cube, near])

        pts = draw(6144)
        target = (pts - c).norm(dim=-1) - radius
        check = draw(8192)
        check_t = (check - c).norm(dim=-1) - radius

        params = [p for layer in self.sdf_mlp for p in layer.parameters()]
        opt = torch.optim.Adam(params, lr=5e-3)
        err = math.inf
        for step in range(max_steps):
            opt.param_groups[0]["lr"] = 5e-3 * (0.1 ** (step / max_steps))
            opt.zero_grad()
            pred, _ = self.sdf_and_feature(pts, active_levels=0)
            e = pred - target
            # Quartic term pushes the worst-case (apex) error down, not just
            # the mean.
            loss = (e**2).mean() + (e**4).mean().sqrt()
            loss.backward()
            opt.step()
            if step % 100 == 99 or step == max_steps - 1:
                with torch.no_grad():
                    p, _ = self.sdf_and_feature(check, active_levels=0)
                    err = (p - check_t).abs().max().item()
                if err < 0.6 * max_error:
                    break
        if err > max_error:
            raise FieldInitError(
                f"sphere init reached max error {err:.4f} > {max_error}"
            )
        self._check_finite()
        return err


class FieldTape:
    """Recorded forward pass through the field for explicit backpropagation.

    Exposes the recorded outputs (sdf, gradient, rgb) and accumulates exact
    parameter gradients for caller-supplied upstream gradients, including the
    second-order terms flowing through the SDF spatial gradient.
    """

    def __init__(self, field, position, view_direction, active_levels=None):
        self.field = field
        self._used = False
        self.sdf, self.gradient, feat = field.eval_sdf(
            position, active_levels, create_graph=True, with_feature=True
        )
        normal = F.normalize(self.gradient, dim=-1, eps=1e-9)
        self.rgb = field.eval_color(position, view_direction, normal, feat)

    def backprop(self, d_sdf=None, d_gradient=None, d_rgb=None) -> None:
        """Accumulate parameter gradients into ``param.grad`` buffers."""
        if self._used:
            raise RuntimeError(
                "backprop called without a recorded forward pass "
                "(tape already consumed)"
            )
        self._used = True
        outputs, grads = [], []
        for out, up in ((self.sdf, d_sdf), (self.gradient, d_gradient), (self.rgb, d_rgb)):
            if up is not None:
                outputs.append(out)
                grads.append(up)
        if not outputs:
            return
        torch.autograd.backward(outputs, grads)


def _make_mlp(d_in, hidden, d_out, dtype, gen):
    dims = [d_in, hidden, hidden, d_out]
    layers = torch.nn.ModuleList()
    for a, b in zip(dims[:-1], dims[1:]):
        lin = torch.nn.Linear(a, b, dtype=dtype)
        bound = 1.0 / math.sqrt(a)
        with torch.no_grad():
            lin.weight.uniform_(-bound, bound, generator=gen)
            lin.bias.uniform_(-bound, bound, generator=gen)
        layers.append(lin)
    return layers


def _run_mlp(layers, h):
    # Softplus keeps second derivatives defined for gradient-penalty losses;
    # beta=100 approximates ReLU closely enough for geometric fits.
    for layer in layers[:-1]:
        h = F.softplus(layer(h), beta=100)
    return layers[-1](h)
