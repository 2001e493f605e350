"""Ray generation, stratified sampling and SDF-based volume rendering.

Transparency along a ray is the sigmoid of the (sharpness-scaled) SDF, so it
is ~1 in free space and drops to ~0 inside the surface. Each sample owns the
interval between the midpoints to its neighbours (clipped to [t_near, t_far]);
rendering weights are differences of the monotone-clamped transparency at
those interval boundaries, which keeps the weights non-negative, normalized,
and centred on the samples so the peak weight lands on the zero crossing.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from .field import SurfaceField

CUBE_MIN = 0.0
CUBE_MAX = 1.0
MIN_OPACITY = 1e-8


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus a camera-to-world rigid transform.

    OpenGL-style camera frame: +x right, +y up, looking along -z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4, 4)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError("c2w must be 4x4")
        r = c2w[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6:
            raise ValueError("rotation part of c2w is not orthonormal")
        object.__setattr__(self, "c2w", c2w)

    @classmethod
    def from_fov_x(cls, camera_angle_x: float, width: int, height: int, c2w) -> "Camera":
        focal = (width / 2.0) / np.tan(camera_angle_x / 2.0)
        return cls(
            fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
            width=width, height=height, c2w=c2w,
        )

    @property
    def forward(self) -> np.ndarray:
        return -self.c2w[:3, 2]

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]


@dataclass
class RayBatch:
    """Rays with unit directions and scene-cube intersection bounds.

    ``valid`` is False for rays that miss the cube; those are rendered as
    pure background.
    """

    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit
    t_near: np.ndarray  # (N,)
    t_far: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class RenderResult:
    """Per-ray outputs of a rendered batch (torch tensors, length N)."""

    color: torch.Tensor  # (N, 3)
    opacity: torch.Tensor  # (N,)
    t_r: torch.Tensor  # (N,) weighted rendering point
    t_s: torch.Tensor  # (N,) zero-crossing distance (valid where has_ts)
    has_ts: torch.Tensor  # (N,) bool
    low_opacity: torch.Tensor  # (N,) bool, t_r fell back to the span midpoint
    weights: torch.Tensor  # (N, n)
    t: torch.Tensor  # (N, n)
    sdf: torch.Tensor  # (N, n)
    gradients: torch.Tensor  # (N, n, 3)
    t_near: torch.Tensor  # (N,)
    t_far: torch.Tensor  # (N,)
    finite: torch.Tensor  # (N,) bool, False where the field emitted NaN/Inf


def ray_cube_intersection(origins: np.ndarray, directions: np.ndarray):
    """Slab test against the unit scene cube. Returns (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (CUBE_MIN - origins) * inv
        t1 = (CUBE_MAX - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # Parallel rays (direction component 0) inside the slab hit everywhere.
    par = directions == 0.0
    inside = (origins >= CUBE_MIN) & (origins <= CUBE_MAX)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return t_near, t_far, hit


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBatch:
    """Rays through the centres of the given (x, y) pixel indices."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValueError("pixels must be (N, 2) integer indices")
    px, py = pixels[:, 0], pixels[:, 1]
    if (px < 0).any() or (px >= camera.width).any() or (py < 0).any() or (
        py >= camera.height
    ).any():
        raise ValueError("pixel index outside image bounds")
    dirs_cam = np.stack(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            -(py + 0.5 - camera.cy) / camera.fy,
            -np.ones_like(px, dtype=np.float64),
        ],
        axis=-1,
    )
    dirs = dirs_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    t_near, t_far, hit = ray_cube_intersection(origins, dirs)
    t_far = np.where(hit, t_far, t_near + 1.0)
    return RayBatch(origins, dirs, t_near, t_far, hit)


def sample_ray(
    t_near: np.ndarray,
    t_far: np.ndarray,
    n: int,
    jitter: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Stratified sample distances: n equal bins, one sample per bin.

    Bin midpoints when jitter is off, uniform within each bin otherwise.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling requires an rng")
        u = rng.uniform(size=(t_near.shape[0], n))
    else:
        u = np.full((t_near.shape[0], n), 0.5)
    edges = np.arange(n, dtype=np.float64)[None, :]
    frac = (edges + u) / n
    return t_near[:, None] + frac * (t_far - t_near)[:, None]


def transparency(sdf_value, s):
    """T = sigmoid(s * f): ~1 outside the surface, ~0 inside, 1/2 at f = 0.

    Numerically stable two-branch evaluation; works on scalars and arrays.
    """
    x = np.asarray(np.multiply(s, sdf_value), dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sample_interval_boundaries(t: torch.Tensor, t_near: torch.Tensor, t_far: torch.Tensor):
    """Boundaries b_0..b_n of the per-sample intervals: b_0 = t_near,
    b_j = midpoint(t_j, t_{j+1}), b_n = t_far."""
    mid = 0.5 * (t[:, :-1] + t[:, 1:])
    return torch.cat([t_near[:, None], mid, t_far[:, None]], dim=1)


def _interp_to_boundaries(t: torch.Tensor, f: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """SDF at interval boundaries by linear interpolation between samples
    (linear extrapolation for the half-bins at t_near and t_far)."""
    inner = 0.5 * (f[:, :-1] + f[:, 1:])
    dt0 = t[:, 1] - t[:, 0]
    dtn = t[:, -1] - t[:, -2]
    f_near = f[:, 0] + (f[:, 1] - f[:, 0]) * (b[:, 0] - t[:, 0]) / dt0
    f_far = f[:, -1] + (f[:, -1] - f[:, -2]) * (b[:, -1] - t[:, -1]) / dtn
    return torch.cat([f_near[:, None], inner, f_far[:, None]], dim=1)


def ray_weights(
    t: torch.Tensor,
    f: torch.Tensor,
    s: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
):
    """Discrete rendering weights from SDF samples along rays.

    Returns (weights (N, n), clamped boundary transmittance (N, n+1)).
    The boundary transmittance is clamped to its running minimum so it never
    increases along the ray; weight j is the transmittance drop across sample
    j's interval, hence >= 0 with sum <= 1.
    """
    b = sample_interval_boundaries(t, t_near, t_far)
    f_b = _interp_to_boundaries(t, f, b)
    t_b = torch.sigmoid(s * f_b)
    t_clamped = torch.cummin(t_b, dim=1).values
    w = (t_clamped[:, :-1] - t_clamped[:, 1:]).clamp_min(0.0)
    return w, t_clamped


def zero_crossings(t: torch.Tensor, f: torch.Tensor):
    """First sign change of f along each ray, by linear interpolation.

    Returns (t_s (N,), has_crossing (N,) bool); t_s is arbitrary where there
    is no crossing.
    """
    sign = f > 0
    cross = sign[:, :-1] & ~sign[:, 1:] | (~sign[:, :-1] & sign[:, 1:])
    has = cross.any(dim=1)
    idx = torch.argmax(cross.to(torch.int8), dim=1)
    rows = torch.arange(f.shape[0], device=f.device)
    f0 = f[rows, idx]
    f1 = f[rows, idx + 1]
    t0 = t[rows, idx]
    t1 = t[rows, idx + 1]
    denom = f0 - f1
    safe = torch.where(denom.abs() > 0, denom, torch.ones_like(denom))
    t_s = t0 + (t1 - t0) * f0 / safe
    return t_s, has


def render_rays(
    field: SurfaceField,
    rays: RayBatch,
    t: np.ndarray | torch.Tensor,
    background,
    active_levels: int | None = None,
    create_graph: bool = False,
) -> RenderResult:
    """Volume-render a batch of rays at the given sample distances.

    Rays flagged invalid (cube miss) get the background color and zero
    weights. Non-finite field outputs mark the ray in ``finite`` rather than
    being silently dropped; callers decide whether to abort or report.
    """
    dtype = field.dtype
    n_rays = len(rays)
    t = torch.as_tensor(np.asarray(t), dtype=dtype)
    o = torch.as_tensor(rays.origins, dtype=dtype)
    d = torch.as_tensor(rays.directions, dtype=dtype)
    t_near = torch.as_tensor(rays.t_near, dtype=dtype)
    t_far = torch.as_tensor(rays.t_far, dtype=dtype)
    bg = torch.as_tensor(np.asarray(background), dtype=dtype)

    n = t.shape[1]
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    view = d[:, None, :].expand(-1, n, -1).reshape(-1, 3)

    sdf_flat, grad_flat, feat = field.eval_sdf(
        pts, active_levels, create_graph=create_graph, with_feature=True
    )
    normal = F.normalize(grad_flat, dim=-1, eps=1e-9)
    rgb_flat = field.eval_color(pts, view, normal, feat)

    sdf = sdf_flat.reshape(n_rays, n)
    grads = grad_flat.reshape(n_rays, n, 3)
    rgb = rgb_flat.reshape(n_rays, n, 3)

    finite = (
        torch.isfinite(sdf).all(dim=1)
        & torch.isfinite(grads.reshape(n_rays, -1)).all(dim=1)
        & torch.isfinite(rgb.reshape(n_rays, -1)).all(dim=1)
    )

    w, _ = ray_weights(t, sdf, field.s, t_near, t_far)
    valid = torch.as_tensor(rays.valid)
    w = torch.where(valid[:, None], w, torch.zeros_like(w))

    opacity = w.sum(dim=1)
    color = (w[..., None] * rgb).sum(dim=1) + (1.0 - opacity)[:, None] * bg

    mid = 0.5 * (t_near + t_far)
    low = opacity <= MIN_OPACITY
    safe_opacity = torch.where(low, torch.ones_like(opacity), opacity)
    t_r = torch.where(low, mid, (w * t).sum(dim=1) / safe_opacity)

    t_s, has_ts = zero_crossings(t, sdf)
    has_ts = has_ts & valid

    return RenderResult(
        color=color,
        opacity=opacity,
        t_r=t_r,
        t_s=t_s,
        has_ts=has_ts,
        low_opacity=low | ~valid,
        weights=w,
        t=t,
        sdf=sdf,
        gradients=grads,
        t_near=t_near,
        t_far=t_far,
        finite=finite,
    )


@dataclass
class RenderConfig:
    n_samples: int = 96
    jitter: bool = False
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    chunk_rays: int = 4096


def render_image(
    field: SurfaceField,
    camera: Camera,
    config: RenderConfig | None = None,
    active_levels: int | None = None,
):
    """Render a full image. Returns (image (H, W, 3) float64, report dict).

    Deterministic given the config seed and chunk size; jitter streams are
    derived per chunk from (seed, chunk start).
    """
    config = config or RenderConfig()
    h, w = camera.height, camera.width
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    image = np.zeros((h * w, 3))
    report = {"rays": h * w, "cube_misses": 0, "low_opacity": 0, "non_finite": 0}
    for start in range(0, h * w, config.chunk_rays):
        chunk = pixels[start : start + config.chunk_rays]
        rays = generate_rays(camera, chunk)
        if config.jitter:
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, start))
            )
        else:
            rng = None
        t = sample_ray(rays.t_near, rays.t_far, config.n_samples, config.jitter, rng)
        with torch.no_grad():
            res = render_rays(
                field, rays, t, config.background, active_levels=active_levels
            )
        image[start : start + len(chunk)] = res.color.detach().numpy()
        report["cube_misses"] += int((~rays.valid).sum())
        report["low_opacity"] += int(res.low_opacity.sum())
        report["non_finite"] += int((~res.finite).sum())
    return image.reshape(h, w, 3), report
