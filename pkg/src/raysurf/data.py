"""Dataset ingestion and synthetic ground-truth scene generation.

Synthetic scenes are analytic SDF compositions rendered by sphere tracing
with Lambertian + ambient shading; they provide exact geometry and images for
end-to-end verification. Dataset files follow the transforms.json layout
(camera_angle_x + per-frame file_path / transform_matrix, OpenGL camera axes:
+x right, +y up, forward -z, which is also the renderer's convention, so no
axis conversion is applied on load).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .renderer import Camera, RayBatch, generate_rays, ray_cube_intersection


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------- SDF algebra


def sd_sphere(center, radius):
    center = np.asarray(center, dtype=np.float64)

    def f(p):
        return np.linalg.norm(p - center, axis=-1) - radius

    return f


def sd_box(center, half_extents):
    center = np.asarray(center, dtype=np.float64)
    he = np.asarray(half_extents, dtype=np.float64)

    def f(p):
        q = np.abs(p - center) - he
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    return f


def sd_capsule(a, b, radius):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)

    def f(p):
        ap = p - a
        h = np.clip((ap @ ab) / denom, 0.0, 1.0)
        return np.linalg.norm(ap - h[..., None] * ab, axis=-1) - radius

    return f


def sd_torus(center, major, minor, axis=1):
    center = np.asarray(center, dtype=np.float64)
    others = [i for i in range(3) if i != axis]

    def f(p):
        q = p - center
        ring = np.hypot(q[..., others[0]], q[..., others[1]]) - major
        return np.hypot(ring, q[..., axis]) - minor

    return f


def sd_union(*fns):
    def f(p):
        return np.minimum.reduce([fn(p) for fn in fns])

    return f


def sd_difference(fa, fb):
    """CSG difference a \\ b; a distance bound, not an exact SDF."""

    def f(p):
        return np.maximum(fa(p), -fb(p))

    return f


def _nearest_albedo(parts):
    """Color by the part whose SDF is smallest at the query point."""
    fns = [f for f, _ in parts]
    colors = np.asarray([c for _, c in parts], dtype=np.float64)

    def albedo(p):
        d = np.stack([f(p) for f in fns], axis=-1)
        return colors[np.argmin(d, axis=-1)]

    return albedo


@dataclass
class AnalyticScene:
    """Analytic ground-truth scene: SDF, albedo, fixed light model."""

    name: str
    sdf: Callable[[np.ndarray], np.ndarray]
    albedo: Callable[[np.ndarray], np.ndarray]
    light_direction: tuple = (0.45, 0.8, 0.35)  # direction toward the light
    ambient: float = 0.3


def _sphere_scene():
    body = sd_sphere((0.5, 0.5, 0.5), 0.3)
    return AnalyticScene(
        "sphere", body, _nearest_albedo([(body, (0.85, 0.35, 0.25))])
    )


def _torus_scene():
    body = sd_torus((0.5, 0.5, 0.5), 0.26, 0.09)
    return AnalyticScene(
        "torus", body, _nearest_albedo([(body, (0.3, 0.55, 0.8))])
    )


ROPE_RADIUS = 0.01


def _rope_scene():
    """Two posts on a slab, joined by a thin rope (radius 0.01 cube units).

    The slab and thick posts give the optimizer enough foreground coverage to
    anchor the surface; the rope itself is the thin feature under test.
    """
    slab = sd_box((0.5, 0.12, 0.5), (0.33, 0.05, 0.18))
    post_a = sd_capsule((0.30, 0.15, 0.5), (0.30, 0.72, 0.5), 0.08)
    post_b = sd_capsule((0.70, 0.15, 0.5), (0.70, 0.72, 0.5), 0.08)
    rope = sd_capsule((0.30, 0.72, 0.5), (0.70, 0.72, 0.5), ROPE_RADIUS)
    parts = [
        (slab, (0.55, 0.5, 0.45)),
        (post_a, (0.25, 0.3, 0.6)),
        (post_b, (0.25, 0.3, 0.6)),
        (rope, (0.65, 0.15, 0.15)),
    ]
    return AnalyticScene(
        "rope", sd_union(slab, post_a, post_b, rope), _nearest_albedo(parts)
    )


def _holed_scene():
    """Box with a cylindrical through-hole."""
    box = sd_box((0.5, 0.5, 0.5), (0.24, 0.2, 0.13))
    hole = sd_capsule((0.5, 0.5, 0.1), (0.5, 0.5, 0.9), 0.09)
    body = sd_difference(box, hole)
    return AnalyticScene(
        "holed", body, _nearest_albedo([(box, (0.9, 0.6, 0.2))])
    )


SCENES: dict[str, Callable[[], AnalyticScene]] = {
    "sphere": _sphere_scene,
    "torus": _torus_scene,
    "rope": _rope_scene,
    "holed": _holed_scene,
}


def get_scene(name: str) -> AnalyticScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise DataError(
            f"unknown scene {name!r}; available: {', '.join(sorted(SCENES))}"
        ) from None


# ------------------------------------------------------------------ dataset


@dataclass
class PosedImageSet:
    """Posed multi-view images with train/val split tags.

    Scenes are authored directly in the unit cube, so the scene-to-unit-cube
    normalization transform is the identity; it is kept explicit for datasets
    that need one.
    """

    images: list  # (H, W, 3) float arrays in [0, 1]
    cameras: list  # Camera
    splits: list  # "train" | "val"
    camera_angle_x: float
    normalization: np.ndarray = None  # (4, 4)

    def __post_init__(self):
        if len(self.images) != len(self.cameras) or not self.images:
            raise ValueError("need equally many images and cameras (>= 1)")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise ValueError("all images must have the same size")
        if self.normalization is None:
            self.normalization = np.eye(4)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]


def _look_at(eye, center, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(center, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def camera_ring(
    n_views: int,
    width: int,
    height: int,
    camera_angle_x: float = 0.8,
    radius: float = 1.5,
    seed: int = 0,
) -> list[Camera]:
    """Quasi-uniform seeded camera placement on a sphere around the cube.

    Fibonacci-spiral directions with elevation limited to +-55 degrees (keeps
    the up vector well-conditioned), plus a seeded azimuth offset.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    center = np.array([0.5, 0.5, 0.5])
    cams = []
    for i in range(n_views):
        frac = (i + 0.5) / n_views
        elev = math.asin(2.0 * frac - 1.0) * (55.0 / 90.0)
        az = golden * i + phase
        d = np.array(
            [
                math.cos(elev) * math.cos(az),
                math.sin(elev),
                math.cos(elev) * math.sin(az),
            ]
        )
        cams.append(
            Camera.from_fov_x(camera_angle_x, width, height, _look_at(center + radius * d, center))
        )
    return cams


def shade(scene: AnalyticScene, points: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Lambertian + ambient shading at surface points, normals by central
    differences of the scene SDF."""
    grad = np.empty_like(points)
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        grad[:, k] = scene.sdf(points + e) - scene.sdf(points - e)
    norms = np.linalg.norm(grad, axis=-1, keepdims=True)
    normal = grad / np.maximum(norms, 1e-12)
    light = np.asarray(scene.light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.maximum(normal @ light, 0.0)
    factor = scene.ambient + (1.0 - scene.ambient) * lambert
    return np.clip(scene.albedo(points) * factor[:, None], 0.0, 1.0)


def sphere_trace(
    scene: AnalyticScene,
    rays: RayBatch,
    background=(1.0, 1.0, 1.0),
    eps: float = 1e-5,
    max_steps: int = 512,
):
    """Sphere-trace analytic scene; returns (colors (N, 3), n_unconverged)."""
    n = len(rays)
    colors = np.tile(np.asarray(background, dtype=np.float64), (n, 1))
    t = rays.t_near.copy()
    active = rays.valid.copy()
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        p = rays.origins[active] + t[active, None] * rays.directions[active]
        d = scene.sdf(p)
        newly_hit = d < eps
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[active] += np.maximum(d * 0.8, eps * 0.5)
        escaped = t > rays.t_far + 1e-9
        active = active & ~escaped & ~hit
    unconverged = int(active.sum())
    if hit.any():
        pts = rays.origins[hit] + t[hit, None] * rays.directions[hit]
        colors[hit] = shade(scene, pts)
    return colors, unconverged


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so written PNGs round-trip bit-exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(
    scene: AnalyticScene,
    n_views: int = 20,
    image_size: int = 64,
    seed: int = 0,
    val_views: int = 4,
    background=(1.0, 1.0, 1.0),
    camera_angle_x: float = 0.8,
    supersample: int = 2,
) -> PosedImageSet:
    """Render an analytic scene from cameras on a surrounding sphere.

    Each pixel averages a ``supersample`` x ``supersample`` subgrid of
    sphere-traced rays (box-filter anti-aliasing); hard silhouettes would
    otherwise alias per view and put a floor on achievable novel-view PSNR.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    cams = camera_ring(
        n_views + val_views, image_size, image_size, camera_angle_x, seed=seed
    )
    # a camera with the same pose/fov at ss-times the resolution has its pixel
    # centers exactly on the subpixel grid of the target image
    ss = supersample
    hi_cams = camera_ring(
        n_views + val_views, image_size * ss, image_size * ss,
        camera_angle_x, seed=seed,
    )
    hi = image_size * ss
    xs, ys = np.meshgrid(np.arange(hi), np.arange(hi))
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    images, splits = [], []
    bad = 0
    total = 0
    for i, cam in enumerate(hi_cams):
        rays = generate_rays(cam, pixels)
        colors, unconverged = sphere_trace(scene, rays, background)
        bad += unconverged
        total += len(rays)
        img = colors.reshape(image_size, ss, image_size, ss, 3).mean(axis=(1, 3))
        images.append(_quantize(img))
        splits.append("train" if i < n_views else "val")
    if bad > 0.001 * total:
        raise DataError(
            f"sphere tracing failed to converge on {bad}/{total} pixels"
        )
    return PosedImageSet(images, cams, splits, camera_angle_x)


# ----------------------------------------------------------------- disk I/O


def write_dataset(dataset: PosedImageSet, out_dir) -> None:
    """Write transforms_{train,val}.json plus 8-bit PNG frames."""
    out = Path(out_dir)
    for split in ("train", "val"):
        idxs = dataset.indices(split)
        if not idxs:
            continue
        (out / split).mkdir(parents=True, exist_ok=True)
        frames = []
        for k, i in enumerate(idxs):
            rel = f"./{split}/r_{k}"
            arr = np.round(dataset.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(out / f"{rel}.png")
            frames.append(
                {
                    "file_path": rel,
                    "transform_matrix": dataset.cameras[i].c2w.tolist(),
                }
            )
        payload = {"camera_angle_x": dataset.camera_angle_x, "frames": frames}
        with open(out / f"transforms_{split}.json", "w") as f:
            json.dump(payload, f, indent=1)


def load_transforms_json(path, background=(1.0, 1.0, 1.0)):
    """Load one transforms file; returns (cameras, images) lists.

    PNG alpha, when present, is composited over ``background``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing transforms file: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path}: {e}") from e
    if "camera_angle_x" not in payload or "frames" not in payload:
        raise DataError(f"{path}: missing camera_angle_x or frames")
    angle = float(payload["camera_angle_x"])
    cameras, images = [], []
    for frame in payload["frames"]:
        img_path = path.parent / (frame["file_path"] + ".png")
        if not img_path.exists():
            raise DataError(f"missing image: {img_path}")
        arr = np.asarray(Image.open(img_path), dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        if arr.shape[-1] == 4:
            a = arr[..., 3:4]
            arr = arr[..., :3] * a + np.asarray(background) * (1.0 - a)
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4) or abs(np.linalg.det(c2w)) < 1e-12:
            raise DataError(f"{path}: non-invertible transform for {frame['file_path']}")
        h, w = arr.shape[:2]
        cameras.append(Camera.from_fov_x(angle, w, h, c2w))
        images.append(arr[..., :3])
    return cameras, images, angle


def load_dataset(dataset_dir, background=(1.0, 1.0, 1.0)) -> PosedImageSet:
    """Load transforms_train.json (+ optional transforms_val.json)."""
    d = Path(dataset_dir)
    cameras, images, splits = [], [], []
    angle = None
    for split in ("train", "val"):
        p = d / f"transforms_{split}.json"
        if not p.exists():
            if split == "train":
                raise DataError(f"missing transforms file: {p}")
            continue
        cams, imgs, angle = load_transforms_json(p, background)
        cameras.extend(cams)
        images.extend(imgs)
        splits.extend([split] * len(cams))
    return PosedImageSet(images, cameras, splits, angle)


# ------------------------------------------------------------ batch sampling


def sample_pixel_batch(
    dataset: PosedImageSet,
    m: int,
    rng: np.random.Generator,
    split: str = "train",
    exhaustive: bool = False,
):
    """m uniform (ray, ground-truth color) pairs over all split pixels.

    With ``exhaustive`` (m must equal the split's pixel count) every pixel is
    returned exactly once.
    """
    if m < 1:
        raise ValueError("batch size must be >= 1")
    idxs = dataset.indices(split)
    h, w = dataset.images[idxs[0]].shape[:2]
    per_image = h * w
    total = per_image * len(idxs)
    if exhaustive:
        if m != total:
            raise ValueError("exhaustive sampling requires m == total pixels")
        flat = np.arange(total)
    else:
        flat = rng.integers(0, total, size=m)
    img_k = flat // per_image
    pix = flat % per_image
    py, px = pix // w, pix % w

    origins = np.empty((m, 3))
    dirs = np.empty((m, 3))
    t_near = np.empty(m)
    t_far = np.empty(m)
    valid = np.empty(m, dtype=bool)
    colors = np.empty((m, 3))
    for k in np.unique(img_k):
        sel = img_k == k
        i = idxs[int(k)]
        rays = generate_rays(dataset.cameras[i], np.stack([px[sel], py[sel]], axis=-1))
        origins[sel] = rays.origins
        dirs[sel] = rays.directions
        t_near[sel] = rays.t_near
        t_far[sel] = rays.t_far
        valid[sel] = rays.valid
        colors[sel] = dataset.images[i][py[sel], px[sel]]
    return RayBatch(origins, dirs, t_near, t_far, valid), colors
