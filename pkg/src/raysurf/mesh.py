"""Marching-cubes surface extraction and evaluation metrics.

Extraction samples the SDF on a regular grid and runs the standard 256-case
marching-cubes table (scikit-image backend, conventional ambiguity handling)
at iso-level 0. Metrics: symmetric Chamfer distance over area-uniform surface
samples, PSNR, and windowed SSIM.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes


class MeshExtractionError(RuntimeError):
    pass


class EmptyMeshError(RuntimeError):
    """Raised when a metric needs a nonempty mesh ("failed reconstruction")."""


PSNR_CAP = 99.0

_LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601 grayscale weights


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.vertices) and not np.isfinite(self.vertices).all():
            raise ValueError("non-finite vertex coordinates")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(
            np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0))
        )


def field_sdf_fn(field, active_levels=None, chunk: int = 65536):
    """Adapt a SurfaceField to a numpy (N, 3) -> (N,) SDF callable."""

    def fn(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        with torch.no_grad():
            for i in range(0, len(points), chunk):
                p = torch.as_tensor(points[i : i + chunk], dtype=field.dtype)
                sdf, _ = field.sdf_and_feature(p, active_levels)
                out[i : i + chunk] = sdf.numpy()
        return out

    return fn


def extract_mesh(
    sdf_fn,
    resolution: int = 256,
    bounds: tuple = (0.0, 1.0),
    chunk: int = 262144,
) -> TriangleMesh:
    """Marching cubes of the SDF zero level over an R^3 grid inside bounds.

    Returns an empty mesh when the field has no sign change. NaN field values
    raise MeshExtractionError naming the first offending grid point.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    lo, hi = bounds
    if not lo < hi:
        raise ValueError("invalid bounds")
    axis = np.linspace(lo, hi, resolution)
    cell = axis[1] - axis[0]
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)
    values = np.empty(len(points))
    for i in range(0, len(points), chunk):
        values[i : i + chunk] = sdf_fn(points[i : i + chunk])
    bad = ~np.isfinite(values)
    if bad.any():
        p = points[np.argmax(bad)]
        raise MeshExtractionError(
            f"field evaluated to NaN/Inf at grid point ({p[0]:.4f}, {p[1]:.4f}, {p[2]:.4f})"
        )
    volume = values.reshape(resolution, resolution, resolution)
    if volume.min() > 0 or volume.max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = marching_cubes(volume, level=0.0, spacing=(cell, cell, cell))
    return TriangleMesh(verts + lo, faces)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform point samples on the mesh surface."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot sample an empty mesh")
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMeshError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


@dataclass
class ChamferReport:
    chamfer: float
    mean_ab: float  # accuracy: a -> b
    mean_ba: float  # completeness: b -> a


def chamfer(
    mesh_a: TriangleMesh,
    mesh_b: TriangleMesh,
    samples_per_mesh: int = 100_000,
    seed: int = 0,
) -> ChamferReport:
    """Symmetric mean nearest-neighbour distance between surface samples."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise EmptyMeshError("chamfer requires two nonempty meshes")
    rng_a = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    rng_b = np.random.default_rng(np.random.SeedSequence((seed, 1)))
    pa = sample_surface(mesh_a, samples_per_mesh, rng_a)
    pb = sample_surface(mesh_b, samples_per_mesh, rng_b)
    d_ab = cKDTree(pb).query(pa, workers=-1)[0].mean()
    d_ba = cKDTree(pa).query(pb, workers=-1)[0].mean()
    return ChamferReport(chamfer=0.5 * (d_ab + d_ba), mean_ab=float(d_ab), mean_ba=float(d_ba))


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images cap at 99 dB."""
    a, b = np.asarray(image_a), np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from scipy.signal import fftconvolve

    return fftconvolve(img, kernel, mode="valid")


def ssim(image_a: np.ndarray, image_b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows on the luma channel."""
    a, b = np.asarray(image_a, dtype=np.float64), np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a @ _LUMA, b @ _LUMA
    if min(a.shape) < 11:
        raise ValueError("images smaller than the 11x11 SSIM window")
    kern = _gaussian_kernel()
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = _windowed(a, kern), _windowed(b, kern)
    var_a = _windowed(a * a, kern) - mu_a**2
    var_b = _windowed(b * b, kern) - mu_b**2
    cov = _windowed(a * b, kern) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.clip(np.mean(num / den), 0.0, 1.0))


# ------------------------------------------------------------------ mesh I/O


def write_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def write_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        counts = np.full((len(mesh.triangles), 1), 3, dtype=np.uint8)
        tri = mesh.triangles.astype("<i4")
        face_rows = b"".join(
            counts[i].tobytes() + tri[i].tobytes() for i in range(len(tri))
        )
        f.write(face_rows)


def read_ply(path) -> TriangleMesh:
    """Binary little-endian PLY with float xyz vertices and uchar/int faces
    (the layout ``write_ply`` produces)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace")
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n_vert = n_face = None
    for line in header.splitlines():
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vert is None or n_face is None:
        raise ValueError(f"{path}: missing vertex/face elements")
    body = raw[end + len(b"end_header\n"):]
    verts = np.frombuffer(body, dtype="<f4", count=3 * n_vert).reshape(-1, 3)
    faces = np.empty((n_face, 3), dtype=np.int64)
    off = verts.nbytes
    row = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    rows = np.frombuffer(body, dtype=row, count=n_face, offset=off)
    if (rows["n"] != 3).any():
        raise ValueError(f"{path}: non-triangular face")
    faces[:] = rows["idx"]
    return TriangleMesh(verts.astype(np.float64), faces)


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return read_obj(path)
    if path.suffix.lower() == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format: {path.suffix}")
