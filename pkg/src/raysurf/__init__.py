"""raysurf: neural SDF surface reconstruction with ray-adaptive Eikonal
regularization over a hash-encoded volume renderer."""

__version__ = "0.1.0"

from .field import FieldTape, HashGridConfig, LevelMask, SurfaceField
from .renderer import (
    Camera, RayBatch, RenderConfig, RenderResult, generate_rays, render_image,
    render_rays, sample_ray, transparency,
)
from .losses import AdaptiveConfig, LossBreakdown, eikonal_loss, rgb_loss, total_loss
from .optim import Adam, TrainConfig, active_levels_at, lr_at, train
from .mesh import TriangleMesh, chamfer, extract_mesh, psnr, ssim
from .data import AnalyticScene, PosedImageSet, generate_synthetic, load_dataset

__all__ = [
    "AdaptiveConfig", "Adam", "AnalyticScene", "Camera", "FieldTape",
    "HashGridConfig", "LevelMask", "LossBreakdown", "PosedImageSet",
    "RayBatch", "RenderConfig", "RenderResult", "SurfaceField", "TrainConfig",
    "TriangleMesh", "active_levels_at", "chamfer", "eikonal_loss",
    "extract_mesh", "generate_rays", "generate_synthetic", "load_dataset",
    "lr_at", "psnr", "render_image", "render_rays", "rgb_loss", "sample_ray",
    "ssim", "total_loss", "train", "transparency",
]
