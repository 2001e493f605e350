"""Adam optimizer, schedules, and the training loop.

Learning rate decays exponentially from lr_start to lr_end over total_steps.
Hash levels unlock progressively: the first ``initial_levels`` train from
step 0 and one more level joins every ``steps_per_level`` steps. Runs are
fully deterministic given the seed (per-step RNG streams are derived from
(seed, step)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import PosedImageSet, sample_pixel_batch
from .field import SurfaceField
from .losses import AdaptiveConfig, StepAborted, total_loss
from .renderer import render_rays, sample_ray


@dataclass
class TrainConfig:
    total_steps: int = 10000
    batch_rays: int = 256
    samples_per_ray: int = 48
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    # the MLPs train at mlp_lr_scale * lr; the full rate is sized for the
    # sparse hash table and destabilizes the dense MLP parameters (runaway
    # all-positive SDF on scenes that start far from the initialization).
    # The transparency sharpness scalar keeps the full rate so edges harden.
    mlp_lr_scale: float = 0.1
    initial_levels: int = 4
    steps_per_level: int = 2000
    seed: int = 0
    jitter: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    checkpoint_every: int = 1000
    adaptive: AdaptiveConfig = dc_field(default_factory=AdaptiveConfig)

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_rays < 1 or self.samples_per_ray < 2:
            raise ValueError("batch_rays >= 1 and samples_per_ray >= 2 required")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.mlp_lr_scale <= 0:
            raise ValueError("mlp_lr_scale must be > 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Exponential interpolation lr_start -> lr_end over total_steps."""
    if cfg.total_steps == 0:
        return cfg.lr_start
    frac = step / cfg.total_steps
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def active_levels_at(step: int, cfg: TrainConfig, num_levels: int) -> int:
    """min(L, initial_levels + floor(step / steps_per_level))."""
    return min(num_levels, cfg.initial_levels + step // cfg.steps_per_level)


class Adam:
    """Standard Adam with bias correction over a list of parameters.

    Parameters with exactly zero gradient and zero moments are untouched by a
    step, so masked hash levels do not drift.
    """

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-15, lr_scales=None):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must match params")
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2_sqrt = math.sqrt(1.0 - self.beta2**self.step_count)
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            # A single reduction catches any nan/inf (inf-inf sums to nan).
            if not torch.isfinite(g.sum()):
                raise StepAborted("non-finite gradient reached the optimizer")
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            # Bias corrections folded into scalars:
            # (m/bc1) / (sqrt(v/bc2)+eps) == m / (sqrt(v)+eps*sqrt(bc2)) * sqrt(bc2)/bc1
            denom = v.sqrt().add_(self.eps * bc2_sqrt)
            p.addcdiv_(m, denom, value=-lr * scale * bc2_sqrt / bc1)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainLogRow:
    step: int
    l_rgb: float
    l_sdf: float
    total: float
    mean_render_factor: float
    min_render_factor: float
    max_render_factor: float
    mean_bias_factor: float
    min_bias_factor: float
    max_bias_factor: float
    s: float
    lr: float
    active_levels: int


def train(
    dataset: PosedImageSet,
    field: SurfaceField,
    cfg: TrainConfig,
    out_dir=None,
    log_every: int = 1,
    progress=None,
) -> list[TrainLogRow]:
    """Run the optimization loop; returns the training log.

    Per step: sample ``batch_rays`` random train pixels, render, assemble the
    total loss, backpropagate and apply one Adam step under the lr and
    hash-level schedules. Non-finite steps are skipped and counted; more than
    1% aborted steps fails the run. Writes checkpoints and a JSONL log when
    ``out_dir`` is given.
    """
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    named = list(field.named_parameters())
    adam = Adam(
        [p for _, p in named],
        cfg.beta1, cfg.beta2, cfg.eps,
        lr_scales=[
            1.0 if name in ("table", "s_log") else cfg.mlp_lr_scale
            for name, _ in named
        ],
    )
    log: list[TrainLogRow] = []
    aborted = 0
    try:
        for step in range(cfg.total_steps):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, step)))
            rays, truth = sample_pixel_batch(dataset, cfg.batch_rays, rng)
            t = sample_ray(
                rays.t_near, rays.t_far, cfg.samples_per_ray, cfg.jitter, rng
            )
            levels = active_levels_at(step, cfg, field.config.num_levels)
            lr = lr_at(step, cfg)
            adam.zero_grad()
            try:
                result = render_rays(
                    field, rays, t, cfg.background,
                    active_levels=levels, create_graph=True,
                )
                breakdown = total_loss(result, truth, cfg.adaptive)
                breakdown.total_tensor.backward()
                adam.step(lr)
            except StepAborted:
                aborted += 1
                adam.zero_grad()
                if aborted > max(1, 0.01 * cfg.total_steps):
                    raise RuntimeError(
                        f"{aborted} aborted (non-finite) steps out of {step + 1}"
                    )
                continue
            if step % log_every == 0 or step == cfg.total_steps - 1:
                row = TrainLogRow(
                    step=step,
                    l_rgb=breakdown.l_rgb,
                    l_sdf=breakdown.l_sdf,
                    total=breakdown.total,
                    mean_render_factor=float(breakdown.render_factor.mean()),
                    min_render_factor=float(breakdown.render_factor.min()),
                    max_render_factor=float(breakdown.render_factor.max()),
                    mean_bias_factor=float(breakdown.bias_factor.mean()),
                    min_bias_factor=float(breakdown.bias_factor.min()),
                    max_bias_factor=float(breakdown.bias_factor.max()),
                    s=field.s.detach().item(),
                    lr=lr,
                    active_levels=levels,
                )
                log.append(row)
                if log_file is not None:
                    log_file.write(json.dumps(row.__dict__) + "\n")
            if progress is not None:
                progress(step, log[-1] if log else None)
            if out is not None and cfg.checkpoint_every and (
                (step + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(out / f"ckpt_{step + 1:06d}.rsck", field, step + 1)
        if out is not None:
            save_checkpoint(out / "ckpt_final.rsck", field, cfg.total_steps)
    finally:
        if log_file is not None:
            log_file.close()
    return log
