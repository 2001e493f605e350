"""Versioned run configuration files (JSON).

Schema (all sections optional, all keys optional within a section):

{
  "version": 1,
  "field": {num_levels, base_resolution, max_resolution, features_per_level,
            table_size_log2, sdf_hidden, color_hidden},
  "train": {total_steps, batch_rays, samples_per_ray, lr_start, lr_end,
            beta1, beta2, eps, mlp_lr_scale, initial_levels, steps_per_level,
            seed, jitter, checkpoint_every, background},
  "adaptive": {alpha, c_min, c_max, eikonal_weight},
  "render": {n_samples, background}
}

Unknown keys are errors: misspelling alpha or c_max must not silently fall
back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .field import HashGridConfig
from .losses import AdaptiveConfig
from .optim import TrainConfig
from .renderer import RenderConfig

CONFIG_VERSION = 1

_SECTIONS = {
    "field": {
        "num_levels", "base_resolution", "max_resolution",
        "features_per_level", "table_size_log2", "sdf_hidden", "color_hidden",
    },
    "train": {
        "total_steps", "batch_rays", "samples_per_ray", "lr_start", "lr_end",
        "beta1", "beta2", "eps", "mlp_lr_scale", "initial_levels",
        "steps_per_level", "seed",
        "jitter", "checkpoint_every", "background",
    },
    "adaptive": {"alpha", "c_min", "c_max", "eikonal_weight"},
    "render": {"n_samples", "background"},
}


class ConfigError(RuntimeError):
    pass


@dataclass
class RunConfig:
    grid: HashGridConfig
    sdf_hidden: int
    color_hidden: int
    train: TrainConfig
    render: RenderConfig

    def as_dict(self) -> dict:
        import dataclasses

        return {
            "version": CONFIG_VERSION,
            "field": {
                **dataclasses.asdict(self.grid),
                "sdf_hidden": self.sdf_hidden,
                "color_hidden": self.color_hidden,
            },
            "train": {
                k: v
                for k, v in dataclasses.asdict(self.train).items()
                if k != "adaptive"
            },
            "adaptive": {
                k: getattr(self.train.adaptive, k) for k in _SECTIONS["adaptive"]
            },
            "render": {
                "n_samples": self.render.n_samples,
                "background": list(self.render.background),
            },
        }


def default_run_config() -> RunConfig:
    return RunConfig(
        grid=HashGridConfig(),
        sdf_hidden=64,
        color_hidden=64,
        train=TrainConfig(),
        render=RenderConfig(),
    )


def _check_keys(section: str, payload: dict, allowed: set) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in config section {section!r}: {', '.join(unknown)}"
        )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config root must be an object")
    _check_keys("<root>", payload, {"version", *_SECTIONS})
    if payload.get("version") != CONFIG_VERSION:
        raise ConfigError(
            f"{path}: config version must be {CONFIG_VERSION}, got {payload.get('version')!r}"
        )
    for name in _SECTIONS:
        sec = payload.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{path}: section {name!r} must be an object")
        _check_keys(name, sec, _SECTIONS[name])

    cfg = default_run_config()
    f = payload.get("field", {})
    grid_keys = {
        k: f[k]
        for k in (
            "num_levels", "base_resolution", "max_resolution",
            "features_per_level", "table_size_log2",
        )
        if k in f
    }
    try:
        grid = HashGridConfig(
            **{**{k: getattr(cfg.grid, k) for k in (
                "num_levels", "base_resolution", "max_resolution",
                "features_per_level", "table_size_log2")}, **grid_keys}
        )
        adaptive = AdaptiveConfig(**payload.get("adaptive", {}))
        train_kwargs = dict(payload.get("train", {}))
        if "background" in train_kwargs:
            train_kwargs["background"] = tuple(train_kwargs["background"])
        train = TrainConfig(adaptive=adaptive, **train_kwargs)
        render_kwargs = dict(payload.get("render", {}))
        if "background" in render_kwargs:
            render_kwargs["background"] = tuple(render_kwargs["background"])
        render = RenderConfig(**render_kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: invalid config value: {e}") from e
    return RunConfig(
        grid=grid,
        sdf_hidden=int(f.get("sdf_hidden", 64)),
        color_hidden=int(f.get("color_hidden", 64)),
        train=train,
        render=render,
    )


def write_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.as_dict(), indent=1, sort_keys=True))
