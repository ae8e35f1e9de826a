"""Run configuration: defaults, presets, YAML overlay and CLI overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .models import AblationConfig, ClassifierSettings, CropSpec, TrainSettings

DEFAULT_OUTPUT = "neonet-out"
OUTPUT_ENV = "NEONET_OUTPUT"

# Desk scale: 32-case cohort, 24x24x12 patches, T=50, a few hundred steps
PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "volume_dims": [48, 48, 24],
        "crop_size": [24, 24, 12],
        "n_pos": 11,
        "n_neg": 21,
        "schedule_steps": 50,
        "vae_channels": [4, 8],
        "denoiser_channels": [8, 16, 16],
        "time_embed_dim": 8,
        "vae_lr": 3e-3,
        "ldm_lr": 1e-3,
        "controlnet_lr": 1e-3,
        "classifier_lr": 3e-3,
        "vae_steps": 300,
        "ldm_steps": 200,
        "controlnet_steps": 150,
        "vae_batch": 4,
        "ldm_batch": 4,
        "controlnet_batch": 4,
        "classifier_epochs": 30,
        "patience": 10,
        "ablation_epochs": 1,
    },
}


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    workers: int = 1
    volume_dims: list[int] = field(default_factory=lambda: [128, 128, 64])
    crop_size: list[int] = field(default_factory=lambda: [96, 96, 48])
    n_pos: int = 44
    n_neg: int = 84
    folds: int = 5
    phantom_rim_amplitude: float = 0.3
    exclude_large_tumors: bool = False
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    latent_channels: int = 4
    vae_channels: list[int] = field(default_factory=lambda: [8, 16])
    denoiser_channels: list[int] = field(default_factory=lambda: [16, 32, 32])
    time_embed_dim: int = 16
    vae_lr: float = 1e-6
    ldm_lr: float = 1e-5
    controlnet_lr: float = 1e-5
    classifier_lr: float = 1e-4
    weight_decay: float = 0.01
    vae_steps: int = 6000
    ldm_steps: int = 6000
    controlnet_steps: int = 3000
    vae_batch: int = 8
    ldm_batch: int = 8
    controlnet_batch: int = 8
    classifier_batch: int = 4
    classifier_epochs: int = 300
    patience: int = 20
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    classifier_ratio: float = 1.0
    dab_count: int = 2
    reduction_ratio: int = 4
    channel_only: bool = False
    spatial_only: bool = False
    ablation_epochs: int = 1
    output_dir: str | None = None
    verbose: bool = False

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)} - {"verbose"}

    @classmethod
    def build(
        cls,
        preset: str = "full",
        path: str | Path | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> RunConfig:
        """defaults < preset < YAML file < explicit overrides, then validate."""
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
        values: dict[str, Any] = dict(PRESETS[preset])
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                with open(path) as f:
                    loaded = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: expected a mapping of keys to values")
            values.update(loaded)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})

        unknown = sorted(set(values) - cls.keys() - {"verbose"})
        if unknown:
            raise ConfigError(f"unknown config key '{unknown[0]}'")
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_args(cls, args) -> RunConfig:
        """Build config from parsed CLI args."""
        overrides = {
            "seed": getattr(args, "seed", None),
            "output_dir": str(args.output_dir) if getattr(args, "output_dir", None) else None,
            "verbose": getattr(args, "verbose", False) or None,
        }
        return cls.build(getattr(args, "preset", "full"), getattr(args, "config", None), overrides)

    def validate(self) -> None:
        def require(ok: bool, key: str, rule: str) -> None:
            if not ok:
                raise ConfigError(f"{key}={getattr(self, key)!r}: {rule}")

        require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        require(self.precision in ("float64", "float32"), "precision", "must be float64 or float32")
        require(self.workers >= 1, "workers", "must be >= 1")
        for key in ("volume_dims", "crop_size"):
            v = getattr(self, key)
            require(len(v) == 3 and all(isinstance(e, int) and e > 0 for e in v), key, "needs three positive integers")
        require(all(e % 4 == 0 for e in self.crop_size), "crop_size", "extents must be divisible by 4")
        require(self.n_pos >= 1 and self.n_neg >= 1, "n_pos", "each class needs at least one case")
        require(self.n_neg >= self.n_pos, "n_neg", "positives must be the minority class")
        require(self.folds >= 2 and min(self.n_pos, self.n_neg) >= self.folds, "folds", "each class needs >= folds cases")
        require(self.phantom_rim_amplitude >= 0, "phantom_rim_amplitude", "must be >= 0")
        require(self.schedule_steps >= 1, "schedule_steps", "must be >= 1")
        require(0 < self.beta_start <= self.beta_end < 1, "beta_start", "need 0 < beta_start <= beta_end < 1")
        require(self.latent_channels >= 1, "latent_channels", "must be >= 1")
        require(len(self.vae_channels) == 2, "vae_channels", "needs two widths")
        require(len(self.denoiser_channels) == 3, "denoiser_channels", "needs three widths")
        require(self.time_embed_dim >= 2 and self.time_embed_dim % 2 == 0, "time_embed_dim", "must be even")
        for key in ("vae_lr", "ldm_lr", "controlnet_lr", "classifier_lr"):
            require(getattr(self, key) > 0, key, "must be > 0")
        require(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        for key in ("vae_steps", "ldm_steps", "controlnet_steps", "vae_batch", "ldm_batch",
                    "controlnet_batch", "classifier_batch", "classifier_epochs", "patience", "ablation_epochs"):
            require(getattr(self, key) >= 1, key, "must be >= 1")
        require(len(self.ratios) > 0 and all(0 <= r <= 1 for r in self.ratios), "ratios", "values must be in [0, 1]")
        require(list(self.ratios) == sorted(self.ratios), "ratios", "must be ascending")
        require(0 <= self.classifier_ratio <= 1, "classifier_ratio", "must be in [0, 1]")
        require(0 <= self.dab_count <= 3, "dab_count", "must be in 0..3")
        require(self.reduction_ratio >= 1, "reduction_ratio", "must be >= 1")
        require(not (self.channel_only and self.spatial_only), "channel_only", "cannot combine with spatial_only")

    # ── derived views ──

    def as_dict(self) -> dict[str, Any]:
        return {k: v for k, v in dataclasses.asdict(self).items() if k in self.keys()}

    def config_hash(self) -> str:
        values = self.as_dict()
        values.pop("output_dir")
        text = yaml.safe_dump(values, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def output_root(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    @property
    def crop(self) -> CropSpec:
        return CropSpec(tuple(self.crop_size))

    def train_settings(self, stage: str, fold: int = 0) -> TrainSettings:
        return TrainSettings(
            steps=getattr(self, f"{stage}_steps"),
            lr=getattr(self, f"{stage}_lr"),
            batch=getattr(self, f"{stage}_batch"),
            weight_decay=self.weight_decay,
            seed=self.seed * 1000 + fold,
            dtype=self.precision,
        )

    def classifier_settings(self, fold: int = 0, epochs: int | None = None) -> ClassifierSettings:
        return ClassifierSettings(
            epochs=epochs or self.classifier_epochs,
            patience=self.patience,
            lr=self.classifier_lr,
            batch=self.classifier_batch,
            weight_decay=self.weight_decay,
            seed=self.seed * 1000 + fold,
            dtype=self.precision,
        )

    def ablation(self) -> AblationConfig:
        return AblationConfig(self.dab_count, self.channel_only, self.spatial_only, self.reduction_ratio)
