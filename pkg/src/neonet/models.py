"""Data contracts passed between pipeline stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Provenance = Literal["real", "synthetic"]


@dataclass
class Volume:
    """Scalar intensities on a [D, H, W] grid with spacing/origin in mm."""

    grid: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # qform/sform fields read from disk, written back verbatim
    orientation: dict | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape  # type: ignore[return-value]


@dataclass
class LabelMap:
    """Integer labels {0 background, 1 liver, 2 tumor} aligned with a Volume."""

    grid: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: dict | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class CropSpec:
    size: tuple[int, int, int] = (96, 96, 48)

    def __post_init__(self) -> None:
        for extent in self.size:
            if extent < 1 or extent % 2:
                raise ValueError(f"crop extents must be positive and even, got {self.size}")


@dataclass
class PatchPair:
    """Dual-channel TLCR patch: image [2, cx, cy, cz] and binary labels alike."""

    image: np.ndarray
    labels: np.ndarray
    pni: int
    provenance: Provenance = "real"
    case_id: str = ""
    donor_id: str | None = None
    crop_start: tuple[int, int, int] | None = None


@dataclass
class Case:
    id: str
    volume: Volume
    labels: LabelMap
    pni: int
    seed: int
    provenance: Provenance = "real"
    donor_id: str | None = None


@dataclass
class Cohort:
    cases: list[Case]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cases]

    def by_id(self) -> dict[str, Case]:
        return {c.id: c for c in self.cases}

    def counts(self) -> tuple[int, int]:
        """(positives, negatives)"""
        pos = sum(1 for c in self.cases if c.pni == 1)
        return pos, len(self.cases) - pos


@dataclass
class FoldSplit:
    fold: int
    train_ids: list[str]
    val_ids: list[str]


@dataclass
class BalanceLadder:
    ratios: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    counts: dict[int, dict[float, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainSettings:
    """Optimisation knobs shared by every training stage."""

    steps: int
    lr: float
    batch: int = 8
    weight_decay: float = 0.01
    seed: int = 0
    dtype: str = "float64"
    log_every: int = 25


@dataclass(frozen=True)
class ClassifierSettings:
    epochs: int = 300
    patience: int = 20
    lr: float = 1e-4
    batch: int = 4
    weight_decay: float = 0.01
    seed: int = 0
    dtype: str = "float64"


@dataclass(frozen=True)
class AblationConfig:
    dab_count: int = 2
    channel_only: bool = False
    spatial_only: bool = False
    reduction_ratio: int = 4

    @property
    def label(self) -> str:
        if self.channel_only:
            return f"{self.dab_count}dab-channel-only"
        if self.spatial_only:
            return f"{self.dab_count}dab-spatial-only"
        return f"{self.dab_count}dab"


@dataclass
class TrainingHistory:
    losses: list[float] = field(default_factory=list)
    best_step: int = -1
    best_loss: float = float("inf")
    train_ids: list[str] = field(default_factory=list)


@dataclass
class ClassifierHistory:
    train_losses: list[float] = field(default_factory=list)
    val_aucs: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float("-inf")
    stopped_epoch: int = 0


@dataclass
class StageRecord:
    config_hash: str
    seconds: float
    artifacts: list[str]


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    stages: dict[str, StageRecord] = field(default_factory=dict)
