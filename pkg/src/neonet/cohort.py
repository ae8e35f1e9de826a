"""Phantom cohorts, stratified folds and the real-plus-synthetic balancing ladder.

Phantoms stand in for the clinical cohort: an ellipsoidal liver holding an
ellipsoidal tumor over a smooth background. PNI-positive phantoms carry a
thin bright rim on an arc of the tumor boundary. Every random draw happens
for both classes, so a seed fixes the geometry and noise regardless of class.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .controlnet import GenerativeBundle, derive_seed, generate_conditioned
from .errors import ConfigError, EmptySplitError, PhantomError
from .models import BalanceLadder, Case, Cohort, FoldSplit, LabelMap, PatchPair, Volume

MAX_ATTEMPTS = 100
MIN_DIMS = (8, 8, 4)
MIN_TUMOR_VOXELS = 8
MANIFEST_COLUMNS = ("case_id", "seed", "class", "provenance", "donor", "val_fold")


@dataclass(frozen=True)
class PhantomConfig:
    rim_amplitude: float = 0.3
    background: float = 0.1
    liver: float = 0.5
    tumor: float = 0.3
    texture_amplitude: float = 0.05
    noise_sigma: float = 0.01
    liver_axes: tuple[float, float] = (0.28, 0.38)  # fraction of dims
    tumor_axes: tuple[float, float] = (0.08, 0.14)
    shrink: float = 0.9


def _ellipsoid(coords: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    """Normalised radius; <= 1 inside the ellipsoid."""
    rel = (coords - center[:, None, None, None]) / axes[:, None, None, None]
    return np.sqrt(np.sum(rel**2, axis=0))


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return mask & ~interior


def _texture(rng: np.random.Generator, coords: np.ndarray, dims: np.ndarray, amplitude: float) -> np.ndarray:
    out = np.zeros(coords.shape[1:])
    for _ in range(3):
        freq = rng.uniform(0.5, 2.0, size=3) * 2.0 * math.pi / dims
        phase = rng.uniform(0.0, 2.0 * math.pi)
        out += np.sin(np.tensordot(freq, coords, axes=1) + phase)
    return amplitude * out / 3.0


def generate_phantom(
    seed: int,
    pni: int,
    dims: tuple[int, int, int] = (48, 48, 24),
    config: PhantomConfig | None = None,
    case_id: str = "phantom",
) -> Case:
    """Deterministic phantom case for ``seed``; only the rim depends on ``pni``."""
    config = config or PhantomConfig()
    if pni not in (0, 1):
        raise ConfigError(f"pni must be 0 or 1, got {pni}")
    if any(d < m for d, m in zip(dims, MIN_DIMS)):
        raise PhantomError(f"phantom dims {tuple(dims)} below minimum {MIN_DIMS}")

    rng = np.random.default_rng(seed)
    size = np.asarray(dims, dtype=np.float64)
    coords = np.indices(dims, dtype=np.float64)

    liver_center = size / 2.0 + rng.uniform(-0.1, 0.1, size=3) * size
    liver_axes = rng.uniform(*config.liver_axes, size=3) * size
    liver = _ellipsoid(coords, liver_center, liver_axes) <= 1.0

    tumor = None
    tumor_center = tumor_axes = None
    for attempt in range(MAX_ATTEMPTS):
        tumor_axes = rng.uniform(*config.tumor_axes, size=3) * size * config.shrink**attempt
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        tumor_center = liver_center + direction * rng.uniform(0.0, 0.5) * liver_axes
        candidate = _ellipsoid(coords, tumor_center, tumor_axes) <= 1.0
        if candidate.sum() >= MIN_TUMOR_VOXELS and not np.any(candidate & ~liver):
            tumor = candidate
            break
    if tumor is None:
        raise PhantomError(f"seed {seed}: tumor did not fit inside the liver after {MAX_ATTEMPTS} attempts")

    # arc of the tumor boundary that carries the PNI rim
    arc_axis = rng.standard_normal(3)
    arc_axis /= np.linalg.norm(arc_axis)
    half_angle = rng.uniform(math.pi / 4, math.pi / 2)
    texture = _texture(rng, coords, size, config.texture_amplitude)
    noise = rng.normal(0.0, config.noise_sigma, size=dims)

    grid = np.full(dims, config.background) + texture + noise
    grid[liver] += config.liver - config.background
    grid[tumor] += config.tumor - config.liver
    if pni == 1:
        grid[rim_mask(tumor, tumor_center, arc_axis, half_angle)] += config.rim_amplitude

    labels = np.zeros(dims, dtype=np.uint8)
    labels[liver] = 1
    labels[tumor] = 2
    return Case(
        id=case_id,
        volume=Volume(grid),
        labels=LabelMap(labels),
        pni=pni,
        seed=seed,
    )


def rim_mask(tumor: np.ndarray, center: np.ndarray, axis: np.ndarray, half_angle: float) -> np.ndarray:
    """Boundary voxels of ``tumor`` within ``half_angle`` of ``axis`` seen from ``center``."""
    shell = _boundary(tumor)
    rel = np.indices(tumor.shape, dtype=np.float64) - center[:, None, None, None]
    norm = np.sqrt(np.sum(rel**2, axis=0))
    cosine = np.tensordot(axis, rel, axes=1) / np.where(norm > 0, norm, 1.0)
    arc = shell & (cosine >= math.cos(half_angle))
    return arc if arc.any() else shell


def build_cohort(
    seed: int,
    n_pos: int = 44,
    n_neg: int = 84,
    dims: tuple[int, int, int] = (48, 48, 24),
    config: PhantomConfig | None = None,
    workers: int = 1,
) -> Cohort:
    """Positives first, then negatives; ids ``case-000`` onwards."""
    if n_pos < 1 or n_neg < 1:
        raise ConfigError(f"cohort needs at least one case per class, got {n_pos}/{n_neg}")
    classes = [1] * n_pos + [0] * n_neg
    ids = [f"case-{i:03d}" for i in range(len(classes))]

    def make(i: int) -> Case:
        return generate_phantom(derive_seed(seed, ids[i]), classes[i], dims, config, ids[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(make, range(len(ids))))
    else:
        cases = [make(i) for i in range(len(ids))]
    return Cohort(cases)


def tumor_fraction(case: Case) -> float:
    """Tumor voxels over liver-plus-tumor voxels."""
    labels = case.labels.grid
    organ = int(np.count_nonzero(labels > 0))
    return int(np.count_nonzero(labels == 2)) / organ if organ else 0.0


def exclude_large_tumors(cohort: Cohort, threshold: float = 0.7) -> Cohort:
    return Cohort([c for c in cohort.cases if tumor_fraction(c) <= threshold])


def stratified_kfold(cohort: Cohort, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Shuffled class-stratified partition; folds are numbered from 1."""
    labels = np.array([c.pni for c in cohort.cases])
    n_pos = int(labels.sum())
    smallest = min(n_pos, len(labels) - n_pos)
    if smallest < k:
        raise EmptySplitError(f"stratified {k}-fold needs {k} cases per class, smallest class has {smallest}")
    ids = cohort.ids
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed % 2**32)
    folds = []
    for fold, (train_idx, val_idx) in enumerate(splitter.split(np.zeros(len(ids)), labels), start=1):
        folds.append(
            FoldSplit(fold, [ids[i] for i in sorted(train_idx)], [ids[i] for i in sorted(val_idx)])
        )
    return folds


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def synthetic_deficit(labels: Sequence[int], ratio: float) -> int:
    """Synthetic positives needed to fill ``ratio`` of the class deficit."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"ratio must be in [0, 1], got {ratio}")
    n_pos = sum(1 for v in labels if v == 1)
    n_neg = len(labels) - n_pos
    if n_neg < n_pos:
        raise ConfigError(f"positives ({n_pos}) outnumber negatives ({n_neg})")
    return round_half_up(ratio * (n_neg - n_pos))


def ladder_counts(
    labels: Sequence[int], ratios: Sequence[float] = BalanceLadder().ratios
) -> dict[float, int]:
    return {r: synthetic_deficit(labels, r) for r in ratios}


def balance_fold(
    split: FoldSplit,
    patches: dict[str, PatchPair],
    ratio: float,
    bundle: GenerativeBundle,
    seed: int,
    generate: Callable[[PatchPair, GenerativeBundle, np.random.Generator, str], PatchPair] = generate_conditioned,
) -> tuple[list[PatchPair], list[PatchPair]]:
    """Training set topped up with synthetic positives; validation stays real.

    Donors are the fold's training positives taken round-robin, so per-donor
    replica counts differ by at most one.
    """
    if bundle.train_ids and set(bundle.train_ids) - set(split.train_ids):
        raise ConfigError(f"generative bundle for fold {split.fold} was trained on ids outside the fold")
    train = [patches[i] for i in split.train_ids]
    val = [patches[i] for i in split.val_ids]
    if any(p.provenance != "real" for p in val):
        raise ConfigError(f"fold {split.fold}: validation set contains synthetic cases")

    count = synthetic_deficit([p.pni for p in train], ratio)
    donors = [p for p in train if p.pni == 1]
    if count and not donors:
        raise EmptySplitError(f"fold {split.fold}: no positive donors in the training split")
    synthetic = []
    for i in range(count):
        donor = donors[i % len(donors)]
        replica = i // len(donors)
        rng = np.random.default_rng(derive_seed(seed, donor.case_id, replica))
        synthetic.append(generate(donor, bundle, rng, f"{donor.case_id}-syn{replica:03d}"))
    return train + synthetic, val


def write_cohort_manifest(cohort: Cohort, folds: Sequence[FoldSplit], path: Path) -> None:
    val_fold = {case_id: split.fold for split in folds for case_id in split.val_ids}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for case in cohort.cases:
            writer.writerow(
                [case.id, case.seed, case.pni, case.provenance, case.donor_id or "", val_fold.get(case.id, "")]
            )


def read_cohort_manifest(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))
