"""Evaluation metrics: overlap, fidelity, slice-feature Fréchet distance, AUC.

The Fréchet distance uses handcrafted 14-dimensional slice statistics in
place of a pretrained network, so absolute values are only comparable with
each other. Eigendecompositions use cyclic Jacobi rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import RankError, ShapeError, UndefinedMetricError

View = Literal["axial", "sagittal", "coronal"]
VIEWS: tuple[View, ...] = ("axial", "sagittal", "coronal")
# patch grids are [x, y, z]; axial slices stack along z
VIEW_AXIS = {"axial": 2, "sagittal": 0, "coronal": 1}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
HISTOGRAM_BINS = 8
FEATURE_DIM = 6 + HISTOGRAM_BINS
DEGENERATE_STD = 1e-12


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class RocCurve:
    scores: np.ndarray  # sorted descending
    labels: np.ndarray
    fpr: np.ndarray     # from 0 to 1
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


# ── overlap and fidelity ───────────────────────────────────────────────


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    if a.shape != b.shape:
        raise ShapeError(f"dice: shapes {a.shape} and {b.shape} differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    err = float(np.mean((x - y) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_formula(mx, my, vx, vy, cxy):
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
        (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    )


def ssim_slice(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM of one 2-D slice; global statistics when smaller than the window."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if min(a.shape) < SSIM_WINDOW:
        mx, my = a.mean(), b.mean()
        vx, vy = a.var(), b.var()
        cxy = ((a - mx) * (b - my)).mean()
        return float(_ssim_formula(mx, my, vx, vy, cxy))
    w = gaussian_window()
    view = np.lib.stride_tricks.sliding_window_view
    wa, wb = view(a, w.shape), view(b, w.shape)

    def weighted(p):
        return np.tensordot(p, w, axes=([2, 3], [0, 1]))

    mx, my = weighted(wa), weighted(wb)
    vx = weighted(wa * wa) - mx * mx
    vy = weighted(wb * wb) - my * my
    cxy = weighted(wa * wb) - mx * my
    return float(np.mean(_ssim_formula(mx, my, vx, vy, cxy)))


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean windowed SSIM over axial slices of two [x, y, z] patches."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    axis = VIEW_AXIS["axial"]
    values = [
        ssim_slice(np.take(x, k, axis=axis), np.take(y, k, axis=axis))
        for k in range(x.shape[axis])
    ]
    return float(np.mean(values))


# ── slice features ─────────────────────────────────────────────────────


def _slice_vector(s: np.ndarray) -> np.ndarray:
    s = s.astype(np.float64)
    m = s.mean()
    centred = s - m
    sd = math.sqrt(float(np.mean(centred**2)))
    if sd > DEGENERATE_STD:
        skew = float(np.mean(centred**3)) / sd**3
        kurt = float(np.mean(centred**4)) / sd**4 - 3.0
    else:
        sd, skew, kurt = 0.0, 0.0, 0.0
    grads = [np.gradient(s, axis=i) if s.shape[i] > 1 else np.zeros_like(s) for i in range(2)]
    gmag = np.sqrt(grads[0] ** 2 + grads[1] ** 2)
    hist, _ = np.histogram(np.clip(s, 0.0, 1.0), bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return np.concatenate([[m, sd, skew, kurt, gmag.mean(), gmag.std()], hist / s.size])


def slice_features(volume: np.ndarray, view: View) -> np.ndarray:
    """One 14-dim feature row per slice of a single-channel [x, y, z] patch."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or volume.size == 0:
        raise ShapeError(f"slice_features: expected a nonempty [x, y, z] grid, got {volume.shape}")
    axis = VIEW_AXIS[view]
    return np.stack([_slice_vector(np.take(volume, k, axis=axis)) for k in range(volume.shape[axis])])


# ── eigensolver and Fréchet distance ───────────────────────────────────


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"jacobi_eigh: expected a square matrix, got {a.shape}")
    a = (a + a.T) / 2.0
    n = a.shape[0]
    v = np.eye(n)
    limit = tol * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(a**2) - np.sum(np.diag(a) ** 2)))
        if off < limit:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                sign = 1.0 if theta >= 0 else -1.0
                t = sign / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vec_p, vec_q = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vec_p - s * vec_q, s * vec_p + c * vec_q
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return values[order], v[:, order]


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = jacobi_eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def gaussian_fit(features: np.ndarray) -> GaussianSummary:
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < d + 1:
        raise RankError(f"need at least {d + 1} samples for a {d}-dim covariance, got {n}")
    cov = np.cov(features, rowvar=False)
    return GaussianSummary(features.mean(axis=0), (cov + cov.T) / 2.0)


def frechet(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """Squared Fréchet (Wasserstein-2) distance between two Gaussians."""
    if g1.dim != g2.dim or g1.cov.shape != g2.cov.shape:
        raise ShapeError(f"frechet: dimensions {g1.dim} and {g2.dim} differ")
    root1 = _psd_sqrt(g1.cov)
    middle = root1 @ g2.cov @ root1
    values, _ = jacobi_eigh((middle + middle.T) / 2.0)
    trace_sqrt = float(np.sum(np.sqrt(np.clip(values, 0.0, None))))
    diff = g1.mean - g2.mean
    d2 = float(diff @ diff) + float(np.trace(g1.cov)) + float(np.trace(g2.cov)) - 2.0 * trace_sqrt
    return max(d2, 0.0)


def fid_by_view(real: Sequence[np.ndarray], synthetic: Sequence[np.ndarray]) -> dict[str, float]:
    """Per-view Fréchet distance over pooled slice features, plus their mean."""
    out: dict[str, float] = {}
    for view in VIEWS:
        sides = []
        for name, volumes in (("real", real), ("synthetic", synthetic)):
            if not volumes:
                raise RankError(f"fid_by_view: no {name} volumes")
            feats = np.concatenate([slice_features(v, view) for v in volumes])
            if feats.shape[0] < FEATURE_DIM + 1:
                raise RankError(
                    f"fid_by_view: {view} view has {feats.shape[0]} {name} slices, "
                    f"need at least {FEATURE_DIM + 1}"
                )
            sides.append(gaussian_fit(feats))
        out[view] = frechet(*sides)
    out["average"] = (out["axial"] + out["sagittal"] + out["coronal"]) / 3.0
    return out


# ── ranking ────────────────────────────────────────────────────────────


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be matching vectors")
    if not set(np.unique(labels).tolist()) == {0, 1}:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    return scores, labels


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied pairs) / (P * N)."""
    scores, labels = _check_binary(scores, labels)
    ranks = average_ranks(scores)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Tie-aware ROC points, one per distinct threshold, from (0, 0) to (1, 1)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=int)
    cuts = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(y)[cuts]
    fps = (cuts + 1) - tps
    tpr = np.concatenate([[0.0], tps / y.sum()])
    fpr = np.concatenate([[0.0], fps / (len(y) - y.sum())])
    thresholds = np.concatenate([[np.inf], s[cuts]])
    return RocCurve(s, y, fpr, tpr, thresholds)
