"""Tumor-localized ROI crop and dual-channel patch construction.

The crop is centred on the floor-midpoint of the tumor bounding box. Windows
are clamped at zero and shifted down when they would overflow the upper
edge; volumes smaller than the crop are zero-padded at the high end, so the
output is always exactly the crop size.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .models import CropSpec, LabelMap, PatchPair, Volume
from .nifti import read_volume, write_volume

Box = tuple[tuple[int, int, int], tuple[int, int, int]]

CHANNEL_SUFFIXES = ("t1", "t2")


def tumor_extent(labels: LabelMap) -> Box | None:
    """Bounding box of label 2 as (min, max-exclusive) per axis, or None."""
    coords = np.nonzero(np.asarray(labels.grid) == 2)
    if coords[0].size == 0:
        return None
    lo = tuple(int(c.min()) for c in coords)
    hi = tuple(int(c.max()) + 1 for c in coords)
    return lo, hi  # type: ignore[return-value]


def box_center(box: Box) -> tuple[int, int, int]:
    lo, hi = box
    return tuple((a + b) // 2 for a, b in zip(lo, hi))  # type: ignore[return-value]


def crop_window(
    center: tuple[int, int, int], crop: CropSpec, dims: tuple[int, int, int]
) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    starts, ends = [], []
    for c, size, extent in zip(center, crop.size, dims):
        if extent < 1:
            raise ShapeError(f"crop_window: volume extent {extent} must be >= 1")
        start = max(c - size // 2, 0)
        start = min(start, max(extent - size, 0))
        starts.append(start)
        ends.append(start + size)
    return tuple(starts), tuple(ends)  # type: ignore[return-value]


def _extract(grid: np.ndarray, start, crop: CropSpec, dtype) -> np.ndarray:
    out = np.zeros(crop.size, dtype=dtype)
    region = tuple(
        slice(s, min(s + size, extent)) for s, size, extent in zip(start, crop.size, grid.shape)
    )
    block = grid[region]
    out[tuple(slice(0, n) for n in block.shape)] = block
    return out


def tlcr_crop(
    image: Volume,
    labels: LabelMap,
    crop: CropSpec,
    pni: int = 0,
    case_id: str = "",
) -> PatchPair:
    if image.shape != labels.shape:
        for axis, a, b in zip(("x", "y", "z"), image.shape, labels.shape):
            if a != b:
                raise ShapeError(f"tlcr_crop: {axis} axis differs (image {a}, labels {b})")
        raise ShapeError(f"tlcr_crop: image {image.shape} and labels {labels.shape} differ")

    box = tumor_extent(labels)
    if box is None:
        zeros = np.zeros((2, *crop.size))
        return PatchPair(zeros, zeros.copy(), pni, "real", case_id)

    start, _ = crop_window(box_center(box), crop, image.shape)
    i_crop = _extract(np.asarray(image.grid, dtype=np.float64), start, crop, np.float64)
    l_crop = _extract(np.asarray(labels.grid), start, crop, np.uint8)

    peritumoral = (l_crop == 1) | (l_crop == 2)
    tumor = l_crop == 2
    patch_labels = np.stack([peritumoral, tumor]).astype(np.float64)
    patch_image = np.stack([np.where(peritumoral, i_crop, 0.0), np.where(tumor, i_crop, 0.0)])
    return PatchPair(patch_image, patch_labels, pni, "real", case_id, crop_start=start)


# ── on-disk format ─────────────────────────────────────────────────────


def patch_paths(directory: Path, case_id: str) -> list[Path]:
    paths = [directory / f"{case_id}_image_{s}.nii.gz" for s in CHANNEL_SUFFIXES]
    paths += [directory / f"{case_id}_labels_{s}.nii.gz" for s in CHANNEL_SUFFIXES]
    return paths + [directory / f"{case_id}.json"]


def export_patch(
    patch: PatchPair,
    directory: str | Path,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> list[Path]:
    """Write the four channel files plus the JSON sidecar; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = patch_paths(directory, patch.case_id)
    for ch in range(2):
        write_volume(Volume(patch.image[ch].astype(np.float32), spacing), paths[ch])
        write_volume(LabelMap(patch.labels[ch].astype(np.uint8), spacing), paths[2 + ch])
    sidecar = {
        "case_id": patch.case_id,
        "pni": int(patch.pni),
        "crop_start": list(patch.crop_start) if patch.crop_start is not None else None,
        "provenance": patch.provenance,
        "donor_id": patch.donor_id,
    }
    paths[4].write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return paths


def load_patch(directory: str | Path, case_id: str) -> PatchPair:
    paths = patch_paths(Path(directory), case_id)
    meta = json.loads(paths[4].read_text())
    image = np.stack([read_volume(p, kind="volume").grid for p in paths[:2]]).astype(np.float64)
    labels = np.stack([read_volume(p, kind="labels").grid for p in paths[2:4]]).astype(np.float64)
    start = meta.get("crop_start")
    return PatchPair(
        image=image,
        labels=labels,
        pni=int(meta["pni"]),
        provenance=meta["provenance"],
        case_id=meta["case_id"],
        donor_id=meta.get("donor_id"),
        crop_start=tuple(start) if start is not None else None,
    )
