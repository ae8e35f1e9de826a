"""NIfTI-1 subset reader/writer and intensity/label preprocessing.

Supported: single-file ``n+1`` (.nii, .nii.gz) and header/image pairs
(``ni1`` .hdr + .img), 3-D only, datatypes uint8, int16 and float32, either
byte order. Only pixdim spacing is interpreted; qform/sform fields are kept
verbatim in ``Volume.orientation`` and written back unchanged.
"""

from __future__ import annotations

import gzip
import zlib
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from .errors import (
    NiftiFormatError,
    TruncatedFileError,
    UnmappedLabelError,
    UnsupportedFeatureError,
)
from .models import LabelMap, Volume

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

# first number in comments is the byte offset in the header
header_dtd = [
    ("sizeof_hdr", "i4"),      # 0; must be 348
    ("data_type", "S10"),      # 4; unused
    ("db_name", "S18"),        # 14; unused
    ("extents", "i4"),         # 32; unused
    ("session_error", "i2"),   # 36; unused
    ("regular", "S1"),         # 38; unused
    ("dim_info", "u1"),        # 39
    ("dim", "i2", (8,)),       # 40; data array dimensions
    ("intent_p1", "f4"),       # 56
    ("intent_p2", "f4"),       # 60
    ("intent_p3", "f4"),       # 64
    ("intent_code", "i2"),     # 68
    ("datatype", "i2"),        # 70
    ("bitpix", "i2"),          # 72
    ("slice_start", "i2"),     # 74
    ("pixdim", "f4", (8,)),    # 76; grid spacings
    ("vox_offset", "f4"),      # 108; offset to voxel data
    ("scl_slope", "f4"),       # 112
    ("scl_inter", "f4"),       # 116
    ("slice_end", "i2"),       # 120
    ("slice_code", "u1"),      # 122
    ("xyzt_units", "u1"),      # 123
    ("cal_max", "f4"),         # 124
    ("cal_min", "f4"),         # 128
    ("slice_duration", "f4"),  # 132
    ("toffset", "f4"),         # 136
    ("glmax", "i4"),           # 140
    ("glmin", "i4"),           # 144
    ("descrip", "S80"),        # 148
    ("aux_file", "S24"),       # 228
    ("qform_code", "i2"),      # 252
    ("sform_code", "i2"),      # 254
    ("quatern_b", "f4"),       # 256
    ("quatern_c", "f4"),       # 260
    ("quatern_d", "f4"),       # 264
    ("qoffset_x", "f4"),       # 268
    ("qoffset_y", "f4"),       # 272
    ("qoffset_z", "f4"),       # 276
    ("srow_x", "f4", (4,)),    # 280
    ("srow_y", "f4", (4,)),    # 296
    ("srow_z", "f4", (4,)),    # 312
    ("intent_name", "S16"),    # 328
    ("magic", "S4"),           # 344; 'ni1\0' or 'n+1\0'
]
header_dtype = np.dtype(header_dtd)

# NIfTI datatype code -> (numpy kind, bitpix)
DATATYPES: dict[int, tuple[str, int]] = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
}
_CODE_FOR_KIND = {kind: code for code, (kind, _) in DATATYPES.items()}

ORIENTATION_FIELDS = (
    "qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
    "qoffset_x", "qoffset_y", "qoffset_z", "srow_x", "srow_y", "srow_z",
)

GZIP_MAGIC = b"\x1f\x8b"


def _load_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise NiftiFormatError(f"{path}: corrupt gzip container: {exc}") from exc
    return raw


def _parse_header(data: bytes, source: str) -> np.ndarray:
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(len(data), HEADER_SIZE)
    block = data[:HEADER_SIZE]
    for order in ("<", ">"):
        hdr = np.frombuffer(block, dtype=header_dtype.newbyteorder(order), count=1)[0]
        if 1 <= int(hdr["dim"][0]) <= 7:
            break
    else:
        raise NiftiFormatError(f"{source}: dim[0] is not in 1..7 in either byte order")
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        raise NiftiFormatError(f"{source}: sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected 348")
    magic = bytes(hdr["magic"])
    if magic not in (b"n+1", b"ni1"):
        raise NiftiFormatError(f"{source}: bad magic {magic!r}")
    return hdr


def read_header(path: str | Path) -> np.ndarray:
    path = Path(path)
    return _parse_header(_load_bytes(path), str(path))


def read_volume(
    path: str | Path, kind: Literal["auto", "volume", "labels"] = "auto"
) -> Volume | LabelMap:
    """Decode a NIfTI-1 file; uint8 files come back as LabelMap under ``auto``."""
    path = Path(path)
    data = _load_bytes(path)
    hdr = _parse_header(data, str(path))

    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise UnsupportedFeatureError(f"{path}: only 3-D volumes are supported (dim[0]={ndim})")
    shape = tuple(int(e) for e in hdr["dim"][1:4])
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: non-positive extent in dim {shape}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedFeatureError(f"{path}: datatype code {code} is not supported")
    np_kind, bitpix = DATATYPES[code]
    if int(hdr["bitpix"]) != bitpix:
        raise NiftiFormatError(f"{path}: bitpix {int(hdr['bitpix'])} does not match datatype {code}")

    spacing = tuple(float(s) for s in hdr["pixdim"][1:4])
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise NiftiFormatError(f"{path}: spacing {spacing} must be positive")

    if bytes(hdr["magic"]) == b"ni1":
        image_path = path.with_suffix(".img")
        if not image_path.exists():
            raise NiftiFormatError(f"{path}: paired image file {image_path.name} not found")
        payload = _load_bytes(image_path)
        start = 0
    else:
        payload = data
        offset = float(hdr["vox_offset"])
        if not np.isfinite(offset) or offset < HEADER_SIZE or offset != int(offset):
            raise NiftiFormatError(f"{path}: invalid vox_offset {offset}")
        start = int(offset)

    dtype = np.dtype(np_kind).newbyteorder(hdr.dtype["sizeof_hdr"].byteorder)
    count = shape[0] * shape[1] * shape[2]
    needed = start + count * dtype.itemsize
    if len(payload) < needed:
        raise TruncatedFileError(len(payload), needed)
    flat = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
    grid = flat.reshape(shape, order="F").astype(dtype.newbyteorder("="))

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        grid = slope * grid.astype(np.float64) + (inter if np.isfinite(inter) else 0.0)
    if grid.dtype.kind == "f" and not np.all(np.isfinite(grid)):
        raise NiftiFormatError(f"{path}: non-finite intensities")

    orientation = {name: np.asarray(hdr[name]).tolist() for name in ORIENTATION_FIELDS}
    orientation["qfac"] = float(hdr["pixdim"][0])
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))

    as_labels = kind == "labels" or (kind == "auto" and grid.dtype == np.uint8)
    if as_labels:
        return LabelMap(grid, spacing, origin, orientation)  # type: ignore[arg-type]
    return Volume(grid, spacing, origin, orientation)  # type: ignore[arg-type]


def read_labels(path: str | Path) -> LabelMap:
    labels = read_volume(path, kind="labels")
    values = set(np.unique(labels.grid).tolist())
    if not values <= {0, 1, 2}:
        raise NiftiFormatError(f"{path}: label values {sorted(values)} outside {{0, 1, 2}}")
    return labels  # type: ignore[return-value]


def write_volume(v: Volume | LabelMap, path: str | Path) -> None:
    """Write ``v`` as single-file NIfTI-1; a ``.gz`` suffix selects gzip."""
    path = Path(path)
    grid = np.asarray(v.grid)
    if grid.ndim != 3:
        raise NiftiFormatError(f"{path}: expected a 3-D grid, got shape {grid.shape}")
    if isinstance(v, LabelMap):
        grid = grid.astype(np.uint8)
    elif grid.dtype.kind == "f":
        if not np.all(np.isfinite(grid)):
            raise NiftiFormatError(f"{path}: refusing to write non-finite intensities")
        grid = grid.astype(np.float32)
    kind = grid.dtype.str[1:]
    if kind not in _CODE_FOR_KIND:
        raise UnsupportedFeatureError(f"{path}: cannot store dtype {grid.dtype}")
    code = _CODE_FOR_KIND[kind]

    hdr = np.zeros((), dtype=header_dtype.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *grid.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = DATATYPES[code][1]
    hdr["pixdim"] = [1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = SINGLE_FILE_OFFSET
    hdr["scl_slope"] = 0.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["magic"] = b"n+1"
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = v.origin
    if v.orientation:
        for name in ORIENTATION_FIELDS:
            if name in v.orientation:
                hdr[name] = v.orientation[name]
        hdr["pixdim"][0] = v.orientation.get("qfac", 1.0)

    body = (
        hdr.tobytes()
        + b"\x00" * (SINGLE_FILE_OFFSET - HEADER_SIZE)
        + grid.astype(grid.dtype.newbyteorder("<")).tobytes(order="F")
    )
    if path.suffix == ".gz":
        body = gzip.compress(body, mtime=0)
    path.write_bytes(body)


def normalize_intensity(v: Volume) -> Volume:
    """Min-max scale to [0, 1]; a constant volume maps to zeros."""
    grid = np.asarray(v.grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("cannot normalize an empty volume")
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        scaled = np.zeros_like(grid)
    else:
        scaled = (grid - lo) / (hi - lo)
    return Volume(scaled, v.spacing, v.origin, v.orientation)


def map_labels(
    raw: np.ndarray,
    mapping: Mapping[int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> LabelMap:
    """Map raw segmentation codes onto {0 background, 1 liver, 2 tumor}."""
    raw = np.asarray(raw)
    bad_targets = {t for t in mapping.values() if t not in (0, 1, 2)}
    if bad_targets:
        raise ValueError(f"mapping targets {sorted(bad_targets)} outside {{0, 1, 2}}")
    present = np.unique(raw).tolist()
    for value in present:
        if value not in mapping:
            raise UnmappedLabelError(int(value))
    out = np.zeros(raw.shape, dtype=np.uint8)
    for source, target in mapping.items():
        out[raw == source] = target
    return LabelMap(out, spacing, origin)
