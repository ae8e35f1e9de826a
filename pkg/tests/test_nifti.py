from __future__ import annotations

import gzip

import numpy as np
import pytest

from neonet import nifti
from neonet.errors import NeonetError, NiftiFormatError, TruncatedFileError, UnmappedLabelError, UnsupportedFeatureError
from neonet.models import LabelMap, Volume


def raw_nifti(grid, code, bitpix, slope=0.0, inter=0.0, order="<", magic=b"n+1", dtype=None):
    """Hand-built single-file NIfTI-1 bytes."""
    hdr = np.zeros((), dtype=nifti.header_dtype.newbyteorder(order))
    hdr["sizeof_hdr"] = 348
    hdr["dim"] = [3, *grid.shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = bitpix
    hdr["pixdim"] = [1.0, 0.8, 0.8, 2.5, 0, 0, 0, 0]
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["magic"] = magic
    data = np.asarray(grid, dtype=np.dtype(dtype or grid.dtype).newbyteorder(order))
    return hdr.tobytes() + b"\x00" * 4 + data.tobytes(order="F")


class TestRead:
    def test_float32_verbatim(self, tmp_path, rng):
        grid = rng.standard_normal((2, 2, 2)).astype(np.float32)
        path = tmp_path / "a.nii"
        path.write_bytes(raw_nifti(grid, 16, 32))
        volume = nifti.read_volume(path)
        assert isinstance(volume, Volume)
        np.testing.assert_array_equal(volume.grid, grid)
        assert volume.spacing == pytest.approx((0.8, 0.8, 2.5))

    def test_int16_with_slope_and_intercept(self, tmp_path):
        grid = np.full((2, 3, 2), 3, dtype=np.int16)
        path = tmp_path / "b.nii"
        path.write_bytes(raw_nifti(grid, 4, 16, slope=2.0, inter=1.0))
        assert np.all(nifti.read_volume(path).grid == 7.0)

    def test_big_endian(self, tmp_path):
        grid = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
        path = tmp_path / "be.nii"
        path.write_bytes(raw_nifti(grid, 4, 16, order=">"))
        np.testing.assert_array_equal(nifti.read_volume(path).grid, grid)

    def test_gzip_container(self, tmp_path):
        grid = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        path = tmp_path / "c.nii.gz"
        path.write_bytes(gzip.compress(raw_nifti(grid, 16, 32)))
        np.testing.assert_array_equal(nifti.read_volume(path).grid, grid)

    def test_header_image_pair(self, tmp_path):
        grid = np.arange(8, dtype=np.uint8).reshape(2, 2, 2) % 3
        single = raw_nifti(grid, 2, 8, magic=b"ni1")
        (tmp_path / "pair.hdr").write_bytes(single[:348])
        (tmp_path / "pair.img").write_bytes(single[352:])
        labels = nifti.read_volume(tmp_path / "pair.hdr")
        assert isinstance(labels, LabelMap)
        np.testing.assert_array_equal(labels.grid, grid)

    def test_missing_image_of_pair(self, tmp_path):
        grid = np.zeros((2, 2, 2), dtype=np.uint8)
        (tmp_path / "lonely.hdr").write_bytes(raw_nifti(grid, 2, 8, magic=b"ni1")[:348])
        with pytest.raises(NiftiFormatError, match="lonely.img"):
            nifti.read_volume(tmp_path / "lonely.hdr")

    def test_truncated_header_reports_offset(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(raw_nifti(np.zeros((4, 4, 4), dtype=np.float32), 16, 32)[:200])
        with pytest.raises(TruncatedFileError) as info:
            nifti.read_volume(path)
        assert info.value.offset == 200
        assert "200" in str(info.value)

    def test_truncated_voxel_data(self, tmp_path):
        path = tmp_path / "t.nii"
        path.write_bytes(raw_nifti(np.zeros((4, 4, 4), dtype=np.float32), 16, 32)[:400])
        with pytest.raises(TruncatedFileError) as info:
            nifti.read_volume(path)
        assert info.value.offset == 400

    def test_unsupported_datatype(self, tmp_path):
        path = tmp_path / "f8.nii"
        path.write_bytes(raw_nifti(np.zeros((2, 2, 2)), 64, 64))
        with pytest.raises(UnsupportedFeatureError, match="64"):
            nifti.read_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.nii"
        path.write_bytes(raw_nifti(np.zeros((2, 2, 2), dtype=np.float32), 16, 32, magic=b"xyz"))
        with pytest.raises(NiftiFormatError, match="magic"):
            nifti.read_volume(path)

    def test_labels_outside_range(self, tmp_path):
        path = tmp_path / "l.nii"
        path.write_bytes(raw_nifti(np.full((2, 2, 2), 5, dtype=np.uint8), 2, 8))
        with pytest.raises(NiftiFormatError):
            nifti.read_labels(path)


class TestWrite:
    def test_volume_round_trip_is_bit_identical(self, tmp_path, rng):
        grid = rng.standard_normal((4, 4, 4)).astype(np.float32)
        volume = Volume(grid, (0.7, 0.7, 3.0), (1.0, -2.0, 5.0))
        nifti.write_volume(volume, tmp_path / "v.nii.gz")
        back = nifti.read_volume(tmp_path / "v.nii.gz")
        np.testing.assert_array_equal(back.grid, grid)
        assert back.spacing == pytest.approx(volume.spacing)
        assert back.origin == pytest.approx(volume.origin)

    def test_label_round_trip(self, tmp_path, rng):
        labels = LabelMap(rng.integers(0, 3, size=(3, 4, 5)).astype(np.uint8))
        nifti.write_volume(labels, tmp_path / "l.nii")
        back = nifti.read_labels(tmp_path / "l.nii")
        assert back.grid.dtype == np.uint8
        np.testing.assert_array_equal(back.grid, labels.grid)

    def test_orientation_fields_survive(self, tmp_path):
        grid = np.zeros((2, 2, 2), dtype=np.float32)
        path = tmp_path / "o.nii"
        path.write_bytes(raw_nifti(grid, 16, 32))
        first = nifti.read_volume(path)
        first.orientation["qform_code"] = 1
        first.orientation["srow_x"] = [0.8, 0.0, 0.0, -10.0]
        nifti.write_volume(first, tmp_path / "o2.nii")
        second = nifti.read_volume(tmp_path / "o2.nii")
        assert second.orientation["qform_code"] == 1
        assert second.orientation["srow_x"] == pytest.approx([0.8, 0.0, 0.0, -10.0])

    def test_non_finite_refused(self, tmp_path):
        with pytest.raises(NiftiFormatError):
            nifti.write_volume(Volume(np.full((2, 2, 2), np.nan)), tmp_path / "n.nii")


class TestPreprocessing:
    def test_normalize_three_values(self):
        out = nifti.normalize_intensity(Volume(np.array([10.0, 20.0, 30.0]).reshape(1, 1, 3)))
        assert out.grid.reshape(-1).tolist() == [0.0, 0.5, 1.0]

    def test_normalize_constant(self):
        assert np.all(nifti.normalize_intensity(Volume(np.full((2, 2, 2), 7.0))).grid == 0.0)

    def test_normalize_extrema(self, rng):
        out = nifti.normalize_intensity(Volume(rng.normal(100.0, 30.0, size=(5, 5, 5)))).grid
        assert out.min() == 0.0
        assert out.max() == 1.0

    def test_identity_mapping(self, rng):
        raw = rng.integers(0, 3, size=(3, 3, 3))
        np.testing.assert_array_equal(nifti.map_labels(raw, {0: 0, 1: 1, 2: 2}).grid, raw)

    def test_mapping_of_raw_codes(self):
        raw = np.array([5, 6, 6, 5]).reshape(1, 2, 2)
        out = nifti.map_labels(raw, {0: 0, 5: 1, 6: 2}).grid
        assert out.reshape(-1).tolist() == [1, 2, 2, 1]

    def test_unmapped_value(self):
        with pytest.raises(UnmappedLabelError, match="9") as info:
            nifti.map_labels(np.array([0, 9]).reshape(1, 1, 2), {0: 0, 1: 1})
        assert info.value.value == 9


class TestMalformedInput:
    """Damaged files either decode or raise a library error, never a raw exception."""

    CASES = 10_000

    @staticmethod
    def damaged(rng, valid):
        mode = rng.integers(5)
        if mode == 0:
            return rng.integers(0, 256, size=int(rng.integers(0, 600)), dtype=np.uint8).tobytes()
        if mode == 1:
            data = bytearray(valid)
            for pos in rng.integers(0, nifti.HEADER_SIZE, size=int(rng.integers(1, 9))):
                data[pos] = int(rng.integers(256))
            return bytes(data)
        if mode == 2:
            return valid[: int(rng.integers(0, len(valid)))]
        if mode == 3:
            packed = bytearray(gzip.compress(valid, mtime=0))
            packed[int(rng.integers(2, len(packed)))] ^= int(rng.integers(1, 256))
            return bytes(packed)
        return nifti.GZIP_MAGIC + rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()

    def test_fuzzed_bytes(self, tmp_path):
        rng = np.random.default_rng(2024)
        valid = raw_nifti(rng.standard_normal((4, 4, 4)).astype(np.float32), 16, 32)
        path = tmp_path / "fuzz.nii"
        outcomes = {"decoded": 0, "rejected": 0}
        for _ in range(self.CASES):
            path.write_bytes(self.damaged(rng, valid))
            try:
                result = nifti.read_volume(path)
            except NeonetError:
                outcomes["rejected"] += 1
            else:
                assert isinstance(result, (Volume, LabelMap))
                outcomes["decoded"] += 1
        assert outcomes["rejected"] > self.CASES // 2

    @pytest.mark.parametrize("cut", [0, 1, 100, 347, 348, 351, 352, 353, 400, 607])
    def test_every_truncation_is_reported(self, tmp_path, cut):
        valid = raw_nifti(np.zeros((4, 4, 4), dtype=np.float32), 16, 32)
        path = tmp_path / "cut.nii"
        path.write_bytes(valid[:cut])
        with pytest.raises(TruncatedFileError):
            nifti.read_volume(path)
