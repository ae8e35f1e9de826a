from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from neonet import metrics
from neonet.errors import RankError, ShapeError, UndefinedMetricError


class TestDice:
    def test_identical(self):
        a = np.zeros((4, 4, 4))
        a[1:3, 1:3, 1:3] = 1
        assert metrics.dice(a, a) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4)), np.zeros((4, 4))
        a[0, :2] = 1
        b[3, :2] = 1
        assert metrics.dice(a, b) == 0.0

    def test_half_overlap(self):
        a, b = np.zeros(8), np.zeros(8)
        a[:4] = 1
        b[2:6] = 1
        assert metrics.dice(a, b) == 0.5

    def test_both_empty(self):
        assert metrics.dice(np.zeros(3), np.zeros(3)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.dice(np.zeros(3), np.zeros(4))


class TestPsnr:
    def test_identical_is_infinite(self, rng):
        x = rng.uniform(size=(3, 3, 3))
        assert metrics.psnr(x, x) == math.inf

    def test_constant_error(self):
        assert metrics.psnr(np.zeros(10), np.full(10, 0.1)) == pytest.approx(20.0)

    def test_unit_mse(self):
        assert metrics.psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)


def ssim_window_oracle(a, b):
    w = metrics.gaussian_window()
    k = w.shape[0]
    values = []
    for i, j in itertools.product(range(a.shape[0] - k + 1), range(a.shape[1] - k + 1)):
        pa, pb = a[i : i + k, j : j + k], b[i : i + k, j : j + k]
        mx, my = np.sum(w * pa), np.sum(w * pb)
        vx = np.sum(w * (pa - mx) ** 2)
        vy = np.sum(w * (pb - my) ** 2)
        cxy = np.sum(w * (pa - mx) * (pb - my))
        c1, c2 = metrics.SSIM_C1, metrics.SSIM_C2
        values.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


class TestSsim:
    def test_identical_is_one(self, rng):
        x = rng.uniform(size=(12, 12, 3))
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_is_below_one(self, rng):
        x = rng.uniform(size=(12, 12, 2))
        assert metrics.ssim(x, 1.0 - x) < 1.0

    def test_matches_window_oracle(self, rng):
        a = rng.uniform(size=(12, 12))
        b = np.clip(a + 0.1 * rng.standard_normal((12, 12)), 0.0, 1.0)
        assert metrics.ssim_slice(a, b) == pytest.approx(ssim_window_oracle(a, b), abs=1e-10)

    def test_small_slices_use_global_statistics(self, rng):
        a = rng.uniform(size=(6, 6))
        b = rng.uniform(size=(6, 6))
        mx, my = a.mean(), b.mean()
        cxy = np.mean((a - mx) * (b - my))
        c1, c2 = metrics.SSIM_C1, metrics.SSIM_C2
        expected = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (a.var() + b.var() + c2))
        assert metrics.ssim_slice(a, b) == pytest.approx(expected, abs=1e-12)

    def test_window_is_normalised(self):
        assert metrics.gaussian_window().sum() == pytest.approx(1.0)
        assert metrics.gaussian_window().shape == (11, 11)


class TestSliceFeatures:
    def test_constant_slice_guard(self):
        features = metrics.slice_features(np.full((4, 4, 2), 0.3), "axial")
        assert features.shape == (2, metrics.FEATURE_DIM)
        row = features[0]
        assert row[0] == pytest.approx(0.3)
        assert row[1:6].tolist() == [0.0] * 5
        assert row[6:].sum() == pytest.approx(1.0)
        assert np.count_nonzero(row[6:]) == 1

    @pytest.mark.parametrize("view,count", [("axial", 5), ("sagittal", 3), ("coronal", 4)])
    def test_one_row_per_slice(self, rng, view, count):
        assert metrics.slice_features(rng.uniform(size=(3, 4, 5)), view).shape == (count, 14)

    def test_deterministic(self, rng):
        v = rng.uniform(size=(4, 4, 4))
        np.testing.assert_array_equal(metrics.slice_features(v, "coronal"), metrics.slice_features(v, "coronal"))

    def test_moments_match_closed_form(self, rng):
        s = rng.uniform(size=(5, 6))
        row = metrics.slice_features(s[:, :, None], "axial")[0]
        c = s - s.mean()
        sd = np.sqrt(np.mean(c**2))
        assert row[1] == pytest.approx(sd)
        assert row[2] == pytest.approx(np.mean(c**3) / sd**3)
        assert row[3] == pytest.approx(np.mean(c**4) / sd**4 - 3.0)


class TestLinearAlgebra:
    def test_jacobi_matches_numpy(self, rng):
        a = rng.standard_normal((6, 6))
        sym = a + a.T
        values, vectors = metrics.jacobi_eigh(sym)
        np.testing.assert_allclose(values, np.linalg.eigvalsh(sym), atol=1e-9)
        np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, sym, atol=1e-9)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(6), atol=1e-12)

    def test_jacobi_reconstructs_random_spd(self):
        rng = np.random.default_rng(50)
        for trial in range(50):
            d = int(rng.integers(1, 15))
            b = rng.standard_normal((d, d))
            spd = b @ b.T / d + 0.1 * np.eye(d)
            values, vectors = metrics.jacobi_eigh(spd)
            assert np.all(np.diff(values) >= 0)
            assert values[0] > 0
            np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, spd, atol=1e-10, err_msg=f"trial {trial}")
            np.testing.assert_allclose(values, np.linalg.eigvalsh(spd), atol=1e-10, err_msg=f"trial {trial}")

    def test_jacobi_rejects_non_square(self):
        with pytest.raises(ShapeError):
            metrics.jacobi_eigh(np.zeros((2, 3)))

    def test_frechet_identical_is_zero(self, rng):
        g = metrics.gaussian_fit(rng.standard_normal((40, 3)))
        assert metrics.frechet(g, g) == pytest.approx(0.0, abs=1e-9)

    def test_frechet_one_dimensional(self):
        g1 = metrics.GaussianSummary(np.array([0.0]), np.array([[1.0]]))
        g2 = metrics.GaussianSummary(np.array([1.0]), np.array([[4.0]]))
        assert metrics.frechet(g1, g2) == pytest.approx(2.0)

    def test_frechet_diagonal(self):
        l1, l2 = np.array([1.0, 4.0, 0.25]), np.array([9.0, 1.0, 0.25])
        m1, m2 = np.array([0.0, 1.0, 2.0]), np.array([1.0, 1.0, 0.0])
        expected = np.sum((m1 - m2) ** 2) + np.sum((np.sqrt(l1) - np.sqrt(l2)) ** 2)
        d = metrics.frechet(
            metrics.GaussianSummary(m1, np.diag(l1)), metrics.GaussianSummary(m2, np.diag(l2))
        )
        assert d == pytest.approx(expected)

    def test_frechet_symmetric_for_full_covariances(self, rng):
        g1 = metrics.gaussian_fit(rng.standard_normal((30, 4)))
        g2 = metrics.gaussian_fit(rng.standard_normal((30, 4)) * 2.0 + 1.0)
        assert metrics.frechet(g1, g2) == pytest.approx(metrics.frechet(g2, g1), rel=1e-8)

    def test_frechet_dimension_mismatch(self):
        g1 = metrics.GaussianSummary(np.zeros(1), np.eye(1))
        g2 = metrics.GaussianSummary(np.zeros(2), np.eye(2))
        with pytest.raises(ShapeError):
            metrics.frechet(g1, g2)

    def test_gaussian_fit_needs_enough_samples(self, rng):
        with pytest.raises(RankError):
            metrics.gaussian_fit(rng.standard_normal((3, 3)))


class TestFid:
    def test_identical_sets(self, rng):
        volumes = [rng.uniform(size=(8, 8, 8)) for _ in range(2)]
        scores = metrics.fid_by_view(volumes, [v.copy() for v in volumes])
        assert set(scores) == {"axial", "sagittal", "coronal", "average"}
        for value in scores.values():
            assert value == pytest.approx(0.0, abs=1e-5)

    def test_shifted_set_is_farther(self, rng):
        real = [rng.uniform(0.0, 0.5, size=(8, 8, 8)) for _ in range(2)]
        near = [rng.uniform(0.0, 0.5, size=(8, 8, 8)) for _ in range(2)]
        far = [rng.uniform(0.5, 1.0, size=(8, 8, 8)) for _ in range(2)]
        assert metrics.fid_by_view(real, far)["average"] > metrics.fid_by_view(real, near)["average"]

    def test_too_few_slices(self, rng):
        with pytest.raises(RankError):
            metrics.fid_by_view([rng.uniform(size=(4, 4, 4))], [rng.uniform(size=(4, 4, 4))])

    def test_empty_side(self, rng):
        with pytest.raises(RankError, match="synthetic"):
            metrics.fid_by_view([rng.uniform(size=(8, 8, 8))] * 2, [])


class TestRoc:
    def test_perfect_separation(self):
        assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_tied(self):
        assert metrics.roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5

    def test_pair_counting_example(self):
        assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_matches_sklearn_with_ties(self, rng):
        scores = rng.integers(0, 5, size=40) / 4.0
        labels = np.r_[np.ones(15, dtype=int), np.zeros(25, dtype=int)]
        rng.shuffle(labels)
        assert metrics.roc_auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))

    def test_matches_pair_counting_and_sklearn(self):
        rng = np.random.default_rng(500)
        for trial in range(500):
            n = int(rng.integers(2, 60))
            scores = rng.integers(0, int(rng.integers(2, 12)), size=n) / 10.0
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            pos, neg = scores[labels == 1], scores[labels == 0]
            pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
            auc = metrics.roc_auc(scores, labels)
            assert abs(auc - pairs / (len(pos) * len(neg))) <= 1e-12, f"trial {trial}"
            assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12), f"trial {trial}"

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            metrics.roc_auc([0.1, 0.2], [1, 1])

    def test_average_ranks(self):
        assert metrics.average_ranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]

    def test_curve_area_equals_auc(self, rng):
        scores = rng.integers(0, 6, size=30) / 5.0
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        curve = metrics.roc_curve(scores, labels)
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert curve.thresholds[0] == math.inf
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
        assert curve.area() == pytest.approx(metrics.roc_auc(scores, labels))
