from __future__ import annotations

import numpy as np
import pytest

from neonet import volgrid as vg
from neonet.models import PatchPair


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def weighted_sum():
    """Scalar sum(node * w) with fixed random weights, for gradient checks."""

    def weigh(node: vg.Node, seed: int = 7) -> vg.Node:
        w = np.random.default_rng(seed).standard_normal(node.shape)
        return vg.total(vg.mul(node, vg.constant(w)))

    return weigh


def make_patch(
    rng: np.random.Generator,
    size: tuple[int, int, int] = (8, 8, 8),
    pni: int = 0,
    case_id: str = "case",
) -> PatchPair:
    """Dual-channel patch with a box liver and a smaller box tumor inside it."""
    peritumoral = np.zeros(size)
    tumor = np.zeros(size)
    lo = [s // 4 for s in size]
    hi = [s - s // 4 for s in size]
    peritumoral[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1.0
    mid = [s // 2 for s in size]
    tumor[mid[0] - 1 : mid[0] + 1, mid[1] - 1 : mid[1] + 1, mid[2] - 1 : mid[2] + 1] = 1.0
    intensities = rng.uniform(0.2, 0.8, size=size)
    image = np.stack([intensities * peritumoral, intensities * tumor])
    labels = np.stack([peritumoral, tumor])
    return PatchPair(image, labels, pni, case_id=case_id, crop_start=(0, 0, 0))


@pytest.fixture
def patch_factory(rng):
    def build(size=(8, 8, 8), pni=0, case_id="case") -> PatchPair:
        return make_patch(rng, size, pni, case_id)

    return build
