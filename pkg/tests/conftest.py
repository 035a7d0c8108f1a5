import numpy as np
import pytest
import torch

from masktok import maskdata
from masktok.model import MICRO_CONFIG, MaskTokenizerModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_model():
    torch.manual_seed(0)
    return MaskTokenizerModel(MICRO_CONFIG)


@pytest.fixture
def micro_masks():
    side = MICRO_CONFIG.image_side
    rng = np.random.default_rng(99)
    masks = []
    for seed in range(8):
        spec = maskdata.ShapeSpec(
            kind=("ellipse", "rectangle")[seed % 2],
            size_range=(0.3, 0.8),
            seed=seed,
            side=side,
        )
        masks.append(maskdata.gen_synthetic(spec))
    return masks


@pytest.fixture
def small_dataset(tmp_path):
    specs = maskdata.mixed_specs(20, seed=5, side=32)
    return maskdata.build_dataset(specs, tmp_path / "data", splits=(0.8, 0.1, 0.1))
