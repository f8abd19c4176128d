import os

import numpy as np
import pytest
import torch

from unishadow.config import TrainConfig
from unishadow.data import load_manifest
from unishadow.networks import FeatureBackbone, VGG16_INVARIANT_TAPS
from unishadow.synthetic import make_synthetic_dataset

ISTD_ROOT = os.environ.get("ISTD_ROOT")


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return make_synthetic_dataset(tmp_path_factory.mktemp("synth"), train_scenes=6, variants=3,
                                  test_images=4, size=(64, 48), seed=3)


@pytest.fixture(scope="session")
def train_manifest(synthetic_root):
    return load_manifest(synthetic_root, "train")


@pytest.fixture(scope="session")
def test_manifest(synthetic_root):
    return load_manifest(synthetic_root, "test")


@pytest.fixture(scope="session")
def vgg16_conv22():
    return FeatureBackbone("vgg16", VGG16_INVARIANT_TAPS)


@pytest.fixture(scope="session")
def vgg19_small():
    # up to conv4_2 so 8x8 inputs still fit
    return FeatureBackbone("vgg19", ("conv1_2", "conv2_2", "conv3_2", "conv4_2"))


def tiny_config(**overrides) -> TrainConfig:
    """Down-sized architecture for fast loop tests at 32x24."""
    values = dict(image_width=32, image_height=24, gen_base_width=8, gen_downsamples=2, gen_res_blocks=1,
                  critic_base_width=8, critic_scales=2, critic_layers=3, backbone_vgg19="random",
                  backbone_vgg16="random", val_fraction=0.0, seed=11)
    values.update(overrides)
    return TrainConfig(**values)


def rand_image(gen: torch.Generator, *shape, dtype=torch.float32, margin=0.0):
    lo, hi = -1 + margin, 1 - margin
    return torch.rand(*shape, generator=gen, dtype=dtype) * (hi - lo) + lo


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def nrng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
