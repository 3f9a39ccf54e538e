from typing import Optional

import numpy as np
import pytest
import torch
import torch.nn as nn

from core import console
from core.models import FusedVolume, ScanLabel
from core.networks import Arch, ModelSpec, build_model
from core.preprocessing import ResizeSpec, SliceFilterSpec, preprocess_scan
from core.synthetic import PhantomSpec, generate_phantom

SMALL = 32
DEPTH = 16


@pytest.fixture(autouse=True)
def _quiet_console():
    previous = console.get_verbosity()
    console.set_verbosity(console.QUIET)
    yield
    console.set_verbosity(previous)


def make_phantom(seed: int, label: ScanLabel, size: int = SMALL, n_slices: Optional[int] = 20):
    """n_slices=None draws the slice count from the default 40-80 range"""
    scan, _ = generate_phantom(PhantomSpec(seed=seed, label=label, n_slices=n_slices, height=size, width=size))
    return scan


def make_volume(seed: int, label: ScanLabel, size: int = SMALL, depth: int = DEPTH,
                n_slices: Optional[int] = 20) -> FusedVolume:
    scan = make_phantom(seed, label, size=size, n_slices=n_slices)
    return preprocess_scan(scan, SliceFilterSpec(), ResizeSpec(depth=depth, height=size, width=size))


class ConstantLogits(nn.Module):
    """Returns the same logits for every input; has a conv so channel checks work"""

    def __init__(self, logits):
        super().__init__()
        self.conv = nn.Conv3d(3, 1, kernel_size=1)
        self.register_buffer("logits", torch.tensor(logits, dtype=torch.float64))

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1).clone()


@pytest.fixture(scope="session")
def covid_volume():
    return make_volume(1, ScanLabel.COVID)


@pytest.fixture(scope="session")
def noncovid_volume():
    return make_volume(2, ScanLabel.NON_COVID)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = build_model(ModelSpec(arch=Arch.HYBRID_DECOVNET, width_multiplier=0.25))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
