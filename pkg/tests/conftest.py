"""
Shared test fixtures and utilities for mifcn tests.

This module provides temporary directories, seeded generators, small model
configurations and synthetic 8-bit images written to disk with Pillow.
"""

import tempfile
from pathlib import Path
from typing import List

import numpy as np
import pytest
from PIL import Image

from mifcn.model import ModelConfig


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A three-branch model small enough for exhaustive checks."""
    return ModelConfig(T=3, C=4, A=3, B=1)


@pytest.fixture
def tiny_config():
    """Single-branch, single-channel model used by training smoke tests."""
    return ModelConfig(T=1, C=2, A=1, B=0)


def write_gray(path: Path, values: np.ndarray) -> Path:
    """Write an array as an 8-bit grayscale image."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(values), 0, 255).astype(np.uint8)).save(path)
    return path


def speckled(clean: np.ndarray, rng: np.random.Generator, sigma: float = 0.3) -> np.ndarray:
    """Multiplicative gamma-like noise on an intensity image."""
    return np.clip(clean * rng.gamma(1.0 / sigma**2, sigma**2, size=clean.shape), 0, 255)


def layered_retina(height: int, width: int) -> np.ndarray:
    """Horizontal bright bands on a dark background, a stand-in for retinal layers."""
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    bands = 60.0 + 120.0 * (np.sin(rows / 3.0 + cols / 40.0) > 0.3)
    bands[: height // 4] = 15.0
    return bands


@pytest.fixture
def training_dir(temp_dir, rng):
    """Two noisy/high-SNR training pairs plus a crop sidecar."""
    data = temp_dir / "train"
    for pair_id in ("a01", "a02"):
        clean = layered_retina(40, 60)
        write_gray(data / f"{pair_id}_highsnr.png", clean)
        write_gray(data / f"{pair_id}_noisy.png", speckled(clean, rng))
    crops = temp_dir / "crops.txt"
    crops.write_text("# id top left height width\na01 5 5 30 45\na02 0 0 40 60\n")
    return data, crops


@pytest.fixture
def test_cases_dir(temp_dir, rng):
    """Two test-case directories with main, three nearby images and a reference."""
    root = temp_dir / "test"
    for name in ("case01", "case02"):
        clean = layered_retina(24, 32)
        write_gray(root / name / "ref.png", clean)
        write_gray(root / name / "main.png", speckled(clean, rng))
        for k in range(1, 4):
            write_gray(root / name / f"near{k}.png", speckled(clean, rng))
    return root


@pytest.fixture
def roi_file(temp_dir):
    """ROI sidecar matching the 24x32 synthetic test cases."""
    path = temp_dir / "rois.txt"
    path.write_text("background 0 0 5 10\nlayer1 10 2 6 8\nlayer2 12 20 6 8\n")
    return path


def branch_inputs(rng: np.random.Generator, T: int, shape=(8, 8)) -> List[np.ndarray]:
    return [rng.uniform(0.0, 255.0, size=shape) for _ in range(T)]
