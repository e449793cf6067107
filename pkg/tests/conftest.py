from __future__ import annotations

import numpy as np
import pytest
import torch

from modgan.config import TrainConfig
from modgan.data.colormnist import load_split, synthesize_colormnist
from modgan.data.mnist_idx import export_idx


def fake_glyphs(n: int = 40, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Blocky 28x28 strokes: a bar plus a random box, enough to exercise rendering."""
    rng = np.random.default_rng(seed)
    glyphs = np.zeros((n, 28, 28), np.uint8)
    for k in range(n):
        r0, c0 = rng.integers(4, 12, size=2)
        glyphs[k, r0 : r0 + 12, c0 : c0 + 4] = 255
        glyphs[k, r0 : r0 + 4, c0 : c0 + 10] = rng.integers(180, 256)
    return glyphs, np.arange(n) % 10


@pytest.fixture(scope="session")
def idx_source(tmp_path_factory):
    glyphs, labels = fake_glyphs()
    return export_idx(tmp_path_factory.mktemp("mnist"), glyphs, labels)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, idx_source):
    root = tmp_path_factory.mktemp("colormnist")
    synthesize_colormnist(idx_source, root, 80, image_size=32, seed=3)
    return root


@pytest.fixture
def tiny_config(tiny_data) -> TrainConfig:
    return TrainConfig(
        task="translation", data=str(tiny_data), image_size=32, width=1 / 32, n_res=1,
        batch_size=8, epochs_flat=1, epochs_decay=1, n_critic=2, log_every=1, seed=7,
    )


@pytest.fixture
def tiny_train(tiny_data):
    return load_split(tiny_data, "train")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
