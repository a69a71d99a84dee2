import os

import numpy as np
import pytest
import torch
from PIL import Image

from asymcycle import config as cfg

DATA = os.path.join(os.path.dirname(__file__), "data")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def load_png(name):
    from asymcycle.data import to_tensor

    return to_tensor(Image.open(os.path.join(DATA, name)).convert("RGB"))


def make_toy_folders(root, n=4, size=64, seed=0):
    """Domain X: coloured noise; domain Y: smooth colour ramps."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    dirs = {}
    for tag in ("x", "y", "x_test", "y_test"):
        d = os.path.join(root, tag)
        os.makedirs(d, exist_ok=True)
        for i in range(n if "test" not in tag else 2):
            if tag.startswith("x"):
                arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            else:
                c = rng.random(3)
                arr = (255 * np.stack([c[0] * xx, c[1] * yy, c[2] * (1 - xx)], -1)).astype(np.uint8)
            Image.fromarray(arr).save(os.path.join(d, f"{i:02d}.png"))
        dirs[tag] = d
    return dirs


def toy_config(dirs, **overrides):
    """Desk-scale config: 64x64 crops, narrow networks, stub backends."""
    base = {
        "data.x_dir": dirs["x"], "data.y_dir": dirs["y"],
        "data.x_test_dir": dirs.get("x_test", ""), "data.y_test_dir": dirs.get("y_test", ""),
        "data.base_size": 64, "data.expand_size": 72, "data.crop_size": 64,
        "model.base_channels": 16, "model.dense_layers": 4, "model.dense_growth": 16,
        "model.discriminator.base_channels": 16,
        "train.epochs": 2, "train.n_samples": 2, "seed": 1234,
    }
    base.update(overrides)
    return cfg.resolve(overrides=list(base.items()))


def tiny_config(**overrides):
    """8x8, base_channels 8, 64-bit: for finite-difference checks."""
    base = {
        "model.base_channels": 8, "model.n_residual_blocks_F": 1, "model.n_residual_blocks_G": 1,
        "model.dense_layers": 2, "model.dense_growth": 4,
        "model.discriminator.base_channels": 8, "model.discriminator.n_down_layers": 2,
        "train.dtype": "float64", "seed": 7,
    }
    base.update(overrides)
    return cfg.resolve(overrides=list(base.items()))


@pytest.fixture(scope="session")
def toy_dirs(tmp_path_factory):
    return make_toy_folders(str(tmp_path_factory.mktemp("toy")))


@pytest.fixture
def stub_backends():
    from asymcycle.backends import load_backend

    return {role: load_backend(f"stub_{role}") for role in ("feature", "edge", "distance")}


@pytest.fixture
def stub_backends64(stub_backends):
    return {k: v.to(torch.float64) for k, v in stub_backends.items()}
