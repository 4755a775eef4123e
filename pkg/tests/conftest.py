import numpy as np
import pytest
import torch

from vitdeceive.model import ToyViTConfig, build_model

torch.set_num_threads(1)


def tiny_model(depth=1, heads=2, image_size=16, patch_size=8, embed_dim=16, seed=0, double=False, **kw):
    cfg = ToyViTConfig(
        image_size=image_size, patch_size=patch_size, depth=depth, heads=heads, embed_dim=embed_dim, mlp_dim=2 * embed_dim, **kw
    )
    model = build_model(cfg, seed).eval()
    return model.double() if double else model


def rand_images(n, size=16, channels=3, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, channels, size, size, generator=gen, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def model2():
    return tiny_model(depth=2, heads=2)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
