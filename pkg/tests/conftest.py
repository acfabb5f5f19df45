import pytest
import torch

from cdgan.nets import ArchConfig, build_models


@pytest.fixture
def tiny_arch():
    return ArchConfig(image_size=16, widths=(8, 16), latent_dim=8,
                      embed_dim=16, proj_dim=8, head_hidden=16)


@pytest.fixture
def tiny_arch64():
    return ArchConfig(image_size=16, widths=(8, 16), latent_dim=8,
                      embed_dim=16, proj_dim=8, head_hidden=16, dtype="float64")


@pytest.fixture
def tiny_models(tiny_arch):
    return build_models(tiny_arch, seed=7)


@pytest.fixture
def tiny_models64(tiny_arch64):
    return build_models(tiny_arch64, seed=7)


def rand_images(rng, n, size=16, channels=3, dtype=torch.float32):
    x = rng.uniform(-0.95, 0.95, size=(n, channels, size, size))
    return torch.as_tensor(x, dtype=dtype)
