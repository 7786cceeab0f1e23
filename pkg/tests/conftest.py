import pytest
import torch

from cytosynth.data import ToySpec, make_toy_dataset
from cytosynth.discriminator import Discriminator, DiscriminatorSpec
from cytosynth.generator import Generator, GeneratorSpec
from cytosynth.training import TrainConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def small_g():
    return Generator(GeneratorSpec(resolution=64, num_classes=3, width=0.125, sgc_pairs=[(8, 64), (16, 32)]))


@pytest.fixture
def small_d():
    return Discriminator(DiscriminatorSpec(resolution=64, num_classes=3, width=0.125))


@pytest.fixture(scope="session")
def toy32():
    return make_toy_dataset(ToySpec(num_classes=3, images_per_class=8, resolution=32, seed=5))


def tiny_config(**kw):
    base = dict(resolution=32, width=0.125, batch_size=4, total_iters=10, checkpoint_every=5, sample_grid=4, seed=3)
    base.update(kw)
    return TrainConfig(**base)
