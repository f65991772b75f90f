import pytest
import torch

from secgan.config import load_config
from secgan.data import ToySpec, generate_toy_dataset
from secgan.parsing import train_parser
from secgan.training import parser_widths

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_ds():
    """2,000 toy faces at 32x32 (1,600 train / 400 test)."""
    return generate_toy_dataset(ToySpec(seed=0), 2000, (0.8, 0.0, None))


@pytest.fixture(scope="session")
def small_ds():
    return generate_toy_dataset(ToySpec(seed=1), 64, (0.75, 0.0, None))


@pytest.fixture(scope="session")
def toy_config():
    return load_config("toy")


@pytest.fixture(scope="session")
def toy_parser(toy_ds, toy_config):
    return train_parser(toy_ds.image_tensor("train"), toy_ds.mask_tensor("train"),
                        epochs=toy_config.parser_epochs, widths=parser_widths(toy_config), seed=30)


@pytest.fixture(scope="session")
def tiny_parser(small_ds):
    return train_parser(small_ds.image_tensor("train"), small_ds.mask_tensor("train"), epochs=1,
                        widths=(4, 4, 8, 8), seed=0)
