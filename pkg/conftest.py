"""Shared fixtures for the seqguard test suite."""

import copy

import pytest

from seqguard.domain import featurize_log
from seqguard.model import ModelConfig
from seqguard.pipeline import generate_datasets, train_detector
from seqguard.synthgen import default_routines, generate_normal_dataset
from seqguard.training import TrainConfig
from seqguard.utils import DEFAULT_CONFIG


@pytest.fixture
def tiny_model_config():
    """Small enough for finite differences and quick training."""
    return ModelConfig(embed_dim=8, layers=1, heads=2, vocab_size=5, max_seq_len=16, dropout=0.0)


@pytest.fixture
def quick_train_config():
    return TrainConfig(
        epochs=4,
        no_mask_epochs=2,
        mask_ratio=0.4,
        batch_size=32,
        learning_rate=0.005,
        patience=10,
        seed=7,
    )


@pytest.fixture(scope="session")
def week_log():
    return generate_normal_dataset(default_routines(), days=7, noise_rate=0.05, seed=1)


@pytest.fixture(scope="session")
def week_sequences(week_log):
    return featurize_log(week_log, window=10)


@pytest.fixture(scope="session")
def small_config():
    """Full configuration shrunk to a fast model. Do not mutate."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    config["model"].update({"embed_dim": 8, "layers": 1, "heads": 2, "dropout": 0.0})
    config["train"].update({"epochs": 3, "no_mask_epochs": 1, "batch_size": 64, "learning_rate": 0.005})
    config["data"].update({"days": 60, "anomalies_per_category": 1})
    return config


@pytest.fixture(scope="session")
def synthetic_data(small_config):
    return generate_datasets(small_config)


@pytest.fixture(scope="session")
def trained_run(small_config, synthetic_data):
    return train_detector(synthetic_data.train, synthetic_data.valid, small_config)
