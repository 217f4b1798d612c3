#!/usr/bin/env python3
"""
Tests for the binary checkpoint format.
"""

import math
import struct

import numpy as np
import pytest

from seqguard.checkpoint import (
    MAGIC,
    CheckpointError,
    ModelCheckpoint,
    load_checkpoint,
    save_checkpoint,
)
from seqguard.domain import EncodedSequence, Vocabulary
from seqguard.model import ModelConfig, TransformerAutoencoder, make_batch


@pytest.fixture
def checkpoint():
    vocabulary = Vocabulary(["a:on", "b:on", "c:on", "d:on", "e:on"])
    config = ModelConfig(embed_dim=8, layers=1, heads=2, vocab_size=vocabulary.size, dropout=0.0)
    model = TransformerAutoencoder(config, seed=0)
    return ModelCheckpoint(
        model_config=config,
        vocabulary=vocabulary,
        parameters=model.snapshot(),
        loss_vector=np.array([0.1, 0.2, 0.3, 0.4, 2.5]),
        threshold=0.125,
        settings={"scoring": {"mu": 0.1}, "data": {"window": 10}},
    )


class TestCheckpointFormat:
    def test_round_trip(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "model.sqgd")
        loaded = load_checkpoint(path)

        assert loaded.model_config == checkpoint.model_config
        assert loaded.vocabulary == checkpoint.vocabulary
        assert loaded.threshold == checkpoint.threshold
        assert loaded.settings == checkpoint.settings
        assert np.array_equal(loaded.loss_vector, checkpoint.loss_vector)
        assert set(loaded.parameters) == set(checkpoint.parameters)
        for name, value in checkpoint.parameters.items():
            assert np.array_equal(loaded.parameters[name], value)

    def test_uncalibrated_threshold_survives(self, checkpoint):
        checkpoint.threshold = math.nan
        loaded = ModelCheckpoint.from_bytes(checkpoint.to_bytes())
        assert not loaded.calibrated

    def test_starts_with_magic(self, checkpoint):
        assert checkpoint.to_bytes()[:4] == MAGIC

    def test_loaded_model_reproduces_output(self, checkpoint):
        features = np.zeros((3, 4), dtype=np.int64)
        batch = make_batch([EncodedSequence(np.array([0, 3, 4]), features)])
        loaded = ModelCheckpoint.from_bytes(checkpoint.to_bytes())
        before, _ = checkpoint.build_model().forward(batch)
        after, _ = loaded.build_model().forward(batch)
        assert np.array_equal(before, after)

    def test_bad_magic(self, checkpoint):
        data = b"NOPE" + checkpoint.to_bytes()[4:]
        with pytest.raises(CheckpointError, match="magic"):
            ModelCheckpoint.from_bytes(data)

    def test_version_mismatch(self, checkpoint):
        data = checkpoint.to_bytes()
        data = data[:4] + struct.pack("<H", 2) + data[6:]
        with pytest.raises(CheckpointError, match="version"):
            ModelCheckpoint.from_bytes(data)

    def test_truncated(self, checkpoint):
        with pytest.raises(CheckpointError, match="truncated"):
            ModelCheckpoint.from_bytes(checkpoint.to_bytes()[:-3])

    def test_trailing_bytes(self, checkpoint):
        with pytest.raises(CheckpointError, match="trailing"):
            ModelCheckpoint.from_bytes(checkpoint.to_bytes() + b"\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.sqgd")
