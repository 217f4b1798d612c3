#!/usr/bin/env python3
"""
Finite-difference checks of the analytic gradients.
"""

import numpy as np
import pytest

from seqguard.domain import EncodedSequence
from seqguard.model import ModelConfig, TransformerAutoencoder, make_batch
from seqguard.training import (
    check_gradients,
    compute_gradients,
    objective_coefficients,
)


def _random_batch(rng, n=4, vocab=5, count=2, ragged=False):
    sequences = []
    for b in range(count):
        length = n - 1 if ragged and b else n
        features = np.stack(
            [
                np.arange(length),
                rng.integers(0, 24, size=length),
                rng.integers(0, 7, size=length),
                rng.integers(0, 1441, size=length),
            ],
            axis=1,
        )
        sequences.append(EncodedSequence(rng.integers(0, vocab, size=length), features))
    return sequences


class TestGradientCheck:
    """Tiny config: d=8, L=1, heads=2, n=4, |C|=5."""

    @pytest.fixture
    def model(self, tiny_model_config):
        return TransformerAutoencoder(tiny_model_config, seed=0)

    def test_unmasked_objective(self, model):
        rng = np.random.default_rng(0)
        batch = make_batch(_random_batch(rng))
        errors = check_gradients(model, batch)

        assert {"w_order", "w_hour", "w_day", "w_duration"} <= set(errors)
        assert set(errors) == set(model.parameters)
        assert max(errors.values()) < 1e-4, errors

    def test_masked_objective_with_padding(self, model):
        rng = np.random.default_rng(1)
        sequences = _random_batch(rng, ragged=True)
        masks = [np.array([0, 1, 0, 1]), np.array([1, 0, 0])]
        batch = make_batch(sequences, masks)
        errors = check_gradients(model, batch, masked=True)
        assert max(errors.values()) < 1e-4, errors

    def test_unknown_target_contributes_no_gradient(self, tiny_model_config):
        model = TransformerAutoencoder(tiny_model_config, seed=2).astype(np.float64)
        unk = tiny_model_config.vocab_size + 1
        seq = EncodedSequence(np.array([unk]), np.zeros((1, 4), dtype=np.int64))
        batch = make_batch([seq])
        probs, _ = model.forward(batch)
        grads = compute_gradients(model, probs, batch, objective_coefficients(batch, False))
        assert all(np.all(g == 0) for g in grads.values())

    def test_gradients_scale_with_loss(self, tiny_model_config):
        model = TransformerAutoencoder(tiny_model_config, seed=4).astype(np.float64)
        batch = make_batch(_random_batch(np.random.default_rng(4)))
        coef = objective_coefficients(batch, False)
        probs, _ = model.forward(batch)
        single = compute_gradients(model, probs, batch, coef)
        probs, _ = model.forward(batch)
        double = compute_gradients(model, probs, batch, 2 * coef)
        for name in single:
            assert np.allclose(double[name], 2 * single[name])

    def test_order_only_model(self):
        config = ModelConfig(
            embed_dim=8, layers=1, heads=2, vocab_size=5, dropout=0.0, time_levels=("order",)
        )
        model = TransformerAutoencoder(config, seed=5)
        batch = make_batch(_random_batch(np.random.default_rng(5)))
        errors = check_gradients(model, batch)
        assert "w_hour" not in errors
        assert max(errors.values()) < 1e-4, errors
