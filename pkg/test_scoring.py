#!/usr/bin/env python3
"""
Tests for noise-aware weighting, scores and threshold calibration.
"""

import math

import numpy as np
import pytest
from scipy.special import expit

from seqguard.model import ModelConfig
from seqguard.pipeline import checkpoint_settings
from seqguard.scoring import (
    ABNORMAL,
    NORMAL,
    Detector,
    ScoringError,
    anomaly_score,
    calibrate_threshold,
    classify,
    noise_weight_vector,
    quantile_threshold,
    sequence_behavior_weights,
    uniform_weight_vector,
    weighted_score,
)
from seqguard.training import LossVector, Trainer, TrainConfig
from seqguard.utils import DEFAULT_CONFIG


class TestNoiseWeights:
    """Weights that damp controls with outlying loss."""

    def test_closed_form_example(self):
        weights = noise_weight_vector(np.array([1.0, 1.0, 3.0]), mu=0.1)
        mean, std = 5.0 / 3.0, math.sqrt(8.0 / 9.0 / 3.0 + 16.0 / 9.0 / 3.0)
        expected = expit(-(3.0 - mean) / (std * 0.1))
        assert weights[:2].tolist() == [0.5, 0.5]
        assert weights[2] == pytest.approx(expected, abs=1e-9)
        assert weights[2] == pytest.approx(7.2e-7, rel=0.05)

    def test_flat_loss_vector(self):
        assert noise_weight_vector(np.full(4, 2.0)).tolist() == [0.5] * 4

    def test_accepts_loss_vector(self):
        lv = LossVector(np.array([1.0, 1.0, 3.0]), np.ones(3, dtype=np.int64))
        assert np.allclose(noise_weight_vector(lv), noise_weight_vector(lv.values))

    def test_weights_never_increase_with_loss(self):
        values = np.random.default_rng(0).random(30) * 4
        weights = noise_weight_vector(values, mu=0.3)
        order = np.argsort(values)
        assert np.all(np.diff(weights[order]) <= 1e-12)
        assert np.all(weights <= 0.5)

    def test_non_positive_mu(self):
        with pytest.raises(ScoringError):
            noise_weight_vector(np.array([1.0, 2.0]), mu=0.0)

    def test_far_outlier_keeps_a_positive_weight(self):
        values = np.append(np.full(140, 0.1), 20.0)
        weights = noise_weight_vector(values, mu=0.01)
        assert weights[-1] > 0.0
        assert weights[-1] < 1e-300

    def test_smaller_mu_damps_harder(self):
        values = np.random.default_rng(4).random(40) * 3
        above = values > values.mean()
        previous = noise_weight_vector(values, mu=1.0)
        for mu in (0.5, 0.2, 0.1, 0.05):
            weights = noise_weight_vector(values, mu=mu)
            assert np.all(weights[above] <= previous[above])
            assert np.all(weights[~above] == 0.5)
            previous = weights


class TestSequenceWeights:
    def test_noise_behavior_gets_near_zero_share(self):
        weights = noise_weight_vector(np.array([1.0, 1.0, 3.0]), mu=0.1)
        p = sequence_behavior_weights(np.array([0, 1, 0, 2]), weights)
        assert p.sum() == pytest.approx(1.0)
        assert p[3] == pytest.approx(0.0, abs=1e-5)
        assert np.allclose(p[:3], 1.0 / 3.0, atol=1e-5)

    def test_special_tokens_weigh_half(self):
        p = sequence_behavior_weights(np.array([0, 5]), np.array([0.25, 0.5, 0.5]))
        assert p.tolist() == pytest.approx([1.0 / 3.0, 2.0 / 3.0])

    def test_sequence_of_only_outliers(self):
        values = np.append(np.full(140, 0.1), 20.0)
        weights = noise_weight_vector(values, mu=0.01)
        token_ids = np.full(10, 140)
        p = sequence_behavior_weights(token_ids, weights)
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0)
        score = weighted_score(np.full(10, 3.0), p)
        assert math.isfinite(score)
        assert score == pytest.approx(0.3)


class TestWeightedScore:
    def test_hand_examples(self):
        assert weighted_score([1.0, 1.0], [0.5, 0.5]) == pytest.approx(0.5)
        assert weighted_score([2.0, 4.0, 6.0], [0.5, 0.25, 0.25]) == pytest.approx(3.5 / 3)
        assert weighted_score([2.0, 4.0, 6.0], [0.5, 0.25, 0.25], length_normalize=False) == 3.5

    def test_perfect_reconstruction(self):
        assert weighted_score(np.zeros(5), np.full(5, 0.2)) == 0.0

    def test_empty_sequence(self):
        with pytest.raises(ScoringError):
            weighted_score([], [])


class TestThreshold:
    def test_linear_quantile(self):
        scores = np.arange(1, 21, dtype=float)
        assert quantile_threshold(scores, 0.5) == pytest.approx(10.5)
        assert quantile_threshold(scores, 1.0) == 20.0

    def test_needs_twenty_scores(self):
        with pytest.raises(ScoringError):
            quantile_threshold(np.ones(19))

    def test_tie_is_normal(self):
        assert classify(0.3, 0.3) == NORMAL
        assert classify(0.3000001, 0.3) == ABNORMAL


class TestDetector:
    """Scoring with a trained checkpoint."""

    @pytest.fixture(scope="class")
    def checkpoint(self, week_sequences):
        model_config = ModelConfig(embed_dim=8, layers=1, heads=2, dropout=0.0)
        train_config = TrainConfig(epochs=3, no_mask_epochs=1, batch_size=32, seed=5)
        ckpt = Trainer(model_config, train_config).fit(week_sequences[:24], week_sequences[24:])
        ckpt.settings = checkpoint_settings(DEFAULT_CONFIG)
        return ckpt

    def test_scores_are_finite_and_positive(self, checkpoint, week_sequences):
        scores = Detector(checkpoint).scores(week_sequences)
        assert len(scores) == len(week_sequences)
        assert np.all(np.isfinite(scores)) and np.all(scores > 0)

    def test_calibration_sets_threshold(self, checkpoint, week_sequences):
        detector = Detector(checkpoint)
        threshold = detector.calibrate(week_sequences, quantile=1.0)
        assert threshold.size == len(week_sequences)
        assert checkpoint.threshold == pytest.approx(detector.scores(week_sequences).max())
        assert all(detector.classify(s) == NORMAL for s in detector.scores(week_sequences))

    def test_calibration_needs_enough_sequences(self, checkpoint, week_sequences):
        with pytest.raises(ScoringError):
            Detector(checkpoint).calibrate(week_sequences[:5])

    def test_uniform_weights_without_nwrl(self, checkpoint, week_sequences):
        detector = Detector(checkpoint, nwrl=False)
        assert np.array_equal(detector.weights, uniform_weight_vector(len(checkpoint.vocabulary)))
        result = detector.score_sequences(week_sequences[:1])[0]
        assert result.score == pytest.approx(result.losses.mean() / len(result.losses))

    def test_record_layout(self, checkpoint, week_sequences):
        result = Detector(checkpoint).score_sequences(week_sequences[:1])[0]
        record = result.record(0, threshold=1e9)
        assert record["verdict"] == NORMAL
        assert len(record["per_position"]) == len(week_sequences[0])
        assert set(record["per_position"][0]) == {"control", "loss", "weight"}

    def test_functional_entry_points(self, checkpoint, week_sequences):
        detector = Detector(checkpoint)
        assert anomaly_score(week_sequences[3], checkpoint) == pytest.approx(
            detector.scores(week_sequences[3:4])[0]
        )
        threshold = calibrate_threshold(week_sequences, checkpoint, quantile=0.5)
        assert threshold.quantile == 0.5
        assert checkpoint.threshold == pytest.approx(np.median(detector.scores(week_sequences)))
