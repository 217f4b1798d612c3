#!/usr/bin/env python3
"""
Tests for loss-guided masking, the reconstruction objective and the trainer.
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from seqguard.domain import Behavior, EncodedSequence, encode_sequence, featurize_log
from seqguard.model import ModelConfig, make_batch
from seqguard.training import (
    EPSILON,
    AdamState,
    LossVector,
    Trainer,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    build_mask_plan,
    mask_count,
    position_losses,
    random_mask_plan,
    reconstruction_objective,
    update_loss_vector,
)


def _lv(values):
    values = np.array(values, dtype=np.float64)
    return LossVector(values, np.ones(len(values), dtype=np.int64))


def _batch(token_ids, masks=None):
    seq = EncodedSequence(np.array(token_ids), np.zeros((len(token_ids), 4), dtype=np.int64))
    return make_batch([seq], masks)


class TestMaskPlan:
    """Top-k masking driven by the loss vector."""

    def test_highest_loss_positions(self):
        plan = build_mask_plan(np.arange(5), _lv([0.1, 0.9, 0.5, 0.7, 0.2]), 0.4)
        assert plan.tolist() == [0, 1, 0, 1, 0]

    def test_ties_break_by_position(self):
        plan = build_mask_plan(np.array([2, 2, 2, 2]), _lv([0.0, 0.0, 1.0]), 0.5)
        assert plan.tolist() == [1, 1, 0, 0]

    def test_zero_ratio(self):
        plan = build_mask_plan(np.arange(5), _lv([0.1, 0.9, 0.5, 0.7, 0.2]), 0.0)
        assert plan.sum() == 0

    def test_unknown_tokens_use_max_loss(self):
        lv = _lv([0.1, 0.3, 0.2])
        plan = build_mask_plan(np.array([0, 4, 1, 2]), lv, 0.25)
        assert plan.tolist() == [0, 1, 0, 0]

    def test_explicit_unk_loss(self):
        lv = _lv([0.1, 0.3, 0.2])
        plan = build_mask_plan(np.array([0, 4, 1, 2]), lv, 0.25, unk_loss=0.0)
        assert plan.tolist() == [0, 0, 1, 0]

    def test_mask_count_matches_exact_floor(self):
        rng = np.random.default_rng(0)
        ratios = [0, 0.2, 0.4, 0.6, 0.8]
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            r = ratios[int(rng.integers(0, len(ratios)))]
            expected = math.floor(Fraction(n) * Fraction(str(r)))
            assert mask_count(n, r) == expected
            lv = _lv(rng.random(6))
            plan = build_mask_plan(rng.integers(0, 6, size=n), lv, r)
            assert plan.sum() == expected
            assert random_mask_plan(n, r, rng).sum() == expected


class TestLossVector:
    def test_mean_per_control(self):
        prev = LossVector.zeros(3)
        lv = update_loss_vector(prev, np.array([0, 0, 2]), np.array([1.0, 3.0, 5.0]))
        assert lv.values.tolist() == [2.0, 0.0, 5.0]
        assert lv.counts.tolist() == [2, 0, 1]

    def test_unseen_controls_keep_previous_value(self):
        prev = _lv([0.5, 0.7])
        lv = update_loss_vector(prev, np.array([1]), np.array([2.0]))
        assert lv.values.tolist() == [0.5, 2.0]

    def test_mask_and_unk_ignored(self):
        lv = update_loss_vector(LossVector.zeros(2), np.array([0, 2, 3]), np.array([1.0, 9.0, 9.0]))
        assert lv.values.tolist() == [1.0, 0.0]


class TestObjective:
    def test_uniform_prediction_loss(self):
        probs = np.full((1, 3, 141), 1.0 / 141)
        losses = position_losses(probs, np.array([[0, 5, 140]]), np.ones((1, 3), dtype=bool))
        assert np.allclose(losses, math.log(141))
        assert losses[0, 0] == pytest.approx(4.949, abs=1e-3)

    def test_unknown_target_and_padding(self):
        probs = np.full((1, 3, 4), 0.25)
        losses = position_losses(probs, np.array([[0, 5, 1]]), np.array([[True, True, False]]))
        assert losses[0, 1] == pytest.approx(-math.log(EPSILON))
        assert losses[0, 2] == 0.0

    def test_unmasked_epoch_is_mean_loss(self):
        probs = np.full((1, 4, 4), 0.25)
        batch = _batch([0, 1, 2, 3], masks=[np.array([1, 0, 0, 0])])
        assert reconstruction_objective(probs, batch, epoch=1, no_mask_epochs=3) == pytest.approx(
            math.log(4)
        )

    def test_masked_epoch_is_not_renormalized(self):
        probs = np.full((1, 4, 4), 0.25)
        batch = _batch([0, 1, 2, 3], masks=[np.array([1, 0, 0, 0])])
        value = reconstruction_objective(probs, batch, epoch=4, no_mask_epochs=3)
        assert value == pytest.approx(math.log(4) / 4)

    def test_all_zero_mask_gives_zero(self):
        probs = np.full((1, 4, 4), 0.25)
        batch = _batch([0, 1, 2, 3], masks=[np.zeros(4)])
        assert reconstruction_objective(probs, batch, epoch=4, no_mask_epochs=3) == 0.0


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.5, -2.0])}
        adam_step(params, grads, AdamState(), lr=0.1)
        assert np.allclose(params["w"], [0.9, -0.9], atol=1e-6)

    def test_zero_lr_keeps_parameters(self):
        params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
        adam_step(params, {"w": np.array([3.0, 4.0], dtype=np.float32)}, AdamState(), lr=0.0)
        assert params["w"].tolist() == [1.0, 2.0]
        assert params["w"].dtype == np.float32


class TestTrainConfig:
    def test_ldms_needs_warmup_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(no_mask_epochs=0, mask_strategy="ldms")

    def test_ratio_range(self):
        with pytest.raises(ValueError):
            TrainConfig(mask_ratio=1.5)

    def test_from_config_without_ldms(self, small_config):
        config = TrainConfig.from_config(small_config, ldms=False)
        assert config.mask_strategy == "none"
        assert config.seed == small_config["seed"]


class TestTrainer:
    """End-to-end fits on a week of synthetic behavior."""

    @pytest.fixture
    def model_config(self):
        return ModelConfig(embed_dim=8, layers=1, heads=2, dropout=0.1)

    def test_fit_returns_uncalibrated_checkpoint(self, model_config, quick_train_config, week_sequences):
        trainer = Trainer(model_config, quick_train_config)
        ckpt = trainer.fit(week_sequences[:20], week_sequences[20:])

        assert math.isnan(ckpt.threshold)
        assert len(ckpt.loss_vector) == ckpt.vocabulary.size
        assert ckpt.model_config.vocab_size == ckpt.vocabulary.size
        assert len(trainer.history.records) == quick_train_config.epochs
        assert np.all(np.isfinite(ckpt.loss_vector))

    def test_masking_starts_after_warmup(self, model_config, quick_train_config, week_sequences):
        trainer = Trainer(model_config, quick_train_config)
        trainer.fit(week_sequences[:20], week_sequences[20:])
        masked = [r.masked_positions for r in trainer.history.records]
        assert masked[:2] == [0, 0]
        # four of ten positions per full sequence
        assert all(m >= 4 * 19 for m in masked[2:])

    def test_same_seed_same_result(self, model_config, quick_train_config, week_sequences):
        a = Trainer(model_config, quick_train_config).fit(week_sequences[:20], week_sequences[20:])
        b = Trainer(model_config, quick_train_config).fit(week_sequences[:20], week_sequences[20:])
        assert all(np.array_equal(a.parameters[n], b.parameters[n]) for n in a.parameters)
        assert np.array_equal(a.loss_vector, b.loss_vector)

    def test_zero_ratio_matches_no_mask(self, model_config, week_sequences):
        base = dict(epochs=3, no_mask_epochs=1, batch_size=32, learning_rate=0.005, seed=3)
        ldms = Trainer(model_config, TrainConfig(mask_ratio=0.0, mask_strategy="ldms", **base))
        plain = Trainer(model_config, TrainConfig(mask_ratio=0.4, mask_strategy="none", **base))
        ldms.fit(week_sequences[:20], week_sequences[20:])
        plain.fit(week_sequences[:20], week_sequences[20:])
        assert [r.train_loss for r in ldms.history.records] == [
            r.train_loss for r in plain.history.records
        ]

    def test_loss_vector_uses_unmasked_reconstruction(self, model_config, week_sequences):
        # frozen parameters: masked epochs must report the same loss vector as the warmup
        config = TrainConfig(epochs=3, no_mask_epochs=1, learning_rate=0.0, seed=5)
        trainer = Trainer(model_config, config)
        ckpt = trainer.fit(week_sequences[:20], week_sequences[20:])

        variances = [r.loss_variance for r in trainer.history.records]
        assert trainer.history.records[-1].masked_positions > 0
        assert variances == [variances[0]] * 3
        assert float(np.var(ckpt.loss_vector)) == variances[-1]

    def test_training_loss_decreases(self, model_config, week_sequences):
        config = TrainConfig(
            epochs=15, mask_strategy="none", learning_rate=0.01, patience=15, batch_size=8, seed=2
        )
        trainer = Trainer(model_config, config)
        trainer.fit(week_sequences[:20], week_sequences[20:])
        losses = [r.train_loss for r in trainer.history.records]
        assert losses[-1] < losses[0]

    def test_early_stopping_without_improvement(self, model_config, week_sequences):
        config = TrainConfig(epochs=50, no_mask_epochs=1, learning_rate=0.0, patience=3, seed=1)
        trainer = Trainer(model_config, config)
        trainer.fit(week_sequences[:20], week_sequences[20:])
        assert trainer.history.stopped_early
        assert trainer.history.best_epoch == 1
        assert len(trainer.history.records) == 4

    def test_divergence_is_reported(self, mocker, model_config, quick_train_config, week_sequences):
        mocker.patch("seqguard.training.position_losses", return_value=np.array(np.nan))
        with pytest.raises(TrainingDivergedError) as excinfo:
            Trainer(model_config, quick_train_config).fit(week_sequences[:20], week_sequences[20:])
        assert excinfo.value.epoch == 1
        assert excinfo.value.batch == 0

    def test_history_csv(self, tmp_path, model_config, quick_train_config, week_sequences):
        trainer = Trainer(model_config, quick_train_config)
        trainer.fit(week_sequences[:20], week_sequences[20:])
        path = tmp_path / "run_training_log.csv"
        trainer.history.write_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "epoch,train_loss,valid_loss,loss_variance,masked_positions"

    def test_overfits_a_repeated_sequence(self):
        controls = ["a:on", "b:on", "c:on", "d:on", "e:on", "f:on", "g:on", "h:on"]
        events = [Behavior(1_700_000_000 + 60 * i, c.split(":")[0], c) for i, c in enumerate(controls)]
        corpus = featurize_log(events, window=8) * 16
        config = TrainConfig(
            epochs=200, mask_strategy="none", learning_rate=0.01, patience=200, batch_size=16, seed=0
        )
        trainer = Trainer(ModelConfig(embed_dim=16, layers=1, heads=2, dropout=0.0), config)
        ckpt = trainer.fit(corpus, corpus)

        assert trainer.history.records[-1].train_loss < 0.05
        model = ckpt.build_model()
        encoded = encode_sequence(corpus[0], ckpt.vocabulary)
        probs, _ = model.forward(make_batch([encoded]))
        assert probs[0].argmax(axis=-1).tolist() == encoded.token_ids.tolist()
