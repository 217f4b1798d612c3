#!/usr/bin/env python3
"""
Tests for detection metrics, exports, the ablation grid and latency.
"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from seqguard.checkpoint import ModelCheckpoint
from seqguard.domain import ANOMALY_KINDS, Vocabulary
from seqguard.evalkit import (
    TIME_GRIDS,
    DetectionReport,
    KindMetrics,
    embedding_similarity,
    evaluate_detection,
    export_case_trace,
    export_loss_distribution,
    measure_latency,
    recount,
    run_ablation,
)
from seqguard.model import ModelConfig, TransformerAutoencoder
from seqguard.pipeline import calibration_sequences, checkpoint_settings, featurize
from seqguard.scoring import Detector
from seqguard.synthgen import AnomalyLabel, write_labels
from seqguard.utils import DEFAULT_CONFIG


class TestKindMetrics:
    def test_f1_example(self):
        metrics = KindMetrics("SD", tp=9, fp=1, tn=90, fn=1)
        assert metrics.precision == pytest.approx(0.9)
        assert metrics.recall == pytest.approx(0.9)
        assert metrics.f1 == pytest.approx(0.9)
        assert metrics.fpr == pytest.approx(1 / 91)
        assert metrics.fnr == pytest.approx(0.1)

    def test_no_positives(self):
        metrics = KindMetrics("MD", tp=0, fp=0, tn=10, fn=0)
        assert metrics.f1 == 0.0 and metrics.precision == 0.0


class TestDetectionReport:
    """Per-kind counting against all normal sequences."""

    @pytest.fixture
    def labels(self):
        return [
            AnomalyLabel(1, "SD", "light_flickering"),
            AnomalyLabel(2, "SD", "tv_flickering"),
            AnomalyLabel(4, "DM", "ac_cool_at_night"),
        ]

    def test_counts_per_kind(self, labels):
        abnormal = [False, True, False, True, True, False]
        report = DetectionReport.from_predictions(abnormal, labels)

        sd = report["SD"]
        assert (sd.tp, sd.fn, sd.fp, sd.tn) == (1, 1, 1, 2)
        dm = report["DM"]
        assert (dm.tp, dm.fn, dm.fp, dm.tn) == (1, 0, 1, 2)
        assert set(report.kinds) == {"SD", "DM"}
        assert math.isnan(report.f1("MD"))

    def test_overall_counts_sum_to_size(self, labels):
        report = DetectionReport.from_predictions([False] * 6, labels)
        overall = report.overall
        assert overall.tp + overall.fp + overall.tn + overall.fn == 6

    def test_frame_columns(self, labels):
        frame = DetectionReport.from_predictions([True] * 6, labels).to_frame()
        assert list(frame.columns[:5]) == ["kind", "tp", "fp", "tn", "fn"]
        assert frame["kind"].tolist() == ["SD", "DM", "ALL"]

    def test_label_past_end(self, labels):
        with pytest.raises(ValueError):
            DetectionReport.from_predictions([False] * 3, labels)

    def test_recount_from_score_file(self, labels, tmp_path):
        scores = tmp_path / "scores.jsonl"
        verdicts = ["Normal", "Abnormal", "Normal", "Abnormal", "Abnormal", "Normal"]
        scores.write_text(
            "".join(
                json.dumps({"seq_index": i, "score": 0.0, "verdict": v}) + "\n"
                for i, v in reversed(list(enumerate(verdicts)))
            )
        )
        labels_path = tmp_path / "labels.csv"
        write_labels(labels, labels_path)

        report = recount(scores, labels_path)
        expected = DetectionReport.from_predictions([v == "Abnormal" for v in verdicts], labels)
        assert report.to_frame().equals(expected.to_frame())


class TestEvaluation:
    """Trained detector on the small synthetic corpus."""

    def test_calibration_uses_overlapping_windows(self, trained_run, synthetic_data):
        settings = trained_run.checkpoint.settings
        assert settings["data"]["stride"] == 2
        overlapping = calibration_sequences(synthetic_data.valid, settings)
        consecutive = featurize(synthetic_data.valid, settings)
        assert len(overlapping) > 4 * len(consecutive)
        assert all(len(s) == 10 for s in overlapping)
        assert overlapping[1].behaviors[0] == synthetic_data.valid[2]

    def test_evaluate_detection(self, trained_run, synthetic_data):
        detector = Detector(trained_run.checkpoint)
        sequences = featurize(synthetic_data.test, trained_run.checkpoint.settings)
        report = evaluate_detection(sequences, synthetic_data.labels, detector)

        assert set(report.kinds) == set(ANOMALY_KINDS)
        for kind in ANOMALY_KINDS:
            metrics = report[kind]
            assert metrics.tp + metrics.fn == sum(1 for a in synthetic_data.labels if a.kind == kind)
        assert report.overall.tp + report.overall.fp + report.overall.tn + report.overall.fn == len(
            sequences
        )

    def test_case_trace(self, trained_run, synthetic_data, tmp_path):
        detector = Detector(trained_run.checkpoint)
        sequences = featurize(synthetic_data.test, trained_run.checkpoint.settings)
        trace = export_case_trace(sequences[synthetic_data.labels[0].seq_index], detector)

        assert trace.attention.shape == (10, 10)
        assert np.allclose(trace.attention.sum(axis=1), 1.0, atol=1e-5)
        assert trace.weights.sum() == pytest.approx(1.0)

        attention_path, loss_path = trace.write(tmp_path / "case")
        assert attention_path.name == "case_attention.csv"
        assert len(pd.read_csv(loss_path)) == 10

    def test_loss_distribution(self, trained_run, synthetic_data, tmp_path):
        detector = Detector(trained_run.checkpoint)
        sequences = featurize(synthetic_data.train, trained_run.checkpoint.settings)
        distribution = export_loss_distribution(detector, sequences, bins=5)

        assert distribution.per_control["count"].sum() == sum(len(s) for s in sequences)
        assert distribution.histogram["count"].sum() == len(distribution.per_control)
        assert -1.0 <= distribution.spearman <= 1.0
        paths = distribution.write(tmp_path / "run")
        assert [p.name for p in paths] == ["run_loss_by_control.csv", "run_loss_histogram.csv"]

    def test_embedding_similarity(self, trained_run):
        checkpoint = trained_run.checkpoint
        controls = checkpoint.vocabulary.controls[:3]
        frame = embedding_similarity(checkpoint, controls, "hours")
        assert frame.shape == (3, 24)
        assert np.all(np.abs(frame.to_numpy()) <= 1.0 + 1e-9)
        assert embedding_similarity(checkpoint, controls, "durations").shape == (
            3,
            len(TIME_GRIDS["durations"][1]),
        )

    def test_embedding_similarity_errors(self, trained_run):
        with pytest.raises(ValueError):
            embedding_similarity(trained_run.checkpoint, ["no_such:control"])
        with pytest.raises(ValueError):
            embedding_similarity(trained_run.checkpoint, [], "months")


class TestAblation:
    def test_two_variant_grid(self, small_config, synthetic_data):
        frame = run_ablation(
            synthetic_data.train,
            synthetic_data.valid,
            synthetic_data.test,
            synthetic_data.labels,
            small_config,
            variants=["C0", "C4"],
            workers=1,
        )
        assert frame["variant"].tolist() == ["C0", "C4"]
        assert frame.loc[0, ["ldms", "ttpe", "nwrl"]].tolist() == [False, False, False]
        assert frame.loc[1, ["ldms", "ttpe", "nwrl"]].tolist() == [True, True, True]
        for kind in ANOMALY_KINDS:
            assert frame[kind].between(0.0, 1.0).all()


class TestLatency:
    def test_default_model_scores_one_sequence_quickly(self, week_sequences):
        vocabulary = Vocabulary(sorted({c for s in week_sequences for c in s.controls}))
        config = ModelConfig(vocab_size=vocabulary.size)
        model = TransformerAutoencoder(config, seed=0)
        checkpoint = ModelCheckpoint(
            model_config=config,
            vocabulary=vocabulary,
            parameters=model.snapshot(),
            loss_vector=np.zeros(vocabulary.size),
            settings=checkpoint_settings(DEFAULT_CONFIG),
        )
        assert measure_latency(Detector(checkpoint), week_sequences[0], repeats=10) < 50.0
