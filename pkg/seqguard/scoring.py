"""Noise-aware weighted anomaly scores, threshold calibration and verdicts."""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .checkpoint import ModelCheckpoint
from .domain import BehaviorSequence, encode_sequence
from .training import LossVector, position_loss_rows

logger = logging.getLogger(__name__)

VAR_EPSILON = 1e-12
MIN_WEIGHT = np.finfo(np.float64).tiny
ROUTINE_WEIGHT = 0.5
MIN_CALIBRATION_SEQUENCES = 20
NORMAL = "Normal"
ABNORMAL = "Abnormal"


class ScoringError(ValueError):
    """Raised for inputs that cannot be scored or calibrated."""


def noise_weight_vector(loss_vector: Union[LossVector, np.ndarray], mu: float = 0.1) -> np.ndarray:
    """Per-control weights that damp controls whose loss sits far above the mean.

    ``w = sigmoid(-relu(l - E) / (sqrt(Var) * mu))`` with the population
    variance; controls at or below the mean get exactly 0.5. A flat loss
    vector gives 0.5 everywhere.
    """
    if mu <= 0:
        raise ScoringError(f"mu must be positive, got {mu}")
    values = np.asarray(getattr(loss_vector, "values", loss_vector), dtype=np.float64)
    if values.size == 0:
        raise ScoringError("loss vector is empty")
    mean = values.mean()
    var = values.var()
    if var < VAR_EPSILON:
        return np.full(values.shape, ROUTINE_WEIGHT)
    excess = np.maximum(values - mean, 0.0)
    # expit underflows to 0 for far outliers; keep every control weighable
    return np.maximum(expit(-excess / (math.sqrt(var + VAR_EPSILON) * mu)), MIN_WEIGHT)


def uniform_weight_vector(size: int) -> np.ndarray:
    return np.full(size, ROUTINE_WEIGHT)


def sequence_behavior_weights(token_ids: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Normalize the weights of a sequence's controls into ``p`` with ``sum(p) = 1``.

    Token ids past the end of ``weights`` (MASK, UNK) weigh 0.5.
    """
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise ScoringError("cannot weight an empty sequence")
    known = token_ids < len(weights)
    w = np.full(token_ids.shape, ROUTINE_WEIGHT)
    w[known] = np.maximum(weights[token_ids[known]], MIN_WEIGHT)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ScoringError("sequence weights do not sum to a positive value")
    return w / total


def weighted_score(losses: np.ndarray, p: np.ndarray, length_normalize: bool = True) -> float:
    """``(1/|s|) * sum(p_i * loss_i)``; drop the ``1/|s|`` with ``length_normalize=False``."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ScoringError("cannot score an empty sequence")
    total = float(np.dot(p, losses))
    return total / losses.size if length_normalize else total


def quantile_threshold(scores: Sequence[float], quantile: float = 0.95) -> float:
    """Linear-interpolation quantile of calibration scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < MIN_CALIBRATION_SEQUENCES:
        raise ScoringError(
            f"need at least {MIN_CALIBRATION_SEQUENCES} calibration sequences, got {len(scores)}"
        )
    if not 0.0 < quantile <= 1.0:
        raise ScoringError(f"quantile must be in (0, 1], got {quantile}")
    return float(np.quantile(scores, quantile, method="linear"))


def classify(score: float, threshold: float) -> str:
    """``Abnormal`` strictly above the threshold, ``Normal`` otherwise."""
    return ABNORMAL if score > threshold else NORMAL


@dataclass
class Threshold:
    value: float
    quantile: float
    size: int


@dataclass
class SequenceScore:
    score: float
    controls: List[str]
    losses: np.ndarray
    weights: np.ndarray

    def record(self, seq_index: int, threshold: Optional[float] = None) -> Dict:
        """JSON-lines record of this score."""
        record = {"seq_index": seq_index, "score": self.score}
        if threshold is not None:
            record["verdict"] = classify(self.score, threshold)
        record["per_position"] = [
            {"control": c, "loss": float(loss), "weight": float(w)}
            for c, loss, w in zip(self.controls, self.losses, self.weights)
        ]
        return record


class Detector:
    """Scores featurized sequences with a trained checkpoint.

    Scoring settings default to those stored in the checkpoint.
    """

    def __init__(
        self,
        checkpoint: ModelCheckpoint,
        mu: Optional[float] = None,
        nwrl: Optional[bool] = None,
        length_normalize: Optional[bool] = None,
        batch_size: int = 512,
    ):
        scoring = checkpoint.settings.get("scoring", {})
        ablation = checkpoint.settings.get("ablation", {})
        self.checkpoint = checkpoint
        self.mu = float(mu if mu is not None else scoring.get("mu", 0.1))
        self.nwrl = bool(nwrl if nwrl is not None else ablation.get("nwrl", True))
        self.length_normalize = bool(
            length_normalize if length_normalize is not None else scoring.get("length_normalize", True)
        )
        self.batch_size = batch_size
        self.model = checkpoint.build_model()
        size = len(checkpoint.vocabulary)
        self.weights = (
            noise_weight_vector(checkpoint.loss_vector, self.mu)
            if self.nwrl
            else uniform_weight_vector(size)
        )

    @property
    def threshold(self) -> float:
        return self.checkpoint.threshold

    def score_sequences(self, sequences: Sequence[BehaviorSequence]) -> List[SequenceScore]:
        if any(len(s) == 0 for s in sequences):
            raise ScoringError("cannot score an empty sequence")
        if not sequences:
            return []
        vocabulary = self.checkpoint.vocabulary
        encoded = [encode_sequence(s, vocabulary) for s in sequences]
        unknown = {b.control for s in sequences for b in s.behaviors if b.control not in vocabulary}
        if unknown:
            logger.warning(f"{len(unknown)} controls not seen in training: {sorted(unknown)[:5]}")

        rows = position_loss_rows(self.model, encoded, self.batch_size)
        results = []
        for s, enc, losses in zip(sequences, encoded, rows):
            p = sequence_behavior_weights(enc.token_ids, self.weights)
            results.append(
                SequenceScore(
                    weighted_score(losses, p, self.length_normalize), list(s.controls), losses, p
                )
            )
        return results

    def scores(self, sequences: Sequence[BehaviorSequence]) -> np.ndarray:
        return np.array([r.score for r in self.score_sequences(sequences)], dtype=np.float64)

    def calibrate(self, validation: Sequence[BehaviorSequence], quantile: float = 0.95) -> Threshold:
        """Set the checkpoint threshold to the ``quantile`` of validation scores."""
        scores = self.scores(validation)
        value = quantile_threshold(scores, quantile)
        self.checkpoint.threshold = value
        logger.info(f"Threshold {value:.6f} at quantile {quantile} over {len(scores)} sequences")
        return Threshold(value, quantile, len(scores))

    def classify(self, score: float) -> str:
        if not self.checkpoint.calibrated:
            raise ScoringError("checkpoint has no calibrated threshold")
        return classify(score, self.threshold)


def anomaly_score(s: BehaviorSequence, checkpoint: ModelCheckpoint, **options) -> float:
    """Score one featurized sequence."""
    return Detector(checkpoint, **options).score_sequences([s])[0].score


def calibrate_threshold(
    validation: Sequence[BehaviorSequence], checkpoint: ModelCheckpoint, quantile: float = 0.95
) -> Threshold:
    return Detector(checkpoint).calibrate(validation, quantile)
