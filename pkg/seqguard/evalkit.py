"""Detection metrics, ablation grid and interpretability exports."""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sklearn.metrics import confusion_matrix
from sklearn.metrics.pairwise import cosine_similarity

from .checkpoint import ModelCheckpoint
from .domain import ANOMALY_KINDS, BehaviorSequence, encode_sequence
from .model import make_batch, sinusoidal_table
from .pipeline import ABLATION_VARIANTS, featurize, train_detector, variant_config
from .scoring import ABNORMAL, Detector
from .synthgen import AnomalyLabel, read_labels
from .utils import worker_count

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["kind", "tp", "fp", "tn", "fn", "recall", "precision", "f1", "fpr", "fnr"]
TIME_GRIDS = {
    "hours": ("hour", list(range(24))),
    "days": ("day", list(range(7))),
    # hour buckets 0..24, expressed in minutes
    "durations": ("duration", [60 * h for h in range(25)]),
}


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


@dataclass
class KindMetrics:
    kind: str
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def fpr(self) -> float:
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def fnr(self) -> float:
        return _ratio(self.fn, self.fn + self.tp)

    def as_row(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in METRIC_COLUMNS}


@dataclass
class DetectionReport:
    """Metrics per anomaly kind plus an overall row.

    Each kind is scored on its own anomalies plus every normal sequence; kinds
    with no labelled anomaly are absent.
    """

    kinds: Dict[str, KindMetrics] = field(default_factory=dict)
    overall: Optional[KindMetrics] = None

    def __getitem__(self, kind: str) -> KindMetrics:
        return self.kinds[kind]

    def f1(self, kind: str) -> float:
        return self.kinds[kind].f1 if kind in self.kinds else float("nan")

    def to_frame(self) -> pd.DataFrame:
        rows = [m.as_row() for m in self.kinds.values()]
        if self.overall is not None:
            rows.append(self.overall.as_row())
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)

    @classmethod
    def from_predictions(
        cls, abnormal: Sequence[bool], labels: Sequence[AnomalyLabel]
    ) -> "DetectionReport":
        """Count outcomes from per-sequence verdicts and anomaly labels."""
        predicted = np.asarray(abnormal, dtype=bool)
        kind_of = {label.seq_index: label.kind for label in labels}
        out_of_range = [i for i in kind_of if not 0 <= i < len(predicted)]
        if out_of_range:
            raise ValueError(f"labels point past the last sequence: {out_of_range[:5]}")
        kinds = np.array([kind_of.get(i, "") for i in range(len(predicted))])
        truth = kinds != ""

        def count(name: str, selected: np.ndarray) -> KindMetrics:
            tn, fp, fn, tp = confusion_matrix(
                truth[selected], predicted[selected], labels=[False, True]
            ).ravel()
            return KindMetrics(name, int(tp), int(fp), int(tn), int(fn))

        report = cls()
        for kind in ANOMALY_KINDS:
            if np.any(kinds == kind):
                report.kinds[kind] = count(kind, (kinds == kind) | ~truth)
        report.overall = count("ALL", np.ones(len(predicted), dtype=bool))
        return report

    @classmethod
    def from_score_records(
        cls, records: Sequence[Dict[str, Any]], labels: Sequence[AnomalyLabel]
    ) -> "DetectionReport":
        ordered = sorted(records, key=lambda r: r["seq_index"])
        return cls.from_predictions([r["verdict"] == ABNORMAL for r in ordered], labels)


def evaluate_detection(
    sequences: Sequence[BehaviorSequence],
    labels: Sequence[AnomalyLabel],
    detector: Detector,
    threshold: Optional[float] = None,
) -> DetectionReport:
    """Score test sequences and count detections per anomaly kind."""
    threshold = detector.threshold if threshold is None else threshold
    scores = detector.scores(sequences)
    report = DetectionReport.from_predictions(scores > threshold, labels)
    logger.info(
        "Detection F1: " + ", ".join(f"{k}={m.f1:.3f}" for k, m in report.kinds.items())
    )
    return report


def read_score_records(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Score file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def recount(score_file: Union[str, Path], labels_file: Union[str, Path]) -> DetectionReport:
    """Rebuild a detection report from a written score file."""
    return DetectionReport.from_score_records(read_score_records(score_file), read_labels(labels_file))


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------


@dataclass
class CaseTrace:
    controls: List[str]
    attention: np.ndarray
    losses: np.ndarray
    weights: np.ndarray

    def write(self, prefix: Union[str, Path]) -> List[Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        names = [f"{i}:{c}" for i, c in enumerate(self.controls)]
        attention_path = prefix.with_name(prefix.name + "_attention.csv")
        loss_path = prefix.with_name(prefix.name + "_loss.csv")
        pd.DataFrame(self.attention, index=names, columns=names).to_csv(attention_path)
        pd.DataFrame(
            {
                "position": range(len(self.controls)),
                "control": self.controls,
                "loss": self.losses,
                "weight": self.weights,
            }
        ).to_csv(loss_path, index=False)
        return [attention_path, loss_path]


def export_case_trace(s: BehaviorSequence, detector: Detector) -> CaseTrace:
    """Final encoder layer attention (head-averaged) and per-position losses for one sequence."""
    scored = detector.score_sequences([s])[0]
    batch = make_batch([encode_sequence(s, detector.checkpoint.vocabulary)])
    detector.model.forward(batch, training=False)
    attention = detector.model.final_encoder_attention()[0].astype(np.float64)
    return CaseTrace(list(s.controls), attention, scored.losses, scored.weights)


def embedding_similarity(
    checkpoint: ModelCheckpoint, controls: Sequence[str], times: str = "hours"
) -> pd.DataFrame:
    """Cosine similarity between control embeddings and weighted time encodings.

    Args:
        checkpoint: Trained checkpoint
        controls: Controls from the vocabulary
        times: ``hours``, ``days`` or ``durations``

    Returns:
        Frame indexed by control with one column per time value
    """
    if times not in TIME_GRIDS:
        raise ValueError(f"times must be one of {sorted(TIME_GRIDS)}, got {times!r}")
    level, values = TIME_GRIDS[times]
    weight_name = f"w_{level}"
    if weight_name not in checkpoint.parameters:
        raise ValueError(f"checkpoint was trained without the {level} time level")
    unknown = [c for c in controls if c not in checkpoint.vocabulary]
    if unknown:
        raise ValueError(f"controls not in vocabulary: {unknown}")

    table = checkpoint.parameters["embedding"].astype(np.float64)
    rows = table[[checkpoint.vocabulary.id_of(c) for c in controls]]
    weight = float(checkpoint.parameters[weight_name][0])
    encodings = weight * sinusoidal_table(np.array(values), table.shape[1])
    return pd.DataFrame(cosine_similarity(rows, encodings), index=list(controls), columns=values)


@dataclass
class LossDistribution:
    per_control: pd.DataFrame
    histogram: pd.DataFrame
    spearman: float
    p_value: float

    def write(self, prefix: Union[str, Path]) -> List[Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        control_path = prefix.with_name(prefix.name + "_loss_by_control.csv")
        histogram_path = prefix.with_name(prefix.name + "_loss_histogram.csv")
        self.per_control.to_csv(control_path, index=False)
        self.histogram.to_csv(histogram_path, index=False)
        return [control_path, histogram_path]


def export_loss_distribution(
    detector: Detector, sequences: Sequence[BehaviorSequence], bins: int = 10
) -> LossDistribution:
    """Occurrence count and mean loss per control, a histogram of the means and their rank correlation."""
    scored = detector.score_sequences(sequences)
    frame = pd.DataFrame(
        {
            "control": [c for r in scored for c in r.controls],
            "loss": np.concatenate([r.losses for r in scored]) if scored else [],
        }
    )
    per_control = (
        frame.groupby("control")["loss"]
        .agg(count="count", mean_loss="mean")
        .reset_index()
        .sort_values(["count", "control"], ascending=[False, True], kind="mergesort")
        .reset_index(drop=True)
    )
    counts, edges = np.histogram(per_control["mean_loss"].to_numpy(), bins=bins)
    histogram = pd.DataFrame({"bin_start": edges[:-1], "bin_end": edges[1:], "count": counts})
    if len(per_control) > 1:
        rho, p_value = spearmanr(per_control["count"], per_control["mean_loss"])
    else:
        rho, p_value = float("nan"), float("nan")
    return LossDistribution(per_control, histogram, float(rho), float(p_value))


# ---------------------------------------------------------------------------
# Ablation and latency
# ---------------------------------------------------------------------------


def _run_variant(args) -> Dict[str, Any]:
    variant, config, train, valid, test, labels = args
    run = train_detector(train, valid, config)
    detector = Detector(run.checkpoint)
    report = evaluate_detection(featurize(test, run.checkpoint.settings), labels, detector)
    ldms, ttpe, nwrl = ABLATION_VARIANTS[variant]
    row: Dict[str, Any] = {"variant": variant, "ldms": ldms, "ttpe": ttpe, "nwrl": nwrl}
    row.update({kind: report.f1(kind) for kind in ANOMALY_KINDS})
    return row


def run_ablation(
    train,
    valid,
    test,
    labels: Sequence[AnomalyLabel],
    config: Dict[str, Any],
    variants: Sequence[str] = tuple(ABLATION_VARIANTS),
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """Train and evaluate each ablation variant; one F1 column per anomaly kind.

    Variant seeds are spawned from the root seed. With more than one worker the
    variants run in separate processes.
    """
    seeds = np.random.SeedSequence(int(config["seed"])).spawn(len(variants))
    jobs = [
        (v, variant_config(config, v, int(seed.generate_state(1)[0])), train, valid, test, list(labels))
        for v, seed in zip(variants, seeds)
    ]
    workers = min(workers or worker_count(), len(jobs))
    logger.info(f"Running {len(jobs)} ablation variants on {workers} worker(s)")
    if workers <= 1:
        rows = [_run_variant(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_variant, jobs))
    return pd.DataFrame(rows, columns=["variant", "ldms", "ttpe", "nwrl", *ANOMALY_KINDS])


def measure_latency(detector: Detector, s: BehaviorSequence, repeats: int = 50) -> float:
    """Median wall time in milliseconds to score one sequence."""
    detector.score_sequences([s])
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        detector.score_sequences([s])
        timings.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(timings))
