"""Glue between configuration, data files, training and calibration."""

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .checkpoint import ModelCheckpoint
from .domain import Behavior, BehaviorSequence, featurize_log, read_event_log, write_event_log
from .model import TIME_LEVELS, ModelConfig
from .scoring import Detector
from .synthgen import AnomalyLabel, SyntheticDatasets, build_datasets, read_labels, write_labels
from .training import Trainer, TrainConfig, TrainingHistory

logger = logging.getLogger(__name__)

# variant -> (ldms, ttpe, nwrl)
ABLATION_VARIANTS: Dict[str, Tuple[bool, bool, bool]] = {
    "C0": (False, False, False),
    "C1": (True, True, False),
    "C2": (True, False, True),
    "C3": (False, True, True),
    "C4": (True, True, True),
}

DATASET_FILES = {
    "train": "train.{fmt}",
    "valid": "valid.{fmt}",
    "test": "test.{fmt}",
    "labels": "test_labels.csv",
}


def model_config_from(config: Dict[str, Any], vocab_size: int = 1) -> ModelConfig:
    section = config["model"]
    ttpe = config.get("ablation", {}).get("ttpe", True)
    return ModelConfig(
        embed_dim=int(section["embed_dim"]),
        layers=int(section["layers"]),
        heads=int(section["heads"]),
        ffn_dim=section.get("ffn_dim"),
        vocab_size=vocab_size,
        max_seq_len=int(section["max_seq_len"]),
        dropout=float(section["dropout"]),
        time_levels=TIME_LEVELS if ttpe else ("order",),
    )


def checkpoint_settings(config: Dict[str, Any]) -> Dict[str, Any]:
    """Settings a checkpoint needs to featurize and score new data alone."""
    data = config["data"]
    return {
        "scoring": dict(config["scoring"]),
        "ablation": dict(config["ablation"]),
        "data": {
            "window": int(data["window"]),
            "stride": int(data.get("stride", data["window"])),
            "timezone": data["timezone"],
            "duration_cap": int(data["duration_cap"]),
        },
        "seed": int(config["seed"]),
    }


def featurize(
    events: Sequence[Behavior], settings: Dict[str, Any], stride: Optional[int] = None
) -> List[BehaviorSequence]:
    """Sessionize and featurize a log with the ``data`` settings of a config or checkpoint.

    Scoring uses consecutive windows; ``stride`` gives the overlapping windows
    used for training and calibration.
    """
    data = settings["data"]
    return featurize_log(
        events,
        window=int(data["window"]),
        timezone=data.get("timezone", "UTC"),
        duration_cap=int(data.get("duration_cap", 1440)),
        stride=stride,
    )


def calibration_sequences(events: Sequence[Behavior], settings: Dict[str, Any]) -> List[BehaviorSequence]:
    """Overlapping windows of a normal log, at the configured stride."""
    data = settings["data"]
    return featurize(events, settings, int(data.get("stride", data["window"])))


def load_sequences(path: str, settings: Dict[str, Any], format: Optional[str] = None):
    return featurize(read_event_log(path, format), settings)


def variant_config(config: Dict[str, Any], variant: str, seed: Optional[int] = None) -> Dict[str, Any]:
    ldms, ttpe, nwrl = ABLATION_VARIANTS[variant]
    updated = copy.deepcopy(config)
    updated["ablation"] = {"ldms": ldms, "ttpe": ttpe, "nwrl": nwrl}
    if seed is not None:
        updated["seed"] = int(seed)
    return updated


@dataclass
class TrainedRun:
    checkpoint: ModelCheckpoint
    history: TrainingHistory


def train_detector(
    train_events: Sequence[Behavior],
    valid_events: Sequence[Behavior],
    config: Dict[str, Any],
) -> TrainedRun:
    """Train on one log, calibrate the threshold on another.

    Args:
        train_events: Normal training behaviors
        valid_events: Normal validation behaviors (early stopping and threshold)
        config: Validated configuration

    Returns:
        Calibrated checkpoint and the training history
    """
    settings = checkpoint_settings(config)
    train = calibration_sequences(train_events, settings)
    valid = calibration_sequences(valid_events, settings)
    logger.info(f"Training on {len(train)} sequences, validating on {len(valid)}")

    trainer = Trainer(
        model_config_from(config),
        TrainConfig.from_config(config, ldms=bool(config["ablation"]["ldms"])),
    )
    checkpoint = trainer.fit(train, valid)
    checkpoint.settings = settings
    Detector(checkpoint).calibrate(valid, float(config["scoring"]["quantile"]))
    return TrainedRun(checkpoint, trainer.history)


def generate_datasets(config: Dict[str, Any]) -> SyntheticDatasets:
    data = config["data"]
    return build_datasets(
        days=int(data["days"]),
        noise_rate=float(data["noise_rate"]),
        anomalies_per_category=int(data["anomalies_per_category"]),
        window=int(data["window"]),
        split=tuple(float(x) for x in data["split"]),
        seed=int(config["seed"]),
        start=data["start"],
    )


def write_datasets(datasets: SyntheticDatasets, out_dir: str, format: str = "jsonl") -> Dict[str, Path]:
    """Write the three logs and the labels file; test events carry anomaly tags."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {key: root / name.format(fmt=format) for key, name in DATASET_FILES.items()}
    for key in ("train", "valid"):
        write_event_log(getattr(datasets, key), paths[key], format)
    write_event_log(datasets.test, paths["test"], format, anomalies=datasets.tags)
    write_labels(datasets.labels, paths["labels"])
    return paths


@dataclass
class DatasetFiles:
    train: List[Behavior]
    valid: List[Behavior]
    test: List[Behavior]
    labels: List[AnomalyLabel]


def load_datasets(data_dir: str, format: str = "jsonl") -> DatasetFiles:
    root = Path(data_dir)
    paths = {key: root / name.format(fmt=format) for key, name in DATASET_FILES.items()}
    return DatasetFiles(
        train=read_event_log(paths["train"], format),
        valid=read_event_log(paths["valid"], format),
        test=read_event_log(paths["test"], format),
        labels=read_labels(paths["labels"]),
    )
