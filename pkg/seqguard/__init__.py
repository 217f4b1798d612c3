"""SeqGuard CLI - Detect anomalous behavior sequences in smart-home event logs."""

__version__ = "1.0.0"
__author__ = "SeqGuard Team"
__email__ = "team@seqguard.dev"

from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .domain import Behavior, BehaviorSequence, Vocabulary, featurize_log, read_event_log
from .model import ModelConfig, TransformerAutoencoder
from .scoring import Detector
from .training import Trainer, TrainConfig
from .utils import load_config, setup_logging

__all__ = [
    "Behavior",
    "BehaviorSequence",
    "Vocabulary",
    "featurize_log",
    "read_event_log",
    "ModelConfig",
    "TransformerAutoencoder",
    "Trainer",
    "TrainConfig",
    "ModelCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "Detector",
    "setup_logging",
    "load_config",
]
