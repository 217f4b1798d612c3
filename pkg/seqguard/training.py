"""Reconstruction training with loss-guided dynamic masking."""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .checkpoint import ModelCheckpoint
from .domain import BehaviorSequence, EncodedSequence, build_vocabulary, encode_sequence
from .model import ModelConfig, Params, SequenceBatch, TransformerAutoencoder, make_batch
from .utils import MASK_STRATEGIES

logger = logging.getLogger(__name__)

EPSILON = 1e-9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8


class GradientError(RuntimeError):
    """A gradient came out non-finite."""


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, epoch: int, batch: int, last_finite: float):
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch} "
            f"(last finite loss {last_finite:.6f})"
        )
        self.epoch = epoch
        self.batch = batch
        self.last_finite = last_finite


# ---------------------------------------------------------------------------
# Loss vector and mask plans
# ---------------------------------------------------------------------------


@dataclass
class LossVector:
    """Per-control mean reconstruction loss and the occurrence counts behind it."""

    values: np.ndarray
    counts: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "LossVector":
        return cls(np.zeros(size, dtype=np.float64), np.zeros(size, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.values)

    def variance(self) -> float:
        return float(np.var(self.values))

    def sentinel(self) -> float:
        return float(np.max(self.values)) if self.size else 0.0


def update_loss_vector(
    prev: LossVector, token_ids: np.ndarray, losses: np.ndarray
) -> LossVector:
    """Average one epoch's per-position losses by control.

    Tokens outside ``0..size-1`` (MASK, UNK) are ignored; controls that did
    not occur keep their previous value.
    """
    token_ids = np.asarray(token_ids).reshape(-1)
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    known = (token_ids >= 0) & (token_ids < prev.size)
    counts = np.bincount(token_ids[known], minlength=prev.size)
    sums = np.bincount(token_ids[known], weights=losses[known], minlength=prev.size)
    seen = counts > 0
    values = prev.values.copy()
    values[seen] = sums[seen] / counts[seen]
    return LossVector(values, counts.astype(np.int64))


def mask_count(n: int, ratio: float) -> int:
    return int(math.floor(n * ratio + 1e-9))


def build_mask_plan(
    token_ids: np.ndarray,
    loss_vector: LossVector,
    ratio: float,
    unk_loss: Optional[float] = None,
) -> np.ndarray:
    """Mask the ``floor(n * ratio)`` positions whose controls have the highest loss.

    Ties go to the lower position index. Unknown tokens use ``unk_loss``, by
    default the current maximum of the loss vector.
    """
    token_ids = np.asarray(token_ids)
    n = len(token_ids)
    sentinel = loss_vector.sentinel() if unk_loss is None else float(unk_loss)
    known = token_ids < loss_vector.size
    values = np.full(n, sentinel, dtype=np.float64)
    values[known] = loss_vector.values[token_ids[known]]

    plan = np.zeros(n, dtype=np.int64)
    k = mask_count(n, ratio)
    if k:
        plan[np.argsort(-values, kind="stable")[:k]] = 1
    return plan


def random_mask_plan(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    plan = np.zeros(n, dtype=np.int64)
    k = mask_count(n, ratio)
    if k:
        plan[rng.choice(n, size=k, replace=False)] = 1
    return plan


# ---------------------------------------------------------------------------
# Objective and gradients
# ---------------------------------------------------------------------------


def position_losses(probs: np.ndarray, token_ids: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Cross-entropy per position; ``-log eps`` for unknown targets, 0 at padding."""
    vocab = probs.shape[-1]
    known = token_ids < vocab
    safe = np.where(known, token_ids, 0)
    p = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
    losses = -np.log(np.maximum(p.astype(np.float64), EPSILON))
    losses = np.where(known, losses, -math.log(EPSILON))
    return np.where(valid, losses, 0.0)


def objective_coefficients(batch: SequenceBatch, masked: bool) -> np.ndarray:
    """Per-position weights of the objective.

    Each sequence contributes the mean over its positions, sequences are
    averaged, and in masked epochs the terms are multiplied by the mask with
    no renormalization.
    """
    lengths = np.maximum(batch.lengths, 1).astype(np.float64)
    coef = batch.valid / lengths[:, None] / batch.shape[0]
    if masked:
        mask = batch.mask if batch.mask is not None else np.zeros(batch.shape, dtype=bool)
        coef = coef * mask
    return coef


def reconstruction_objective(
    probs: np.ndarray, batch: SequenceBatch, epoch: int, no_mask_epochs: int
) -> float:
    """Objective value for one batch at ``epoch`` (1-based)."""
    masked = epoch > no_mask_epochs and batch.mask is not None
    coef = objective_coefficients(batch, masked)
    return float(np.sum(coef * position_losses(probs, batch.token_ids, batch.valid)))


def objective_gradient(probs: np.ndarray, batch: SequenceBatch, coef: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(coef * CE)`` with respect to the logits."""
    vocab = probs.shape[-1]
    known = batch.token_ids < vocab
    safe = np.where(known, batch.token_ids, 0)
    target_p = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
    # the eps floor makes CE flat below eps
    active = known & (target_p > EPSILON)
    scale = (coef * active).astype(probs.dtype)
    d_logits = probs * scale[..., None]
    np.put_along_axis(
        d_logits,
        safe[..., None],
        np.take_along_axis(d_logits, safe[..., None], axis=-1) - scale[..., None],
        axis=-1,
    )
    return d_logits


def compute_gradients(
    model: TransformerAutoencoder, probs: np.ndarray, batch: SequenceBatch, coef: np.ndarray
) -> Params:
    """Exact gradients of the objective for the model's last forward pass."""
    grads = model.backward(objective_gradient(probs, batch, coef))
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"non-finite gradient for parameter group {name!r}")
    return grads


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Params, grads: Params, state: AdamState, lr: float):
    """One Adam update, applied to ``params`` in place."""
    beta1, beta2 = ADAM_BETAS
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, grad in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        params[name] = (params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)).astype(
            params[name].dtype
        )
    return params, state


def check_gradients(
    model: TransformerAutoencoder,
    batch: SequenceBatch,
    masked: bool = False,
    step: float = 1e-5,
) -> Dict[str, float]:
    """Compare analytic gradients with central differences in double precision.

    Returns:
        Relative error per parameter group, ``|a - n| / (|a| + |n|)`` in L2 norm
    """
    replica = TransformerAutoencoder(model.config, params=model.snapshot()).astype(np.float64)
    coef = objective_coefficients(batch, masked)

    def objective() -> float:
        probs, _ = replica.forward(batch, training=False)
        return float(np.sum(coef * position_losses(probs, batch.token_ids, batch.valid)))

    probs, _ = replica.forward(batch, training=False)
    analytic = compute_gradients(replica, probs, batch, coef)

    errors: Dict[str, float] = {}
    for name, param in replica.parameters.items():
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = objective()
            flat[i] = original - step
            minus = objective()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
        diff = np.linalg.norm(analytic[name] - numeric)
        scale = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
        errors[name] = float(diff / scale) if scale > 1e-12 else float(diff)
    return errors


def position_loss_rows(
    model: TransformerAutoencoder, encoded: Sequence[EncodedSequence], batch_size: int = 512
) -> List[np.ndarray]:
    """Unmasked, eval-mode per-position losses for each sequence."""
    rows: List[np.ndarray] = []
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start : start + batch_size]
        batch = make_batch(chunk)
        probs, _ = model.forward(batch, training=False)
        losses = position_losses(probs, batch.token_ids, batch.valid)
        rows.extend(losses[b, : len(s)] for b, s in enumerate(chunk))
    return rows


def mean_reconstruction_loss(
    model: TransformerAutoencoder, encoded: Sequence[EncodedSequence], batch_size: int = 512
) -> float:
    """Mean over sequences of the per-sequence mean position loss."""
    rows = position_loss_rows(model, encoded, batch_size)
    return float(np.mean([row.mean() for row in rows])) if rows else float("nan")


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 300
    no_mask_epochs: int = 5
    mask_ratio: float = 0.4
    batch_size: int = 64
    learning_rate: float = 0.001
    patience: int = 10
    seed: int = 42
    mask_strategy: str = "ldms"
    unk_loss: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.no_mask_epochs < 0:
            raise ValueError(f"no_mask_epochs must be >= 0, got {self.no_mask_epochs}")
        if self.mask_strategy == "ldms" and self.no_mask_epochs < 1:
            raise ValueError("loss-guided masking needs no_mask_epochs >= 1")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.mask_strategy!r}")

    @classmethod
    def from_config(cls, config: Dict, ldms: bool = True) -> "TrainConfig":
        """Build from the ``train`` section; ``ldms=False`` turns masking off."""
        section = dict(config["train"])
        if not ldms:
            section["mask_strategy"] = "none"
        return cls(seed=int(config.get("seed", 42)), **section)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    loss_variance: float
    masked_positions: int


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(r) for r in self.records],
            columns=["epoch", "train_loss", "valid_loss", "loss_variance", "masked_positions"],
        )

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


class Trainer:
    """Fits a ``TransformerAutoencoder`` on featurized training sequences.

    Epochs ``1..N`` train on plain reconstruction. From epoch ``N+1`` each
    sequence is masked at the positions whose controls had the highest mean
    loss in the previous epoch. After every epoch the loss vector is rebuilt
    from an unmasked, eval-mode reconstruction of the training sequences, the
    same pass scoring uses.
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig):
        self.model_config = model_config
        self.train_config = train_config
        self.history = TrainingHistory()
        self.model: Optional[TransformerAutoencoder] = None

    def _schedule(self):
        cfg = self.train_config
        strategy = cfg.mask_strategy
        if strategy in ("ldms", "topk", "random") and cfg.mask_ratio == 0:
            logger.warning(f"mask_ratio is 0: '{strategy}' masking reduces to plain reconstruction")
            strategy = "none"
        no_mask = {"ldms": cfg.no_mask_epochs, "topk": 1, "random": 0}.get(strategy, cfg.epochs)
        return strategy, no_mask

    def _masks(self, strategy, chunk, loss_vector, rng) -> List[np.ndarray]:
        cfg = self.train_config
        if strategy == "random":
            return [random_mask_plan(len(s), cfg.mask_ratio, rng) for s in chunk]
        return [
            build_mask_plan(s.token_ids, loss_vector, cfg.mask_ratio, cfg.unk_loss) for s in chunk
        ]

    def _refresh_loss_vector(self, model, loss_vector, encoded, tokens) -> LossVector:
        rows = position_loss_rows(model, encoded, self.train_config.batch_size)
        return update_loss_vector(loss_vector, tokens, np.concatenate(rows))

    def fit(
        self, train: Sequence[BehaviorSequence], valid: Sequence[BehaviorSequence]
    ) -> ModelCheckpoint:
        """Train and return an uncalibrated checkpoint.

        Raises:
            ValueError: If the training set is empty
            TrainingDivergedError: If the loss stops being finite
        """
        cfg = self.train_config
        vocabulary = build_vocabulary(train)
        model_config = replace(self.model_config, vocab_size=vocabulary.size)
        init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        model = TransformerAutoencoder(model_config, seed=init_seed)
        self.model = model
        shuffle_rng = np.random.default_rng(shuffle_seed)

        enc_train = [encode_sequence(s, vocabulary) for s in train if len(s)]
        enc_valid = [encode_sequence(s, vocabulary) for s in valid if len(s)]
        strategy, no_mask_epochs = self._schedule()
        train_tokens = np.concatenate([s.token_ids for s in enc_train])

        loss_vector = LossVector.zeros(vocabulary.size)
        state = AdamState()
        best_loss, best_params, wait = math.inf, model.snapshot(), 0
        last_finite = math.nan
        self.history = TrainingHistory()

        logger.info(
            f"Training {model.parameter_count()} parameters on {len(enc_train)} sequences "
            f"(strategy={strategy}, N={no_mask_epochs}, r={cfg.mask_ratio})"
        )

        for epoch in range(1, cfg.epochs + 1):
            masked = strategy != "none" and epoch > no_mask_epochs
            order = shuffle_rng.permutation(len(enc_train))
            epoch_loss, masked_positions = 0.0, 0

            for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
                chunk = [enc_train[i] for i in order[start : start + cfg.batch_size]]
                masks = self._masks(strategy, chunk, loss_vector, shuffle_rng) if masked else None
                batch = make_batch(chunk, masks)
                probs, _ = model.forward(batch, training=True)
                losses = position_losses(probs, batch.token_ids, batch.valid)
                coef = objective_coefficients(batch, masked)
                loss = float(np.sum(coef * losses))
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, batch_index, last_finite)
                last_finite = loss

                grads = compute_gradients(model, probs, batch, coef)
                adam_step(model.parameters, grads, state, cfg.learning_rate)

                epoch_loss += loss * len(chunk)
                if masks is not None:
                    masked_positions += int(batch.mask.sum())

            loss_vector = self._refresh_loss_vector(model, loss_vector, enc_train, train_tokens)
            train_loss = epoch_loss / len(enc_train)
            valid_loss = mean_reconstruction_loss(model, enc_valid, cfg.batch_size) if enc_valid else train_loss
            self.history.records.append(
                EpochRecord(epoch, train_loss, valid_loss, loss_vector.variance(), masked_positions)
            )
            logger.info(
                f"epoch {epoch}: train={train_loss:.4f} valid={valid_loss:.4f} "
                f"var={loss_vector.variance():.4f} masked={masked_positions}"
            )

            if valid_loss < best_loss:
                best_loss, best_params, wait = valid_loss, model.snapshot(), 0
                self.history.best_epoch = epoch
            else:
                wait += 1
                if wait >= cfg.patience:
                    self.history.stopped_early = True
                    logger.info(f"Early stop at epoch {epoch}; best epoch {self.history.best_epoch}")
                    break

        model.load_parameters(best_params)
        loss_vector = self._refresh_loss_vector(model, loss_vector, enc_train, train_tokens)
        logger.info(f"Final loss vector variance {loss_vector.variance():.4f}")

        return ModelCheckpoint(
            model_config=model_config,
            vocabulary=vocabulary,
            parameters=model.snapshot(),
            loss_vector=loss_vector.values.copy(),
            threshold=math.nan,
        )


def fit(
    train: Sequence[BehaviorSequence],
    valid: Sequence[BehaviorSequence],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> ModelCheckpoint:
    return Trainer(model_config, train_config).fit(train, valid)
