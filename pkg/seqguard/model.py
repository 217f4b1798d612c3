"""NumPy transformer autoencoder with time-aware position embeddings.

Every layer keeps the activations of its last forward pass and exposes a
``backward`` that writes parameter gradients into a dict keyed like
``TransformerAutoencoder.parameters``.
"""

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import EncodedSequence

logger = logging.getLogger(__name__)

TIME_LEVELS = ("order", "hour", "day", "duration")
INITIAL_LEVEL_WEIGHTS = {"order": 0.1, "hour": 0.4, "day": 0.4, "duration": 0.7}

Params = Dict[str, np.ndarray]


class ConfigurationError(ValueError):
    """Raised when a model configuration is inconsistent."""


@dataclass
class ModelConfig:
    """Shape of the autoencoder.

    ``time_levels`` selects which temporal features feed the position
    embedding; ``("order",)`` is the plain positional variant.
    """

    embed_dim: int = 64
    layers: int = 3
    heads: int = 4
    ffn_dim: Optional[int] = None
    vocab_size: int = 1
    max_seq_len: int = 64
    dropout: float = 0.1
    time_levels: Tuple[str, ...] = TIME_LEVELS

    def __post_init__(self):
        self.time_levels = tuple(self.time_levels)
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.embed_dim
        if self.embed_dim <= 0 or self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be positive and even, got {self.embed_dim}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(
                f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})"
            )
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.ffn_dim < 1:
            raise ConfigurationError(f"ffn_dim must be >= 1, got {self.ffn_dim}")
        if self.vocab_size < 1:
            raise ConfigurationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.time_levels or "order" not in self.time_levels:
            raise ConfigurationError("time_levels must include 'order'")
        unknown = set(self.time_levels) - set(TIME_LEVELS)
        if unknown:
            raise ConfigurationError(f"unknown time levels: {sorted(unknown)}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["time_levels"] = list(self.time_levels)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        return cls(**data)


def sinusoidal_table(values: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encodings of an integer array, shape ``values.shape + (d,)``."""
    if d % 2:
        raise ConfigurationError(f"encoding size must be even, got {d}")
    exponents = np.arange(0, d, 2, dtype=np.float64) / d
    angles = np.asarray(values, dtype=np.float64)[..., None] / np.power(10000.0, exponents)
    table = np.empty(angles.shape[:-1] + (d,), dtype=np.float64)
    table[..., 0::2] = np.sin(angles)
    table[..., 1::2] = np.cos(angles)
    return table


def sinusoidal_pe(value: int, d: int) -> np.ndarray:
    """Encoding of one value: ``[sin(v/10000^(2i/d)), cos(v/10000^(2i/d)), ...]``."""
    return sinusoidal_table(np.array(value), d)


@dataclass
class SequenceBatch:
    """Right-padded batch. ``valid`` is False at padding, ``mask`` True where masked."""

    token_ids: np.ndarray
    features: np.ndarray
    valid: np.ndarray
    mask: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.token_ids.shape

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def with_mask(self, mask: Optional[np.ndarray]) -> "SequenceBatch":
        if mask is not None:
            mask = np.asarray(mask, dtype=bool) & self.valid
        return SequenceBatch(self.token_ids, self.features, self.valid, mask)


def make_batch(
    sequences: Sequence[EncodedSequence], masks: Optional[Sequence[np.ndarray]] = None
) -> SequenceBatch:
    """Pad encoded sequences into one batch."""
    if not sequences:
        raise ValueError("cannot batch zero sequences")
    if any(len(s) == 0 for s in sequences):
        raise ValueError("cannot batch an empty sequence")

    n = max(len(s) for s in sequences)
    token_ids = np.zeros((len(sequences), n), dtype=np.int64)
    features = np.zeros((len(sequences), n, 4), dtype=np.int64)
    valid = np.zeros((len(sequences), n), dtype=bool)
    mask = np.zeros((len(sequences), n), dtype=bool) if masks is not None else None

    for b, s in enumerate(sequences):
        k = len(s)
        token_ids[b, :k] = s.token_ids
        features[b, :k] = s.features
        valid[b, :k] = True
        if masks is not None:
            mask[b, :k] = np.asarray(masks[b], dtype=bool)[:k]

    return SequenceBatch(token_ids, features, valid, mask)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


class Dropout:
    def __init__(self, rate: float):
        self.rate = rate
        self._keep: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, training: bool, rng: np.random.Generator) -> np.ndarray:
        if not training or self.rate == 0:
            self._keep = None
            return x
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._keep = keep
        return x * keep

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._keep is None else dy * self._keep


class TimeAwareEmbedding:
    """Control embedding plus weighted sinusoidal encodings of the time levels."""

    def __init__(self, params: Params, config: ModelConfig, mask_id: int):
        self.params = params
        self.config = config
        self.mask_id = mask_id
        self._tokens: Optional[np.ndarray] = None
        self._encodings: Dict[str, np.ndarray] = {}

    def forward(self, batch: SequenceBatch) -> np.ndarray:
        table = self.params["embedding"]
        tokens = batch.token_ids
        if batch.mask is not None:
            tokens = np.where(batch.mask, self.mask_id, tokens)
        h = table[tokens]
        self._tokens = tokens
        self._encodings = {}
        for level in self.config.time_levels:
            column = TIME_LEVELS.index(level)
            encoding = sinusoidal_table(batch.features[..., column], self.config.embed_dim)
            encoding = encoding.astype(table.dtype)
            self._encodings[level] = encoding
            h = h + self.params[f"w_{level}"][0] * encoding
        return h

    def backward(self, dh: np.ndarray, grads: Params) -> None:
        table = self.params["embedding"]
        d_table = np.zeros_like(table)
        np.add.at(d_table, self._tokens.reshape(-1), dh.reshape(-1, table.shape[1]))
        grads["embedding"] = d_table
        for level, encoding in self._encodings.items():
            grads[f"w_{level}"] = np.array([np.sum(dh * encoding)], dtype=table.dtype)


class MultiHeadAttention:
    def __init__(self, params: Params, prefix: str, config: ModelConfig):
        self.params = params
        self.prefix = prefix
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.scale = 1.0 / math.sqrt(config.head_dim)
        self.cache: Dict[str, np.ndarray] = {}

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, _, n, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, self.heads * self.head_dim)

    def forward(self, x: np.ndarray, valid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = self.prefix
        q = self._split(x @ self.params[p + "wq"])
        k = self._split(x @ self.params[p + "wk"])
        v = self._split(x @ self.params[p + "wv"])

        scores = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        scores = np.where(valid[:, None, None, :], scores, -np.inf)
        weights = softmax(scores).astype(x.dtype)
        context = self._merge(weights @ v)
        out = context @ self.params[p + "wo"]

        self.cache = {"x": x, "q": q, "k": k, "v": v, "weights": weights, "context": context}
        return out, weights

    def backward(self, dout: np.ndarray, grads: Params) -> np.ndarray:
        p = self.prefix
        c = self.cache
        d = dout.shape[-1]

        grads[p + "wo"] = c["context"].reshape(-1, d).T @ dout.reshape(-1, d)
        d_context = self._split(dout @ self.params[p + "wo"].T)

        weights = c["weights"]
        d_weights = d_context @ c["v"].transpose(0, 1, 3, 2)
        dv = weights.transpose(0, 1, 3, 2) @ d_context
        d_scores = weights * (d_weights - np.sum(d_weights * weights, axis=-1, keepdims=True))
        d_scores = d_scores * self.scale
        dq = d_scores @ c["k"]
        dk = d_scores.transpose(0, 1, 3, 2) @ c["q"]

        x_flat = c["x"].reshape(-1, d)
        dx = np.zeros_like(c["x"])
        for name, grad in (("wq", dq), ("wk", dk), ("wv", dv)):
            merged = self._merge(grad)
            grads[p + name] = x_flat.T @ merged.reshape(-1, d)
            dx += merged @ self.params[p + name].T
        return dx


class FeedForward:
    def __init__(self, params: Params, prefix: str):
        self.params = params
        self.prefix = prefix
        self.cache: Dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        p = self.prefix
        pre = x @ self.params[p + "ffn_w1"] + self.params[p + "ffn_b1"]
        hidden = np.maximum(pre, 0)
        self.cache = {"x": x, "pre": pre, "hidden": hidden}
        return hidden @ self.params[p + "ffn_w2"] + self.params[p + "ffn_b2"]

    def backward(self, dout: np.ndarray, grads: Params) -> np.ndarray:
        p = self.prefix
        c = self.cache
        d, f = self.params[p + "ffn_w1"].shape
        grads[p + "ffn_w2"] = c["hidden"].reshape(-1, f).T @ dout.reshape(-1, d)
        grads[p + "ffn_b2"] = dout.reshape(-1, d).sum(axis=0)
        d_hidden = (dout @ self.params[p + "ffn_w2"].T) * (c["pre"] > 0)
        grads[p + "ffn_w1"] = c["x"].reshape(-1, d).T @ d_hidden.reshape(-1, f)
        grads[p + "ffn_b1"] = d_hidden.reshape(-1, f).sum(axis=0)
        return d_hidden @ self.params[p + "ffn_w1"].T


class TransformerLayer:
    """``u = x + Attn(x)``, ``y = u + FFN(u)`` with dropout on both branches."""

    def __init__(self, params: Params, prefix: str, config: ModelConfig):
        self.prefix = prefix
        self.attention = MultiHeadAttention(params, prefix, config)
        self.ffn = FeedForward(params, prefix)
        self.attention_dropout = Dropout(config.dropout)
        self.ffn_dropout = Dropout(config.dropout)
        self.attention_weights: Optional[np.ndarray] = None

    def forward(
        self, x: np.ndarray, valid: np.ndarray, training: bool, rng: np.random.Generator
    ) -> np.ndarray:
        attended, self.attention_weights = self.attention.forward(x, valid)
        u = x + self.attention_dropout.forward(attended, training, rng)
        return u + self.ffn_dropout.forward(self.ffn.forward(u), training, rng)

    def backward(self, dy: np.ndarray, grads: Params) -> np.ndarray:
        du = dy + self.ffn.backward(self.ffn_dropout.backward(dy), grads)
        return du + self.attention.backward(self.attention_dropout.backward(du), grads)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Draw initial parameters.

    Matrices are zero-mean normal with std ``1/sqrt(fan_in)``; residual output
    projections are further scaled by ``1/sqrt(2 * total layers)`` since the
    layers carry no normalization.
    """
    d, f, c = config.embed_dim, config.ffn_dim, config.vocab_size
    residual_scale = 1.0 / np.sqrt(2.0 * 2 * config.layers)

    def normal(shape, fan_in, scale=1.0):
        return (rng.standard_normal(shape) * scale / np.sqrt(fan_in)).astype(np.float32)

    params: Params = {"embedding": normal((c + 2, d), d)}
    for level in config.time_levels:
        params[f"w_{level}"] = np.array([INITIAL_LEVEL_WEIGHTS[level]], dtype=np.float32)

    for stack in ("enc", "dec"):
        for i in range(config.layers):
            p = f"{stack}{i}."
            params[p + "wq"] = normal((d, d), d)
            params[p + "wk"] = normal((d, d), d)
            params[p + "wv"] = normal((d, d), d)
            params[p + "wo"] = normal((d, d), d, residual_scale)
            params[p + "ffn_w1"] = normal((d, f), d)
            params[p + "ffn_b1"] = np.zeros(f, dtype=np.float32)
            params[p + "ffn_w2"] = normal((f, d), f, residual_scale)
            params[p + "ffn_b2"] = np.zeros(d, dtype=np.float32)

    params["w_h"] = normal((c, d), d)
    return params


class TransformerAutoencoder:
    """Encoder and decoder stacks of identical layers over the TTPE embedding.

    The decoder is non-autoregressive: it self-attends over the encoder
    output with the same padding mask. Output row ``i`` is a distribution over
    the ``vocab_size`` controls (MASK and UNK are never predicted).
    """

    def __init__(
        self,
        config: ModelConfig,
        seed: Optional[int] = None,
        params: Optional[Params] = None,
    ):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.parameters: Params = params if params is not None else init_parameters(config, self.rng)
        self.mask_id = config.vocab_size
        self.unk_id = config.vocab_size + 1
        self.op_counter: Counter = Counter()
        self._build()

    def _build(self) -> None:
        self.embedding = TimeAwareEmbedding(self.parameters, self.config, self.mask_id)
        self.encoder = [TransformerLayer(self.parameters, f"enc{i}.", self.config) for i in range(self.config.layers)]
        self.decoder = [TransformerLayer(self.parameters, f"dec{i}.", self.config) for i in range(self.config.layers)]
        self._decoded: Optional[np.ndarray] = None

    @property
    def dtype(self):
        return self.parameters["embedding"].dtype

    def astype(self, dtype) -> "TransformerAutoencoder":
        """Cast every parameter in place, e.g. to float64 for gradient checks."""
        for name in list(self.parameters):
            self.parameters[name] = self.parameters[name].astype(dtype)
        self._build()
        return self

    def load_parameters(self, params: Params) -> None:
        """Replace parameter values, keeping the shared dict the layers read."""
        missing = set(self.parameters) ^ set(params)
        if missing:
            raise ConfigurationError(f"parameter names differ: {sorted(missing)}")
        for name, value in params.items():
            if value.shape != self.parameters[name].shape:
                raise ConfigurationError(
                    f"{name}: shape {value.shape} != {self.parameters[name].shape}"
                )
            self.parameters[name] = np.array(value, dtype=self.dtype, copy=True)

    def snapshot(self) -> Params:
        return {name: value.copy() for name, value in self.parameters.items()}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters.values()))

    def forward(self, batch: SequenceBatch, training: bool = False) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Reconstruct a batch.

        Returns:
            Probabilities ``(B, n, vocab_size)`` and the attention weights of
            every layer, encoder layers first, each ``(B, heads, n, n)``
        """
        if batch.token_ids.shape[1] > self.config.max_seq_len:
            raise ConfigurationError(
                f"sequence length {batch.token_ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        h = self.embedding.forward(batch)
        for layer in self.encoder + self.decoder:
            h = layer.forward(h, batch.valid, training, self.rng)
        self._decoded = h
        logits = h @ self.parameters["w_h"].T
        self._count_ops(batch)
        return softmax(logits), self.attention_traces

    def backward(self, d_logits: np.ndarray) -> Params:
        """Back-propagate a gradient w.r.t. the logits of the last forward pass."""
        if self._decoded is None:
            raise RuntimeError("backward called before forward")
        grads: Params = {}
        d = self.config.embed_dim
        grads["w_h"] = d_logits.reshape(-1, d_logits.shape[-1]).T @ self._decoded.reshape(-1, d)
        dh = d_logits @ self.parameters["w_h"]
        for layer in reversed(self.encoder + self.decoder):
            dh = layer.backward(dh, grads)
        self.embedding.backward(dh, grads)
        return {name: grads[name] for name in self.parameters}

    @property
    def attention_traces(self) -> List[np.ndarray]:
        return [layer.attention_weights for layer in self.encoder + self.decoder]

    def final_encoder_attention(self) -> np.ndarray:
        """Head-averaged attention of the last encoder layer, ``(B, n, n)``."""
        return self.encoder[-1].attention_weights.mean(axis=1)

    def _count_ops(self, batch: SequenceBatch) -> None:
        b, n = batch.shape
        cfg = self.config
        stacked = 2 * cfg.layers
        self.op_counter["attention"] += stacked * 4 * b * cfg.heads * n * n * cfg.head_dim
        self.op_counter["projection"] += stacked * 8 * b * n * cfg.embed_dim * cfg.embed_dim
        self.op_counter["ffn"] += stacked * 4 * b * n * cfg.embed_dim * cfg.ffn_dim
        self.op_counter["output"] += 2 * b * n * cfg.embed_dim * cfg.vocab_size

    def reset_op_counter(self) -> None:
        self.op_counter = Counter()
