"""Self-describing binary checkpoint for trained detectors.

Layout (little-endian)::

    b"SQGD" | u16 version | u32 header length | UTF-8 JSON header
    per tensor: u16 name length | name | u8 ndim | u32 dims... | f4 data
    f8 loss vector | f8 threshold

The JSON header carries the model config, the vocabulary, free-form settings
and the tensor index.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from .domain import Vocabulary
from .model import ModelConfig, Params, TransformerAutoencoder

logger = logging.getLogger(__name__)

MAGIC = b"SQGD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    vocabulary: Vocabulary
    parameters: Params
    loss_vector: np.ndarray
    threshold: float = math.nan
    settings: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def calibrated(self) -> bool:
        return math.isfinite(self.threshold)

    def build_model(self) -> TransformerAutoencoder:
        params = {name: value.copy() for name, value in self.parameters.items()}
        return TransformerAutoencoder(self.model_config, params=params)

    def to_bytes(self) -> bytes:
        names = list(self.parameters)
        header = {
            "model_config": self.model_config.to_dict(),
            "vocabulary": list(self.vocabulary.controls),
            "settings": self.settings,
            "tensors": [{"name": n, "shape": list(self.parameters[n].shape)} for n in names],
            "loss_vector_size": int(len(self.loss_vector)),
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

        chunks = [MAGIC, struct.pack("<HI", self.version, len(header_bytes)), header_bytes]
        for name in names:
            tensor = np.ascontiguousarray(self.parameters[name], dtype="<f4")
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", tensor.ndim))
            chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            chunks.append(tensor.tobytes())
        chunks.append(np.ascontiguousarray(self.loss_vector, dtype="<f8").tobytes())
        chunks.append(struct.pack("<d", self.threshold))
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise CheckpointError("not a seqguard checkpoint (bad magic bytes)")
        version, header_len = reader.unpack("<HI")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        try:
            header = json.loads(reader.take(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header: {e}")

        parameters: Params = {}
        for entry in header["tensors"]:
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            if name != entry["name"]:
                raise CheckpointError(f"tensor {name!r} out of order (expected {entry['name']!r})")
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}I") if ndim else ()
            count = int(np.prod(shape, dtype=np.int64))
            raw = reader.take(4 * count)
            parameters[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

        size = int(header["loss_vector_size"])
        loss_vector = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        (threshold,) = reader.unpack("<d")
        if reader.remaining:
            raise CheckpointError(f"{reader.remaining} trailing bytes after checkpoint data")

        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            vocabulary=Vocabulary(header["vocabulary"]),
            parameters=parameters,
            loss_vector=loss_vector,
            threshold=float(threshold),
            settings=header.get("settings", {}),
            version=version,
        )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.offset}, "
                f"{self.remaining} left"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(ckpt: ModelCheckpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = ModelCheckpoint.from_bytes(path.read_bytes())
    logger.debug(f"Loaded checkpoint {path} ({len(ckpt.vocabulary)} controls)")
    return ckpt
