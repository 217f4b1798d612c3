"""Core data model: behaviors, sequences, temporal features and vocabulary."""

import bisect
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone as dt_timezone
from pathlib import Path
from typing import IO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from dateutil import parser as date_parser
from dateutil import tz

logger = logging.getLogger(__name__)

DURATION_CAP = 1440  # minutes
MAX_SEQ_LEN = 512
ANOMALY_KINDS = ("SD", "MD", "DM", "DD")
LOG_FORMATS = ("jsonl", "csv")
FEATURE_COLUMNS = ("order", "hour", "day", "duration")


class EventLogError(ValueError):
    """Malformed or unusable event log input."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Behavior:
    """One timestamped device-control event."""

    timestamp: int
    device: str
    control: str

    def __post_init__(self):
        if not isinstance(self.timestamp, (int, np.integer)) or self.timestamp <= 0:
            raise ValueError(f"timestamp must be a positive integer, got {self.timestamp!r}")
        if not self.device:
            raise ValueError("device must be non-empty")
        if not self.control:
            raise ValueError("control must be non-empty")


@dataclass(frozen=True)
class TemporalFeatures:
    order: int
    hour: int
    day: int
    duration: int

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.order, self.hour, self.day, self.duration)


@dataclass(frozen=True)
class BehaviorSequence:
    """Ordered behaviors plus their temporal features.

    ``features`` is empty until :func:`compute_temporal_features` runs.
    ``label`` is the anomaly kind of an injected test sequence, if any.
    """

    behaviors: Tuple[Behavior, ...]
    features: Tuple[TemporalFeatures, ...] = ()
    label: Optional[str] = None
    category: Optional[str] = None

    def __post_init__(self):
        if len(self.behaviors) > MAX_SEQ_LEN:
            raise ValueError(
                f"sequence length must be at most {MAX_SEQ_LEN}, got {len(self.behaviors)}"
            )
        if self.features and len(self.features) != len(self.behaviors):
            raise ValueError("features must align with behaviors")
        if self.label is not None and self.label not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.label!r}")

    def __len__(self) -> int:
        return len(self.behaviors)

    @property
    def controls(self) -> List[str]:
        return [b.control for b in self.behaviors]

    @property
    def has_features(self) -> bool:
        return bool(self.features)


class Vocabulary:
    """Bijection between control strings and token ids.

    Ids ``0..|C|-1`` are controls in lexicographic order; ``|C|`` is the MASK
    token and ``|C|+1`` the UNK token.
    """

    def __init__(self, controls: Sequence[str]):
        if not controls:
            raise ValueError("vocabulary needs at least one control")
        if len(set(controls)) != len(controls):
            raise ValueError("vocabulary controls must be distinct")
        self.controls: List[str] = list(controls)
        self._ids: Dict[str, int] = {c: i for i, c in enumerate(self.controls)}

    @property
    def size(self) -> int:
        return len(self.controls)

    @property
    def mask_id(self) -> int:
        return len(self.controls)

    @property
    def unk_id(self) -> int:
        return len(self.controls) + 1

    def id_of(self, control: str) -> int:
        return self._ids.get(control, self.unk_id)

    def control_of(self, token_id: int) -> str:
        if token_id == self.mask_id:
            return "<MASK>"
        if token_id == self.unk_id:
            return "<UNK>"
        return self.controls[token_id]

    def __contains__(self, control: str) -> bool:
        return control in self._ids

    def __len__(self) -> int:
        return len(self.controls)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.controls == self.controls


@dataclass
class EncodedSequence:
    """Token ids and a ``(n, 4)`` feature matrix (order, hour, day, duration)."""

    token_ids: np.ndarray
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.token_ids)


def _parse_timestamp(value, line: int) -> int:
    if isinstance(value, bool):
        raise EventLogError(f"invalid timestamp {value!r}", line)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        text = value.strip()
        if text.lstrip("-").isdigit():
            return int(text)
        try:
            parsed = date_parser.isoparse(text)
        except ValueError as e:
            raise EventLogError(f"invalid timestamp {value!r}: {e}", line)
        if parsed.tzinfo is None:
            parsed = parsed.replace(tzinfo=dt_timezone.utc)
        return int(parsed.timestamp())
    raise EventLogError(f"invalid timestamp {value!r}", line)


def _make_behavior(record: Dict, line: int) -> Behavior:
    for key in ("ts", "device", "control"):
        if key not in record or record[key] in (None, ""):
            raise EventLogError(f"missing field {key!r}", line)
    timestamp = _parse_timestamp(record["ts"], line)
    try:
        return Behavior(timestamp, str(record["device"]), str(record["control"]))
    except ValueError as e:
        raise EventLogError(str(e), line)


def parse_event_log(source: IO[bytes], format: str = "jsonl") -> List[Behavior]:
    """Parse a UTF-8 event log from a binary stream.

    Args:
        source: Binary stream holding the log
        format: ``jsonl`` or ``csv`` (header ``ts,device,control``)

    Returns:
        Behaviors in file order

    Raises:
        EventLogError: On a malformed record, carrying its line number
    """
    if format not in LOG_FORMATS:
        raise EventLogError(f"unsupported log format {format!r}")

    try:
        text = source.read().decode("utf-8")
    except UnicodeDecodeError as e:
        raise EventLogError(f"log is not valid UTF-8: {e}")

    behaviors: List[Behavior] = []
    if format == "jsonl":
        for line_no, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise EventLogError(f"invalid JSON: {e.msg}", line_no)
            if not isinstance(record, dict):
                raise EventLogError("record must be a JSON object", line_no)
            behaviors.append(_make_behavior(record, line_no))
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None:
            return behaviors
        missing = {"ts", "device", "control"} - set(reader.fieldnames)
        if missing:
            raise EventLogError(f"CSV header lacks {sorted(missing)}", 1)
        for record in reader:
            behaviors.append(_make_behavior(record, reader.line_num))

    logger.debug(f"Parsed {len(behaviors)} behaviors ({format})")
    return behaviors


_SUFFIX_FORMATS = {".csv": "csv", ".jsonl": "jsonl", ".json": "jsonl"}


def log_format(path: Union[str, Path], default: Optional[str] = None) -> str:
    """Format of a log file: its suffix when recognised, else ``default`` (jsonl)."""
    return _SUFFIX_FORMATS.get(Path(path).suffix.lower(), default or "jsonl")


def read_event_log(path: Union[str, Path], format: Optional[str] = None) -> List[Behavior]:
    """Read an event log file.

    A ``.csv``/``.jsonl``/``.json`` suffix decides the format; ``format`` is
    used for any other suffix.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Event log not found: {path}")
    with open(path, "rb") as f:
        return parse_event_log(f, log_format(path, format))


def _iso(timestamp: int) -> str:
    return datetime.fromtimestamp(timestamp, tz=dt_timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_event_log(
    events: Sequence[Behavior],
    sink: Union[str, Path, IO[str]],
    format: str = "jsonl",
    anomalies: Optional[Dict[int, str]] = None,
) -> None:
    """Write behaviors in the JSON-lines or CSV log format.

    Args:
        events: Behaviors to write
        sink: Path or text stream
        format: ``jsonl`` or ``csv``
        anomalies: Optional ``event index -> "KIND:category"`` tags for injected events
    """
    if format not in LOG_FORMATS:
        raise EventLogError(f"unsupported log format {format!r}")
    anomalies = anomalies or {}

    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="") as f:
            write_event_log(events, f, format, anomalies)
        return

    if format == "jsonl":
        for i, b in enumerate(events):
            record = {"ts": _iso(b.timestamp), "device": b.device, "control": b.control}
            if i in anomalies:
                record["anomaly"] = anomalies[i]
            sink.write(json.dumps(record) + "\n")
    else:
        fieldnames = ["ts", "device", "control"] + (["anomaly"] if anomalies else [])
        writer = csv.DictWriter(sink, fieldnames=fieldnames)
        writer.writeheader()
        for i, b in enumerate(events):
            row = {"ts": _iso(b.timestamp), "device": b.device, "control": b.control}
            if anomalies:
                row["anomaly"] = anomalies.get(i, "")
            writer.writerow(row)


def _is_sorted(events: Sequence[Behavior]) -> bool:
    return all(events[i].timestamp <= events[i + 1].timestamp for i in range(len(events) - 1))


def sessionize(
    events: Sequence[Behavior], window: int = 10, stride: Optional[int] = None
) -> List[BehaviorSequence]:
    """Cut a sorted event stream into consecutive fixed-length sequences.

    A trailing remainder of one event is dropped; a longer remainder becomes a
    short final sequence. With ``stride < window`` the windows overlap and
    only full windows are kept (a log shorter than one window still yields
    itself).

    Raises:
        EventLogError: If events are not sorted by timestamp
        ValueError: If window or stride < 1
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if stride is not None and stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not _is_sorted(events):
        raise EventLogError("events must be sorted by timestamp before sessionizing")

    if stride is not None and stride != window:
        if len(events) < window:
            return [BehaviorSequence(tuple(events))] if len(events) >= 2 else []
        return [
            BehaviorSequence(tuple(events[start : start + window]))
            for start in range(0, len(events) - window + 1, stride)
        ]

    sequences = []
    for start in range(0, len(events), window):
        chunk = tuple(events[start : start + window])
        if len(chunk) < window and len(chunk) < 2:
            continue
        sequences.append(BehaviorSequence(chunk))
    return sequences


class DurationIndex:
    """Per-device sorted timestamps of a full log, for successor lookups."""

    def __init__(self, full_log: Iterable[Behavior]):
        times: Dict[str, List[int]] = {}
        for b in full_log:
            times.setdefault(b.device, []).append(b.timestamp)
        self._times = {device: sorted(ts) for device, ts in times.items()}

    def gap_minutes(self, behavior: Behavior) -> Optional[int]:
        """Minutes until the first later event on the same device, or None."""
        times = self._times.get(behavior.device)
        if not times:
            return None
        idx = bisect.bisect_right(times, behavior.timestamp)
        if idx >= len(times):
            return None
        return (times[idx] - behavior.timestamp) // 60


_TZ_CACHE: Dict[str, object] = {}


def _resolve_timezone(name: str):
    if name not in _TZ_CACHE:
        zone = tz.UTC if name.upper() == "UTC" else tz.gettz(name)
        if zone is None:
            raise ValueError(f"unknown timezone {name!r}")
        _TZ_CACHE[name] = zone
    return _TZ_CACHE[name]


def compute_temporal_features(
    s: BehaviorSequence,
    full_log: Sequence[Behavior],
    timezone: str = "UTC",
    duration_cap: int = DURATION_CAP,
    index: Optional[DurationIndex] = None,
) -> BehaviorSequence:
    """Derive order, hour, day and duration features for a sequence.

    Duration is the gap in whole minutes to the next event on the same device
    anywhere in ``full_log`` (0 when there is none), capped at ``duration_cap``.

    Args:
        s: Sequence to featurize
        full_log: Log the sequence was cut from
        timezone: Zone used to render hour of day and day of week
        duration_cap: Upper bound on duration in minutes
        index: Prebuilt index over ``full_log``; built on demand otherwise

    Returns:
        A new sequence carrying its features
    """
    zone = _resolve_timezone(timezone)
    index = index or DurationIndex(full_log)

    features = []
    for order, b in enumerate(s.behaviors):
        moment = datetime.fromtimestamp(b.timestamp, tz=zone)
        gap = index.gap_minutes(b)
        duration = 0 if gap is None else min(duration_cap, gap)
        features.append(TemporalFeatures(order, moment.hour, moment.weekday(), duration))

    return BehaviorSequence(s.behaviors, tuple(features), s.label, s.category)


def featurize_log(
    events: Sequence[Behavior],
    window: int = 10,
    timezone: str = "UTC",
    duration_cap: int = DURATION_CAP,
    stride: Optional[int] = None,
) -> List[BehaviorSequence]:
    """Sessionize a log and compute features for every sequence."""
    index = DurationIndex(events)
    return [
        compute_temporal_features(s, events, timezone, duration_cap, index=index)
        for s in sessionize(events, window, stride)
    ]


def build_vocabulary(train: Sequence[BehaviorSequence]) -> Vocabulary:
    """Collect the distinct controls of a training set, sorted."""
    if not train:
        raise ValueError("cannot build a vocabulary from an empty training set")
    controls = sorted({b.control for s in train for b in s.behaviors})
    logger.info(f"Vocabulary built with {len(controls)} device controls")
    return Vocabulary(controls)


def encode_sequence(s: BehaviorSequence, v: Vocabulary) -> EncodedSequence:
    """Map controls to token ids (UNK for unseen controls) and stack features."""
    token_ids = np.array([v.id_of(b.control) for b in s.behaviors], dtype=np.int64)
    if s.features:
        features = np.array([f.as_tuple() for f in s.features], dtype=np.int64)
    else:
        features = np.zeros((len(token_ids), 4), dtype=np.int64)
        features[:, 0] = np.arange(len(token_ids))
    return EncodedSequence(token_ids, features)


def split_sequences(
    sequences: Sequence[BehaviorSequence],
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
) -> Tuple[List[BehaviorSequence], List[BehaviorSequence], List[BehaviorSequence]]:
    """Chronological train/valid/test split at sequence granularity."""
    n = len(sequences)
    n_train = int(round(n * fractions[0]))
    n_valid = int(round(n * fractions[1]))
    train = list(sequences[:n_train])
    valid = list(sequences[n_train : n_train + n_valid])
    test = list(sequences[n_train + n_valid :])
    return train, valid, test
