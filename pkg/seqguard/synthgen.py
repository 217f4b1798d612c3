"""Synthetic smart-home logs with routine and noise behaviors, plus anomaly injection."""

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dateutil import parser as date_parser

from .domain import ANOMALY_KINDS, Behavior, sessionize, split_sequences

logger = logging.getLogger(__name__)

DAY = 86400
HOST_SLACK = 1.05
HOST_GROWTH = 1.1
HOST_ATTEMPTS = 12
DEFAULT_START = "2022-02-28T00:00:00Z"
DEFAULT_NOISE_POOL = (
    "audio:switch_on",
    "purifier:self_refresh",
    "humidifier:self_clean",
    "speaker:play_music",
)


class GenerationError(ValueError):
    """Invalid generator input or an injection that cannot be placed."""


@dataclass(frozen=True)
class RoutineStep:
    """One step of a routine.

    The step happens ``gap_minutes`` (uniform range) after the previous one and
    never before the start of ``hour_window``. The first step starts inside its
    hour window.
    """

    control: str
    hour_window: Tuple[float, float] = (0.0, 24.0)
    gap_minutes: Tuple[float, float] = (1.0, 5.0)

    @property
    def device(self) -> str:
        return self.control.split(":", 1)[0]


@dataclass(frozen=True)
class RoutineSpec:
    name: str
    steps: Tuple[RoutineStep, ...]
    days: FrozenSet[int] = frozenset(range(7))
    jitter: int = 15  # minutes

    def __post_init__(self):
        if not self.steps:
            raise GenerationError(f"routine {self.name!r} needs at least one step")
        for step in self.steps:
            lo, hi = step.hour_window
            if not (0 <= lo < hi <= 24):
                raise GenerationError(f"routine {self.name!r}: bad hour window {step.hour_window}")
            if step.gap_minutes[0] < 0 or step.gap_minutes[1] < step.gap_minutes[0]:
                raise GenerationError(f"routine {self.name!r}: bad gap {step.gap_minutes}")
        if not self.days or not set(self.days) <= set(range(7)):
            raise GenerationError(f"routine {self.name!r}: days must be a subset of 0..6")
        if self.jitter < 0:
            raise GenerationError(f"routine {self.name!r}: jitter must be >= 0")


def _routine(name: str, start: Tuple[float, float], controls: Sequence[Tuple[str, float, float]]):
    steps = [RoutineStep(controls[0][0], hour_window=start, gap_minutes=(0.0, 0.0))]
    steps += [RoutineStep(c, gap_minutes=(lo, hi)) for c, lo, hi in controls[1:]]
    return RoutineSpec(name, tuple(steps))


def default_routines() -> List[RoutineSpec]:
    """Four daily routines covering every device the anomaly catalog touches."""
    return [
        _routine(
            "morning",
            (6.5, 7.5),
            [
                ("bedlight:switch_on", 0, 0),
                ("curtain:open", 1, 3),
                ("window:open", 1, 4),
                ("watervalve:open", 2, 5),
                ("watervalve:close", 8, 15),
                ("coffee_machine:start", 3, 6),
                ("coffee_machine:stop", 2, 4),
                ("microwave:start", 1, 3),
                ("microwave:stop", 2, 4),
                ("tv:switch_on", 2, 5),
                ("tv:switch_off", 15, 25),
                ("bedlight:switch_off", 1, 3),
            ],
        ),
        _routine(
            "leave_home",
            (8.75, 9.25),
            [
                ("window:close", 0, 0),
                ("curtain:half_close", 1, 2),
                ("light:switch_off", 1, 2),
                ("purifier:switch_on", 1, 2),
                ("sweeper:start", 1, 3),
                ("camera:switch_on", 1, 2),
                ("door:close", 1, 2),
                ("smartlock:lock", 0.5, 1),
            ],
        ),
        _routine(
            "evening_return",
            (18.0, 19.0),
            [
                ("smartlock:unlock", 0, 0),
                ("camera:switch_off", 0.5, 1),
                ("light:switch_on", 1, 2),
                ("sweeper:dock", 1, 3),
                ("ac:cool_mode", 2, 5),
                ("tv:switch_on", 3, 8),
                ("microwave:start", 20, 40),
                ("microwave:stop", 3, 6),
                ("tv:switch_off", 30, 60),
                ("watervalve:open", 5, 15),
                ("watervalve:close", 10, 20),
                ("ac:switch_off", 5, 15),
            ],
        ),
        _routine(
            "bedtime",
            (22.0, 23.0),
            [
                ("curtain:close", 0, 0),
                ("window:close", 1, 2),
                ("purifier:switch_off", 1, 3),
                ("light:switch_off", 2, 5),
                ("bedlight:switch_on", 0.5, 1),
                ("camera:switch_on", 1, 2),
                ("smartlock:lock", 1, 2),
                ("bedlight:switch_off", 10, 30),
            ],
        ),
    ]


def parse_start(start: Union[str, int]) -> int:
    if isinstance(start, int):
        return start
    parsed = date_parser.isoparse(start)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return int(parsed.timestamp())


def generate_normal_dataset(
    specs: Sequence[RoutineSpec],
    days: int,
    noise_rate: float,
    seed: int,
    start: Union[str, int] = DEFAULT_START,
    noise_pool: Sequence[str] = DEFAULT_NOISE_POOL,
) -> List[Behavior]:
    """Generate a seeded log of routine instantiations plus noise behaviors.

    Args:
        specs: Routines to instantiate on their scheduled days
        days: Number of days to simulate
        noise_rate: Extra noise events as a fraction of routine events
        seed: Random seed; equal seeds give identical logs
        start: First simulated midnight (ISO-8601 or epoch seconds)
        noise_pool: Controls that noise events are drawn from

    Returns:
        Behaviors sorted by timestamp
    """
    if not specs:
        raise GenerationError("at least one routine is required")
    if days < 1:
        raise GenerationError(f"days must be >= 1, got {days}")
    if not 0.0 <= noise_rate <= 0.5:
        raise GenerationError(f"noise_rate must be in [0, 0.5], got {noise_rate}")
    if noise_rate > 0 and not noise_pool:
        raise GenerationError("noise_rate > 0 needs a non-empty noise pool")

    rng = np.random.default_rng(seed)
    origin = parse_start(start)
    events: List[Behavior] = []

    for day in range(days):
        midnight = origin + day * DAY
        weekday = datetime.fromtimestamp(midnight, tz=timezone.utc).weekday()
        for spec in specs:
            if weekday not in spec.days:
                continue
            first = spec.steps[0]
            t = midnight + rng.uniform(*first.hour_window) * 3600
            t += rng.uniform(-spec.jitter, spec.jitter) * 60
            t = max(t, midnight + 1)
            for i, step in enumerate(spec.steps):
                if i > 0:
                    t += rng.uniform(*step.gap_minutes) * 60
                    t = max(t, midnight + step.hour_window[0] * 3600)
                events.append(Behavior(int(t), step.device, step.control))

    n_noise = int(round(noise_rate * len(events)))
    if n_noise:
        times = rng.uniform(origin, origin + days * DAY, size=n_noise).astype(np.int64)
        picks = rng.integers(0, len(noise_pool), size=n_noise)
        for t, k in zip(times, picks):
            control = noise_pool[int(k)]
            events.append(Behavior(int(t), control.split(":", 1)[0], control))

    events.sort(key=lambda b: b.timestamp)
    logger.info(
        f"Generated {len(events)} behaviors over {days} days "
        f"({n_noise} noise, {len(specs)} routines)"
    )
    return events


# ---------------------------------------------------------------------------
# Anomaly injection
# ---------------------------------------------------------------------------

CATEGORY_KINDS: Dict[str, str] = {
    "light_flickering": "SD",
    "camera_flickering": "SD",
    "tv_flickering": "SD",
    "window_open_while_locked": "MD",
    "camera_off_while_locked": "MD",
    "ac_cool_at_night": "DM",
    "window_open_at_midnight": "DM",
    "watervalve_open_at_midnight": "DM",
    "long_shower": "DD",
    "microwave_long_run": "DD",
}

_DEFAULT_PARAMETERS: Dict[str, Dict] = {
    "light_flickering": {"on": "light:switch_on", "off": "light:switch_off", "flicker_count": 6, "span_seconds": 120},
    "camera_flickering": {"on": "camera:switch_on", "off": "camera:switch_off", "flicker_count": 6, "span_seconds": 120},
    "tv_flickering": {"on": "tv:switch_on", "off": "tv:switch_off", "flicker_count": 6, "span_seconds": 120},
    "window_open_while_locked": {"pair": ("smartlock:lock", "window:open")},
    "camera_off_while_locked": {"pair": ("smartlock:lock", "camera:switch_off")},
    "ac_cool_at_night": {"control": "ac:cool_mode", "hours": (1, 4)},
    "window_open_at_midnight": {"control": "window:open", "hours": (1, 4)},
    "watervalve_open_at_midnight": {"control": "watervalve:open", "hours": (1, 4)},
    "long_shower": {"open": "watervalve:open", "close": "watervalve:close", "gap_minutes": 180},
    "microwave_long_run": {"open": "microwave:start", "close": "microwave:stop", "gap_minutes": 180},
}

# most constrained kinds claim host windows first
_PLACEMENT_ORDER = {"DM": 0, "DD": 1, "MD": 2, "SD": 3}


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    category: str
    parameters: Dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.category not in CATEGORY_KINDS:
            raise GenerationError(f"unknown anomaly category {self.category!r}")
        if self.kind not in ANOMALY_KINDS or CATEGORY_KINDS[self.category] != self.kind:
            raise GenerationError(
                f"category {self.category!r} is {CATEGORY_KINDS[self.category]}, not {self.kind!r}"
            )

    @classmethod
    def named(cls, category: str, **overrides) -> "AnomalySpec":
        if category not in CATEGORY_KINDS:
            raise GenerationError(f"unknown anomaly category {category!r}")
        params = dict(_DEFAULT_PARAMETERS[category])
        params.update(overrides)
        return cls(CATEGORY_KINDS[category], category, params)

    def param(self, key: str):
        if key in self.parameters:
            return self.parameters[key]
        return _DEFAULT_PARAMETERS[self.category][key]


def default_anomalies() -> List[AnomalySpec]:
    """The ten anomaly categories with default parameters."""
    return [AnomalySpec.named(category) for category in CATEGORY_KINDS]


@dataclass(frozen=True)
class AnomalyLabel:
    seq_index: int
    kind: str
    category: str


@dataclass
class InjectionResult:
    events: List[Behavior]
    labels: List[AnomalyLabel]
    tags: Dict[int, str]  # event index -> "KIND:category"

    def __iter__(self):
        return iter((self.events, self.labels))


def _device(control: str) -> str:
    return control.split(":", 1)[0]


def injected_count(spec: AnomalySpec) -> int:
    """Number of events one instance of ``spec`` adds to a log."""
    if spec.kind == "SD":
        return int(spec.param("flicker_count"))
    return 1 if spec.kind == "DM" else 2


# Each injector fills the open interval between two consecutive host
# timestamps ``a < b``. ``rng=None`` only asks whether the gap fits.


def _inject_sd(spec: AnomalySpec, a: int, b: int, rng=None):
    k = int(spec.param("flicker_count"))
    step = min(int(spec.param("span_seconds")) // (k - 1), (b - a - 2) // (k - 1))
    if step < 1:
        return None
    if rng is None:
        return True
    t0 = int(rng.integers(a + 1, b - (k - 1) * step))
    on, off = spec.param("on"), spec.param("off")
    return [Behavior(t0 + j * step, _device(on), on if j % 2 == 0 else off) for j in range(k)]


def _inject_md(spec: AnomalySpec, a: int, b: int, rng=None):
    if b - a < 3:
        return None
    if rng is None:
        return True
    first, second = spec.param("pair")
    t1 = int(rng.integers(a + 1, b - 1))
    t2 = t1 + int(rng.integers(1, min(60, b - 1 - t1) + 1))
    return [Behavior(t1, _device(first), first), Behavior(t2, _device(second), second)]


def _night_slots(spec: AnomalySpec, a: int, b: int) -> List[Tuple[int, int]]:
    lo_h, hi_h = spec.param("hours")
    slots = []
    for midnight in range(a - a % DAY, b + 1, DAY):
        lo = max(a + 1, midnight + int(lo_h * 3600))
        hi = min(b - 1, midnight + int(hi_h * 3600) - 1)
        if lo <= hi:
            slots.append((lo, hi))
    return slots


def _inject_dm(spec: AnomalySpec, a: int, b: int, rng=None):
    slots = _night_slots(spec, a, b)
    if not slots:
        return None
    if rng is None:
        return True
    control = spec.param("control")
    lo, hi = slots[int(rng.integers(0, len(slots)))]
    return [Behavior(int(rng.integers(lo, hi + 1)), _device(control), control)]


def _inject_dd(spec: AnomalySpec, a: int, b: int, rng=None):
    gap = int(spec.param("gap_minutes")) * 60
    if b - 1 - gap < a + 1:
        return None
    if rng is None:
        return True
    opener, closer = spec.param("open"), spec.param("close")
    t = int(rng.integers(a + 1, b - gap))
    return [Behavior(t, _device(opener), opener), Behavior(t + gap, _device(closer), closer)]


_INJECTORS = {"SD": _inject_sd, "MD": _inject_md, "DM": _inject_dm, "DD": _inject_dd}


def _fitting_gaps(spec: AnomalySpec, log: Sequence[Behavior], block: int, window: int) -> List[int]:
    """Host indices ``j`` in ``block`` whose gap to ``j + 1`` fits ``spec``."""
    inject = _INJECTORS[spec.kind]
    stop = min((block + 1) * window, len(log) - 1)
    return [
        j
        for j in range(block * window, stop)
        if inject(spec, log[j].timestamp, log[j + 1].timestamp)
    ]


def inject_anomalies(
    log: Sequence[Behavior],
    specs: Sequence[AnomalySpec],
    count_per_spec: int = 50,
    seed: int = 0,
    window: int = 10,
) -> InjectionResult:
    """Insert anomaly instances into a normal log.

    Every host event is kept in place; an instance only adds events inside
    one gap between two consecutive host events, drawn at random from the
    gaps that fit it. Each instance ends up inside a single ``window``-event
    sequence of the returned log, no sequence holds two instances, and the
    labels index those sequences.

    Args:
        log: Normal behaviors sorted by timestamp
        specs: Anomaly categories to inject
        count_per_spec: Instances per category
        seed: Random seed
        window: Sequence length the labels refer to

    Returns:
        Modified log, one label per instance, and per-event anomaly tags

    Raises:
        GenerationError: If the log is empty or too short to host every instance
    """
    if not log:
        raise GenerationError("cannot inject anomalies into an empty log")
    for spec in specs:
        if spec.category not in CATEGORY_KINDS:
            raise GenerationError(f"unknown anomaly category {spec.category!r}")
        if spec.kind == "SD" and not 2 <= injected_count(spec) <= window:
            raise GenerationError(f"{spec.category}: flicker_count must be in [2, {window}]")

    rng = np.random.default_rng(seed)
    n_blocks = len(log) // window

    # blocks are chosen first, most constrained kinds first, never adjacent
    plan: Dict[int, AnomalySpec] = {}
    ordered = sorted(enumerate(specs), key=lambda item: (_PLACEMENT_ORDER[item[1].kind], item[0]))
    for _, spec in ordered:
        placed = 0
        for block in rng.permutation(n_blocks):
            if placed == count_per_spec:
                break
            block = int(block)
            if {block - 1, block, block + 1} & plan.keys():
                continue
            if _fitting_gaps(spec, log, block, window):
                plan[block] = spec
                placed += 1
        if placed < count_per_spec:
            raise GenerationError(
                f"log too short: placed {placed}/{count_per_spec} {spec.category} instances"
            )

    # then the log is rebuilt in order; an instance whose block has no gap
    # keeping it inside one output sequence moves to the next free block
    events: List[Behavior] = []
    tags: Dict[int, str] = {}
    labels: List[AnomalyLabel] = []
    deferred: List[AnomalySpec] = []
    last_seq = -1

    def place(spec: AnomalySpec, block: int) -> Optional[Tuple[int, List[Behavior]]]:
        k = injected_count(spec)
        offset = len(events) - block * window
        choices = []
        for j in _fitting_gaps(spec, log, block, window):
            q = j + 1 + offset
            if q // window == (q + k - 1) // window and q // window > last_seq:
                choices.append(j)
        if not choices:
            return None
        j = choices[int(rng.integers(0, len(choices)))]
        return j, _INJECTORS[spec.kind](spec, log[j].timestamp, log[j + 1].timestamp, rng)

    for block in range(n_blocks):
        if block in plan:
            candidates = [plan[block]]
        else:
            candidates = list(deferred)
        built, chosen = None, None
        for spec in candidates:
            built = place(spec, block)
            if built is not None:
                chosen = spec
                break
        if block in plan and built is None:
            deferred.append(plan[block])
        elif chosen is not None and block not in plan:
            deferred.remove(chosen)

        for j in range(block * window, (block + 1) * window):
            events.append(log[j])
            if built is not None and j == built[0]:
                seq_index = len(events) // window
                for behavior in built[1]:
                    tags[len(events)] = f"{chosen.kind}:{chosen.category}"
                    events.append(behavior)
                labels.append(AnomalyLabel(seq_index, chosen.kind, chosen.category))
                last_seq = seq_index

    if deferred:
        raise GenerationError(
            f"log too short: {len(deferred)} instances found no free sequence "
            f"({', '.join(sorted({s.category for s in deferred}))})"
        )
    events.extend(log[n_blocks * window :])

    logger.info(
        f"Injected {len(labels)} anomalies ({len(tags)} events) into a log of {len(log)} events"
    )
    return InjectionResult(events, labels, tags)


# ---------------------------------------------------------------------------
# Labelled datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDatasets:
    train: List[Behavior]
    valid: List[Behavior]
    test: List[Behavior]
    labels: List[AnomalyLabel]
    tags: Dict[int, str]


def _host_days(specs: Sequence[AnomalySpec], count: int, events_per_day: float, window: int) -> int:
    """Shortest host worth trying: a night per DM instance and a sequence per instance."""
    windows_per_day = max(events_per_day / window, 1.0)
    n_dm = sum(1 for s in specs if s.kind == "DM")
    n_dd = sum(1 for s in specs if s.kind == "DD")
    need = max(
        n_dm * count,
        (n_dm + n_dd) * count / 2.0,
        len(specs) * count / windows_per_day,
    )
    return max(1, int(math.ceil(HOST_SLACK * need)))


def build_datasets(
    days: int = 60,
    noise_rate: float = 0.05,
    anomalies_per_category: int = 50,
    window: int = 10,
    split: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 42,
    start: Union[str, int] = DEFAULT_START,
    routines: Optional[Sequence[RoutineSpec]] = None,
    anomalies: Optional[Sequence[AnomalySpec]] = None,
) -> SyntheticDatasets:
    """Build train/valid/test logs and test labels.

    A ``days``-long normal log is sessionized and split chronologically. The
    test log is the test split followed by a continuation log generated long
    enough to host every anomaly instance in its own sequence. The host
    starts short and grows until every instance fits, so the test log holds
    few more normal sequences than needed.
    """
    routines = list(routines) if routines is not None else default_routines()
    anomalies = list(anomalies) if anomalies is not None else default_anomalies()

    normal = generate_normal_dataset(routines, days, noise_rate, seed, start)
    train_seqs, valid_seqs, test_seqs = split_sequences(sessionize(normal, window), split)
    test_seqs = [s for s in test_seqs if len(s) == window]

    def flatten(seqs):
        return [b for s in seqs for b in s.behaviors]

    origin = parse_start(start)
    events_per_day = len(normal) / days
    host_days = _host_days(anomalies, anomalies_per_category, events_per_day, window)
    for attempt in range(HOST_ATTEMPTS):
        host = generate_normal_dataset(
            routines, host_days, noise_rate, seed + 1, origin + days * DAY
        )
        try:
            result = inject_anomalies(host, anomalies, anomalies_per_category, seed + 2, window)
            break
        except GenerationError as e:
            if attempt == HOST_ATTEMPTS - 1:
                raise
            grown = max(host_days + 1, int(math.ceil(host_days * HOST_GROWTH)))
            logger.info(f"{e}; retrying with {grown} host days")
            host_days = grown

    test_normal = flatten(test_seqs)
    offset_seq, offset_event = len(test_seqs), len(test_normal)
    labels = [AnomalyLabel(a.seq_index + offset_seq, a.kind, a.category) for a in result.labels]
    tags = {i + offset_event: tag for i, tag in result.tags.items()}

    logger.info(
        f"Datasets: {len(train_seqs)} train, {len(valid_seqs)} valid, "
        f"{len(test_seqs) + len(result.events) // window} test sequences "
        f"({len(labels)} anomalous)"
    )
    return SyntheticDatasets(
        flatten(train_seqs), flatten(valid_seqs), test_normal + result.events, labels, tags
    )


def write_labels(labels: Sequence[AnomalyLabel], path: Union[str, Path]) -> None:
    """Write the ``seq_index,kind,category`` sidecar file."""
    frame = pd.DataFrame(
        [(a.seq_index, a.kind, a.category) for a in labels],
        columns=["seq_index", "kind", "category"],
    )
    frame.to_csv(path, index=False)


def read_labels(path: Union[str, Path]) -> List[AnomalyLabel]:
    """Read a labels sidecar file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Labels file not found: {path}")
    frame = pd.read_csv(path, dtype={"seq_index": int, "kind": str, "category": str})
    return [
        AnomalyLabel(int(row.seq_index), row.kind, row.category) for row in frame.itertuples()
    ]
