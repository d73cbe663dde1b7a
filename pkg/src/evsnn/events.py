"""Event stream parsing, portable text export, dataset loading, synthesis.

Coordinates use a bottom-left origin and timestamps are microseconds
throughout.  Polarity 1 is an ON (brightness increase) event, 0 is OFF.

Binary ``.dat`` layout (see docs/formats.md): optional ``%``-prefixed ASCII
header lines, an optional two-byte event-type prefix, then 8-byte
little-endian records of (uint32 timestamp, uint32 packed word) where the
word holds x in bits 0-13, y in bits 14-27 and polarity in bit 28.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    EmptyClassDirectory,
    InvalidSpec,
    MalformedHeader,
    MalformedLine,
    MissingSplit,
    NonMonotonicTimestamp,
    OutOfBoundsEvent,
    TruncatedRecord,
)
from .seeding import rng_stream

OFF, ON = 0, 1
DEFAULT_SENSOR_WIDTH = 304
DEFAULT_SENSOR_HEIGHT = 240
LABEL_BACKGROUND = 0
LABEL_CAR = 1
CLASS_NAMES = ("background", "cars")

# packed-word field layout for binary records
_X_MASK = 0x3FFF
_Y_SHIFT = 14
_Y_MASK = 0x3FFF
_P_SHIFT = 28
_SUPPORTED_EVENT_TYPES = (0, 12)  # 2D / TD change-detection records


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """One recording: parallel per-event arrays plus canvas metadata."""

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    label: int | None = None
    duration_us: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        if self.duration_us == 0 and len(self.t):
            self.duration_us = int(self.t[-1]) + 1

    @property
    def n_events(self):
        return len(self.t)

    def events(self):
        for xi, yi, ti, pi in zip(self.x, self.y, self.t, self.p):
            yield Event(int(xi), int(yi), int(ti), int(pi))

    def validate(self):
        if np.any(np.diff(self.t) < 0):
            raise NonMonotonicTimestamp("event timestamps decrease")
        if len(self.t) and (int(self.t[0]) < 0):
            raise NonMonotonicTimestamp("negative timestamp")
        if np.any(self.x < 0) or np.any(self.x >= self.width):
            raise OutOfBoundsEvent(f"x outside [0, {self.width})")
        if np.any(self.y < 0) or np.any(self.y >= self.height):
            raise OutOfBoundsEvent(f"y outside [0, {self.height})")
        if np.any((self.p != 0) & (self.p != 1)):
            raise OutOfBoundsEvent("polarity must be 0 or 1")
        return self

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.label == other.label
            and self.duration_us == other.duration_us
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    class_names: tuple = CLASS_NAMES


# --------------------------------------------------------------------------
# binary .dat parsing


def parse_dat(data: bytes, label=None) -> EventStream:
    """Decode a binary event file; returns a stream sorted by timestamp."""
    pos = 0
    width = DEFAULT_SENSOR_WIDTH
    height = DEFAULT_SENSOR_HEIGHT
    while data[pos : pos + 1] == b"%":
        eol = data.find(b"\n", pos)
        if eol < 0:
            raise MalformedHeader("unterminated header line")
        line = data[pos:eol].decode("latin-1")
        m = re.match(r"%\s*(width|height)\s+(\S+)", line, flags=re.IGNORECASE)
        if m:
            try:
                value = int(m.group(2))
            except ValueError:
                raise MalformedHeader(f"bad {m.group(1).lower()} field: {line!r}")
            if m.group(1).lower() == "width":
                width = value
            else:
                height = value
        pos = eol + 1

    payload = data[pos:]
    rem = len(payload) % 8
    if rem == 2:
        # two-byte prefix: event type and record size
        ev_type, ev_size = payload[0], payload[1]
        if ev_type not in _SUPPORTED_EVENT_TYPES:
            raise MalformedHeader(f"unsupported event type {ev_type}")
        if ev_size != 8:
            raise MalformedHeader(f"unsupported record size {ev_size}")
        payload = payload[2:]
    elif rem != 0:
        raise TruncatedRecord(f"{len(payload)} payload bytes is not a whole number of records")

    raw = np.frombuffer(payload, dtype="<u4").reshape(-1, 2)
    t = raw[:, 0].astype(np.int64)
    word = raw[:, 1]
    x = (word & _X_MASK).astype(np.int64)
    y = ((word >> _Y_SHIFT) & _Y_MASK).astype(np.int64)
    p = ((word >> _P_SHIFT) & 1).astype(np.int64)
    if np.any(np.diff(t) < 0):
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    stream = EventStream(width=width, height=height, t=t, x=x, y=y, p=p, label=label)
    return stream.validate()


# --------------------------------------------------------------------------
# portable text format


def parse_evtcsv(text: str, label=None) -> EventStream:
    """Parse the portable text format (header line, then one event per line)."""
    lines = text.splitlines()
    if not lines:
        raise MalformedLine("line 1: missing header")
    head = lines[0].split(",")
    if len(head) != 4:
        raise MalformedLine(f"line 1: header needs 4 fields, got {len(head)}")
    try:
        width, height, duration_us = int(head[0]), int(head[1]), int(head[2])
        file_label = None if head[3].strip() == "" else int(head[3])
    except ValueError:
        raise MalformedLine(f"line 1: non-integer header field in {lines[0]!r}")
    if width <= 0 or height <= 0 or duration_us < 0:
        raise MalformedLine("line 1: non-positive canvas or negative duration")

    n = len(lines) - 1
    t = np.empty(n, dtype=np.int64)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    p = np.empty(n, dtype=np.int64)
    count = 0
    prev_t = -1
    for i, line in enumerate(lines[1:], start=2):
        if line.strip() == "":
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedLine(f"line {i}: expected t,x,y,p")
        try:
            ti, xi, yi, pi = (int(v) for v in parts)
        except ValueError:
            raise MalformedLine(f"line {i}: non-integer field in {line!r}")
        if pi not in (0, 1):
            raise MalformedLine(f"line {i}: polarity {pi} not in {{0,1}}")
        if ti < prev_t:
            raise NonMonotonicTimestamp(f"line {i}: timestamp {ti} after {prev_t}")
        if not (0 <= xi < width) or not (0 <= yi < height):
            raise OutOfBoundsEvent(f"line {i}: ({xi},{yi}) outside {width}x{height}")
        t[count], x[count], y[count], p[count] = ti, xi, yi, pi
        prev_t = ti
        count += 1
    stream = EventStream(
        width=width,
        height=height,
        t=t[:count],
        x=x[:count],
        y=y[:count],
        p=p[:count],
        label=file_label if label is None else label,
        duration_us=duration_us,
    )
    return stream.validate()


def write_evtcsv(stream: EventStream) -> str:
    """Inverse of parse_evtcsv; parse(write(s)) == s."""
    label = "" if stream.label is None else str(stream.label)
    out = [f"{stream.width},{stream.height},{stream.duration_us},{label}"]
    for xi, yi, ti, pi in zip(stream.x, stream.y, stream.t, stream.p):
        out.append(f"{ti},{xi},{yi},{pi}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# dataset loading


def _parse_file(path: Path, label):
    if path.suffix == ".dat":
        return parse_dat(path.read_bytes(), label=label)
    return parse_evtcsv(path.read_text(), label=label)


def load_dataset(root_dir, fmt="auto", threads=1) -> Dataset:
    """Load a {train,test}/{cars,background} tree; files ordered by name.

    fmt selects which extensions to pick up: "dat", "evtcsv" or "auto"
    (both).  Parsing may run on a thread pool; ordering stays lexicographic
    regardless of thread count.
    """
    patterns = {"dat": ["*.dat"], "evtcsv": ["*.evt.csv"], "auto": ["*.dat", "*.evt.csv"]}
    if fmt not in patterns:
        raise InvalidSpec(f"unknown dataset format {fmt!r}")
    root = Path(root_dir)
    dataset = Dataset()
    for split_name, bucket in (("train", dataset.train), ("test", dataset.test)):
        split_dir = root / split_name
        if not split_dir.is_dir():
            raise MissingSplit(f"missing split directory {split_dir}")
        jobs = []
        for class_name, label in (("background", LABEL_BACKGROUND), ("cars", LABEL_CAR)):
            class_dir = split_dir / class_name
            files = []
            if class_dir.is_dir():
                for pattern in patterns[fmt]:
                    files.extend(class_dir.glob(pattern))
            if not files:
                raise EmptyClassDirectory(f"no event files under {class_dir}")
            jobs.extend((path, label) for path in sorted(files, key=lambda q: q.name))
        jobs.sort(key=lambda job: (job[0].parent.name, job[0].name))
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                bucket.extend(pool.map(lambda job: _parse_file(*job), jobs))
        else:
            bucket.extend(_parse_file(*job) for job in jobs)
    return dataset


# --------------------------------------------------------------------------
# synthetic data

PATTERNS = ("moving-bar", "blob", "uniform-noise")


@dataclass
class SyntheticSpec:
    width: int = 50
    height: int = 50
    n_per_class: int = 10
    duration_us: int = 100_000
    pattern: str = "moving-bar"
    event_rate_per_ms: float = 60.0
    seed: int = 0

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidSpec("canvas dimensions must be positive")
        if self.n_per_class <= 0:
            raise InvalidSpec("n_per_class must be positive")
        if self.duration_us <= 0:
            raise InvalidSpec("duration must be positive")
        if self.pattern not in PATTERNS:
            raise InvalidSpec(f"pattern {self.pattern!r} not one of {PATTERNS}")
        if self.event_rate_per_ms <= 0:
            raise InvalidSpec("event rate must be positive")
        return self


def _synthetic_stream(spec: SyntheticSpec, pattern: str, label: int, rng) -> EventStream:
    duration_ms = spec.duration_us / 1000.0
    n = max(1, int(rng.poisson(spec.event_rate_per_ms * duration_ms)))
    t = np.sort(rng.integers(0, spec.duration_us, size=n))
    w, h = spec.width, spec.height

    if pattern == "uniform-noise":
        x = rng.integers(0, w, size=n)
        y = rng.integers(0, h, size=n)
        p = rng.integers(0, 2, size=n)
    elif pattern == "moving-bar":
        # vertical bar sweeping right with wrap-around, one sweep per 25 ms;
        # the brightening band at the leading edge emits ON events, the
        # darkening band it vacates emits OFF events
        sweep_us = 25_000.0
        thick = max(1, w // 12)
        x0 = rng.uniform(0, w)
        centre = np.floor((x0 + (t / sweep_us) * w) % w).astype(np.int64)
        lead = rng.integers(0, 2, size=n)
        depth = rng.integers(0, thick, size=n)
        x = (centre - depth - (1 - lead) * thick) % w
        y0, y1 = h // 4, max(h // 4 + 1, (3 * h) // 4)
        y = rng.integers(y0, y1, size=n)
        p = lead
    else:  # blob
        cx, cy = w * 0.25, h * 0.25
        sigma = max(1.0, w / 10.0)
        x = np.clip(np.round(rng.normal(cx, sigma, size=n)), 0, w - 1).astype(np.int64)
        y = np.clip(np.round(rng.normal(cy, sigma, size=n)), 0, h - 1).astype(np.int64)
        p = rng.integers(0, 2, size=n)

    return EventStream(
        width=w,
        height=h,
        t=t,
        x=np.asarray(x, dtype=np.int64),
        y=np.asarray(y, dtype=np.int64),
        p=np.asarray(p, dtype=np.int64),
        label=label,
        duration_us=spec.duration_us,
    ).validate()


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset.

    Class 1 carries the requested structured pattern; class 0 is uniform
    noise drawn at the same expected event rate, so the two classes cannot
    be told apart by event count alone.  The test split holds half as many
    streams per class as the train split.
    """
    spec.validate()
    dataset = Dataset()
    n_test = max(1, spec.n_per_class // 2)
    for split_id, (bucket, n_streams) in enumerate(
        ((dataset.train, spec.n_per_class), (dataset.test, n_test))
    ):
        for label in (LABEL_BACKGROUND, LABEL_CAR):
            pattern = spec.pattern if label == LABEL_CAR else "uniform-noise"
            for i in range(n_streams):
                rng = rng_stream(spec.seed, "synthetic", split_id, label, i)
                bucket.append(_synthetic_stream(spec, pattern, label, rng))
    return dataset
