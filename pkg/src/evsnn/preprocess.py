"""Occurrence statistics, attention-window cropping, spike-frame building.

A spike frame covers one sample period: per polarity channel and pixel it
holds a single bit, set when at least one event of that polarity hit the
pixel inside the period (repeated events saturate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWindow, EmptyInput, InvalidConfig


@dataclass
class OccurrenceMap:
    """Per-pixel event counts over a set of streams; row 0 is the bottom row."""

    width: int
    height: int
    counts: np.ndarray


@dataclass
class AttentionWindow:
    origin_x: int
    origin_y: int
    width: int
    height: int


@dataclass
class AccumulationConfig:
    t_sample_us: int = 1000
    t_length_us: int = 10_000
    frame_repeat: int = 20

    def validate(self):
        if self.t_sample_us <= 0 or self.t_length_us <= 0:
            raise InvalidConfig("sample and clip lengths must be positive")
        if self.t_length_us % self.t_sample_us != 0:
            raise InvalidConfig("clip length must be a whole number of sample periods")
        if self.frame_repeat < 1:
            raise InvalidConfig("frame_repeat must be at least 1")
        return self

    @property
    def frames_per_clip(self):
        return self.t_length_us // self.t_sample_us


@dataclass
class SpikeFrame:
    """Binary accumulation of one sample period, shape [2, height, width]."""

    bits: np.ndarray

    @property
    def height(self):
        return self.bits.shape[1]

    @property
    def width(self):
        return self.bits.shape[2]


def event_occurrence_map(streams) -> OccurrenceMap:
    """Count events per pixel over all streams on a shared canvas.

    Streams of different sizes share the bottom-left origin; the canvas is
    the componentwise maximum.  Total counts equal the total event count.
    """
    streams = list(streams)
    if not streams:
        raise EmptyInput("no streams given")
    width = max(s.width for s in streams)
    height = max(s.height for s in streams)
    counts = np.zeros(height * width, dtype=np.int64)
    for s in streams:
        if s.n_events:
            counts += np.bincount(s.y * width + s.x, minlength=height * width)
    return OccurrenceMap(width=width, height=height, counts=counts.reshape(height, width))


def densest_tile(occ: OccurrenceMap, size: int) -> dict:
    """Busiest size x size window among those tiled from the bottom-left.

    Partial tiles at the top/right edges are scored over their clipped
    region.  Returns origin (bottom-left), event count and share of total.
    """
    if size <= 0:
        raise DegenerateWindow("tile size must be positive")
    total = int(occ.counts.sum())
    best = {"origin_x": 0, "origin_y": 0, "events": -1}
    for oy in range(0, occ.height, size):
        for ox in range(0, occ.width, size):
            n = int(occ.counts[oy : oy + size, ox : ox + size].sum())
            if n > best["events"]:
                best = {"origin_x": ox, "origin_y": oy, "events": n}
    best["share"] = best["events"] / total if total else 0.0
    best["size"] = size
    return best


def occurrence_to_csv(occ: OccurrenceMap) -> str:
    """CSV grid, top row first (image orientation)."""
    rows = [",".join(str(v) for v in occ.counts[y]) for y in range(occ.height - 1, -1, -1)]
    return "\n".join(rows) + "\n"


def occurrence_to_pgm(occ: OccurrenceMap) -> bytes:
    """ASCII PGM heatmap scaled to 0..255, top row first."""
    peak = int(occ.counts.max())
    if peak > 0:
        scaled = (occ.counts * 255) // peak
    else:
        scaled = occ.counts
    lines = [f"P2", f"{occ.width} {occ.height}", "255"]
    for y in range(occ.height - 1, -1, -1):
        lines.append(" ".join(str(int(v)) for v in scaled[y]))
    return ("\n".join(lines) + "\n").encode("ascii")


def crop(stream, window: AttentionWindow):
    """Keep events inside the window and re-base coordinates to its origin.

    The window is clamped to the source canvas first; an empty intersection
    raises DegenerateWindow.
    """
    from .events import EventStream

    if window.width <= 0 or window.height <= 0:
        raise DegenerateWindow("window has non-positive size")
    x0 = max(0, window.origin_x)
    y0 = max(0, window.origin_y)
    x1 = min(stream.width, window.origin_x + window.width)
    y1 = min(stream.height, window.origin_y + window.height)
    if x1 <= x0 or y1 <= y0:
        raise DegenerateWindow("window does not intersect the canvas")
    keep = (stream.x >= x0) & (stream.x < x1) & (stream.y >= y0) & (stream.y < y1)
    return EventStream(
        width=x1 - x0,
        height=y1 - y0,
        t=stream.t[keep],
        x=stream.x[keep] - x0,
        y=stream.y[keep] - y0,
        p=stream.p[keep],
        label=stream.label,
        duration_us=stream.duration_us,
    )


def fit_canvas(stream, width: int, height: int):
    """Place the stream bottom-left aligned on a width x height canvas.

    Coordinates are unchanged; events beyond the canvas are dropped (they
    cannot produce spikes on the smaller input).
    """
    from .events import EventStream

    if width <= 0 or height <= 0:
        raise DegenerateWindow("canvas must have positive size")
    keep = (stream.x < width) & (stream.y < height)
    return EventStream(
        width=width,
        height=height,
        t=stream.t[keep],
        x=stream.x[keep],
        y=stream.y[keep],
        p=stream.p[keep],
        label=stream.label,
        duration_us=stream.duration_us,
    )


def accumulate(stream, t0_us: int, t_sample_us: int) -> SpikeFrame:
    """Binary frame of the events with t0 <= t < t0 + sample period."""
    bits = np.zeros((2, stream.height, stream.width), dtype=np.uint8)
    keep = (stream.t >= t0_us) & (stream.t < t0_us + t_sample_us)
    bits[stream.p[keep], stream.y[keep], stream.x[keep]] = 1
    return SpikeFrame(bits=bits)


def sample_frames(stream, t0_us: int, config: AccumulationConfig):
    """Split the clip starting at t0 into its per-period spike frames.

    If the clip would run past the stream, t0 is clamped back (to zero at
    most); periods beyond the last event simply produce empty frames.
    """
    config.validate()
    if t0_us + config.t_length_us > stream.duration_us:
        t0_us = max(0, stream.duration_us - config.t_length_us)
    return [
        accumulate(stream, t0_us + i * config.t_sample_us, config.t_sample_us)
        for i in range(config.frames_per_clip)
    ]


def random_clip(stream, t_length_us: int, rng) -> int:
    """Uniform clip start in [0, duration - clip length]; 0 if too short."""
    latest = stream.duration_us - t_length_us
    if latest <= 0:
        return 0
    return int(rng.integers(0, latest + 1))
