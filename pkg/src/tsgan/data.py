"""NAB-style series / label ingestion, normalisation and sliding windows."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"


class DataError(ValueError):
    pass


def parse_time(text: str) -> dt.datetime:
    text = text.strip()
    try:
        return dt.datetime.strptime(text, TIME_FORMAT)
    except ValueError:
        pass
    try:
        # NAB label files carry fractional seconds ("2014-02-19 10:50:00.000000")
        return dt.datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"unparseable timestamp {text!r}") from None


def format_time(t: dt.datetime) -> str:
    return t.strftime(TIME_FORMAT)


@dataclass
class TimeSeries:
    name: str
    timestamps: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")
        if len(self.values) < 2:
            raise DataError(f"series {self.name!r} needs at least 2 points")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"series {self.name!r} contains non-finite values")
        for k in range(1, len(self.timestamps)):
            if not self.timestamps[k] > self.timestamps[k - 1]:
                raise DataError(f"series {self.name!r}: timestamp at row {k} is not after row {k - 1}")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class AnomalySpan:
    begin: dt.datetime
    end: dt.datetime

    def __post_init__(self):
        if self.begin > self.end:
            raise DataError(f"anomaly span begins after it ends: {self.begin} > {self.end}")


@dataclass
class Window:
    start_index: int
    values: np.ndarray
    start_time: dt.datetime
    end_time: dt.datetime


@dataclass
class WindowSet:
    windows: list
    source_name: str
    normalization: Optional[tuple] = None
    stride: int = 1

    def __len__(self):
        return len(self.windows)

    def values_array(self) -> np.ndarray:
        if not self.windows:
            return np.empty((0, 0))
        return np.stack([w.values for w in self.windows])

    def to_csv(self, path, labels=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["startIndex", "startTime", "endTime", "label"])
            for k, win in enumerate(self.windows):
                w.writerow([win.start_index, format_time(win.start_time), format_time(win.end_time),
                            "" if labels is None else int(labels[k])])


def load_series(path, name: Optional[str] = None) -> TimeSeries:
    """Read a ``timestamp,value`` CSV.  Blank or malformed cells are errors."""
    path = Path(path)
    timestamps, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["timestamp", "value"]:
            raise DataError(f"{path}: expected header 'timestamp,value', got {header}")
        for row_no, row in enumerate(reader):
            if len(row) < 2:
                raise DataError(f"{path}: row {row_no} has {len(row)} columns")
            try:
                t = parse_time(row[0])
            except DataError as exc:
                raise DataError(f"{path}: row {row_no}: {exc}") from None
            try:
                v = float(row[1])
            except ValueError:
                raise DataError(f"{path}: row {row_no}: unparseable value {row[1]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {row_no}: non-finite value {row[1]!r}")
            if timestamps and not t > timestamps[-1]:
                raise DataError(f"{path}: row {row_no}: timestamp {row[0]} is not after the previous row")
            timestamps.append(t)
            values.append(v)
    return TimeSeries(name or path.name, timestamps, np.array(values))


def load_labels(path, dataset_key: str) -> list[AnomalySpan]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if dataset_key not in doc:
        raise DataError(f"{path}: no labels for {dataset_key!r}; available keys: {sorted(doc)}")
    spans = [AnomalySpan(parse_time(b), parse_time(e)) for b, e in doc[dataset_key]]
    return sorted(spans, key=lambda s: (s.begin, s.end))


def normalize(series: TimeSeries) -> tuple[TimeSeries, tuple[float, float]]:
    """Map values linearly onto [-1, 1] using the series' own min and max."""
    lo, hi = float(series.values.min()), float(series.values.max())
    if not hi > lo:
        raise DataError(f"series {series.name!r} is constant; cannot normalise")
    scaled = 2.0 * (series.values - lo) / (hi - lo) - 1.0
    return TimeSeries(series.name, list(series.timestamps), scaled), (lo, hi)


def denormalize(series: TimeSeries, params: tuple[float, float]) -> TimeSeries:
    lo, hi = params
    return TimeSeries(series.name, list(series.timestamps),
                      (series.values + 1.0) * (hi - lo) / 2.0 + lo)


def window_count(length: int, s_w: int, stride: int) -> int:
    return (length - s_w) // stride + 1


def sliding_windows(series: TimeSeries, s_w: int, stride: int,
                    normalization: Optional[tuple] = None) -> WindowSet:
    if s_w < 1 or stride < 1:
        raise DataError(f"window length and stride must be positive (got {s_w}, {stride})")
    n = len(series)
    if n < s_w:
        raise DataError(f"series {series.name!r} has {n} points, shorter than window {s_w}")
    windows = []
    for start in range(0, n - s_w + 1, stride):
        windows.append(Window(start, series.values[start:start + s_w].copy(),
                              series.timestamps[start], series.timestamps[start + s_w - 1]))
    return WindowSet(windows, series.name, normalization, stride)


def label_windows(window_set: WindowSet, spans: Sequence[AnomalySpan]) -> np.ndarray:
    """1 where a window's closed time range intersects any closed span."""
    labels = np.zeros(len(window_set), dtype=np.int64)
    for k, w in enumerate(window_set.windows):
        for s in spans:
            if w.start_time <= s.end and s.begin <= w.end_time:
                labels[k] = 1
                break
    return labels


def label_time_ranges(start_times, end_times, spans: Sequence[AnomalySpan]) -> np.ndarray:
    return np.array([int(any(a <= s.end and s.begin <= b for s in spans))
                     for a, b in zip(start_times, end_times)], dtype=np.int64)


# --- synthetic fixtures ---------------------------------------------------------

@dataclass
class SynthSpec:
    length: int = 2000
    period: float = 50.0
    amplitude: float = 0.8
    bursts: int = 3
    burst_length: int = 5
    spike_value: float = 3.0
    noise: float = 0.02
    seed: int = 0
    start: str = "2020-01-01 00:00:00"
    step_minutes: int = 5
    margin: int = 60
    burst_positions: list = field(default_factory=list)


def make_synthetic(spec: SynthSpec = SynthSpec(), name: str = "synth.csv"):
    """Sine wave with injected spike bursts.  Returns (TimeSeries, spans)."""
    rng = np.random.default_rng([spec.seed, 7])
    t = np.arange(spec.length)
    values = spec.amplitude * np.sin(2 * np.pi * t / spec.period)
    if spec.noise > 0:
        values = values + rng.normal(0.0, spec.noise, size=spec.length)
    positions = list(spec.burst_positions) or _burst_positions(spec, rng)
    start = parse_time(spec.start)
    stamps = [start + dt.timedelta(minutes=spec.step_minutes * k) for k in range(spec.length)]
    spans = []
    for p in positions:
        values[p:p + spec.burst_length] = spec.spike_value
        spans.append(AnomalySpan(stamps[p], stamps[p + spec.burst_length - 1]))
    return TimeSeries(name, stamps, values), spans


def _burst_positions(spec: SynthSpec, rng: np.random.Generator) -> list[int]:
    margin = min(spec.margin, spec.length // 8)  # short fixtures get a proportional margin
    lo, hi = margin, spec.length - margin - spec.burst_length
    gap = 2 * margin
    for _ in range(1000):
        picks = sorted(int(p) for p in rng.integers(lo, hi, size=spec.bursts))
        if all(b - a >= gap for a, b in zip(picks, picks[1:])):
            return picks
    raise DataError("could not place spike bursts; series too short")


def make_constant(length: int = 200, level: float = 0.5, jitter: float = 0.01, seed: int = 0,
                  name: str = "constant.csv") -> TimeSeries:
    rng = np.random.default_rng([seed, 8])
    start = parse_time("2020-01-01 00:00:00")
    stamps = [start + dt.timedelta(minutes=5 * k) for k in range(length)]
    return TimeSeries(name, stamps, level + rng.uniform(-jitter, jitter, size=length))


def write_series(series: TimeSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "value"])
        for t, v in zip(series.timestamps, series.values):
            w.writerow([format_time(t), repr(float(v))])


def write_labels(spans_by_key: dict, path) -> None:
    doc = {key: [[format_time(s.begin), format_time(s.end)] for s in spans]
           for key, spans in spans_by_key.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
