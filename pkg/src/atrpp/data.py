"""Event sequences, aligned time series, dataset splits and their file formats.

Event files are JSONL, one record per line::

    {"id": "c0", "Z": 3, "events": [{"dim": 0, "time": 0.5}, ...]}

An optional ``"horizon"`` key carries the end of the observation window.
Series files are CSV with header ``id,start_time,step,f0,f1,...`` and one row
per sample, grouped by id.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


@dataclass(frozen=True)
class Event:
    dim: int
    time: float


@dataclass(frozen=True)
class EventSequence:
    events: tuple[Event, ...]
    num_dims: int
    horizon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    @classmethod
    def from_arrays(cls, dims, times, num_dims, horizon=None) -> "EventSequence":
        return cls(tuple(Event(int(d), float(t)) for d, t in zip(dims, times)),
                   int(num_dims), None if horizon is None else float(horizon))

    def __len__(self):
        return len(self.events)

    @property
    def dims(self) -> np.ndarray:
        return np.array([e.dim for e in self.events], dtype=np.int64)

    @property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=float)

    def prefix(self, n: int) -> "EventSequence":
        return EventSequence(self.events[:n], self.num_dims, self.horizon)


@dataclass(frozen=True)
class TimeSeries:
    start_time: float
    step: float
    samples: np.ndarray  # T x F

    def __post_init__(self):
        arr = np.array(self.samples, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_features(self) -> int:
        return self.samples.shape[1]

    @property
    def end_time(self) -> float:
        return self.start_time + (self.num_samples - 1) * self.step

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (self.start_time == other.start_time and self.step == other.step
                and np.array_equal(self.samples, other.samples))

    __hash__ = None


@dataclass(frozen=True)
class Record:
    id: str
    sequence: EventSequence
    series: TimeSeries | None = None


SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Dataset:
    records: tuple[Record, ...]
    num_dims: int
    split: dict = field(default_factory=dict)  # record id -> split name

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def part(self, name: str) -> list[Record]:
        return [r for r in self.records if self.split.get(r.id) == name]

    @property
    def train(self) -> list[Record]:
        return self.part("train")

    @property
    def validation(self) -> list[Record]:
        return self.part("validation")

    @property
    def test(self) -> list[Record]:
        return self.part("test")

    @property
    def num_features(self) -> int:
        for r in self.records:
            if r.series is not None:
                return r.series.num_features
        return 0


def validate_record(record: Record) -> list[str]:
    """Check every invariant of a record; return one message per violation."""
    problems = []
    seq = record.sequence
    Z = seq.num_dims
    if not isinstance(Z, (int, np.integer)) or Z < 1:
        problems.append(f"sequence.num_dims: must be a positive integer (got {Z!r})")
        Z = None
    if len(seq.events) == 0:
        problems.append("sequence.events: length >= 1 required")
    prev = -math.inf
    for k, ev in enumerate(seq.events):
        if Z is not None and not 0 <= ev.dim < Z:
            problems.append(f"events[{k}].dim: dim < Z violated (dim={ev.dim}, Z={Z})")
        if not math.isfinite(ev.time) or ev.time < 0:
            problems.append(f"events[{k}].time: time >= 0 and finite violated ({ev.time!r})")
        elif ev.time < prev:
            problems.append(f"events[{k}].time: timestamps nondecreasing violated "
                            f"({ev.time!r} < {prev!r})")
        if math.isfinite(ev.time):
            prev = max(prev, ev.time)
    if seq.horizon is not None and seq.events and seq.horizon < max(e.time for e in seq.events):
        problems.append("sequence.horizon: must not precede the last event")

    ts = record.series
    if ts is not None:
        if not (math.isfinite(ts.step) and ts.step > 0):
            problems.append(f"series.step: step > 0 violated ({ts.step!r})")
        if ts.samples.ndim != 2 or ts.num_samples < 1:
            problems.append("series.samples: T >= 1 samples required")
        elif not np.all(np.isfinite(ts.samples)):
            problems.append("series.samples: all entries finite violated")
        if seq.events and ts.step > 0:
            times = [e.time for e in seq.events]
            if ts.start_time > min(times):
                problems.append("series.start_time: series must start at or before the first event")
            if ts.end_time < max(times):
                problems.append("series coverage: last sample precedes the last event")
    return problems


def align_series_to_time(series: TimeSeries, t: float) -> int:
    """Index of the last sample at or before ``t``, clamped to the final sample."""
    if t < series.start_time:
        raise DataError(f"event precedes series coverage (t={t}, start={series.start_time})")
    k = int(math.floor((t - series.start_time) / series.step))
    # guard against floor landing one past due to rounding of the quotient
    if k > 0 and series.start_time + k * series.step > t:
        k -= 1
    return min(k, series.num_samples - 1)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    exact = [r * n for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_dataset(records: Sequence[Record], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Shuffle records with ``seed`` and partition them into train/validation/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    records = list(records)
    if len(records) < 3:
        raise DataError("at least 3 records are needed to split a dataset")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("record ids must be unique")
    Zs = {r.sequence.num_dims for r in records}
    if len(Zs) != 1:
        raise DataError(f"records disagree on Z: {sorted(Zs)}")
    Fs = {r.series.num_features for r in records if r.series is not None}
    if len(Fs) > 1:
        raise DataError(f"records disagree on series width: {sorted(Fs)}")

    perm = np.random.default_rng(seed).permutation(len(records))
    sizes = split_sizes(len(records), ratios)
    split = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for k in perm[start:start + size]:
            split[records[k].id] = name
        start += size
    return Dataset(tuple(records), Zs.pop(), split)


# ---------------------------------------------------------------- file IO

def _record_to_json(record: Record) -> str:
    obj = {"id": record.id, "Z": record.sequence.num_dims,
           "events": [{"dim": e.dim, "time": e.time} for e in record.sequence.events]}
    if record.sequence.horizon is not None:
        obj["horizon"] = record.sequence.horizon
    return json.dumps(obj)


def write_events(records: Iterable[Record], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(_record_to_json(r) + "\n")


def read_events(path) -> list[Record]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                Z = int(obj["Z"])
                events = []
                for ev in obj["events"]:
                    dim, time = ev["dim"], ev["time"]
                    if not isinstance(dim, int) or isinstance(dim, bool):
                        raise DataError(f"dim must be an integer, got {dim!r}")
                    events.append(Event(dim, float(time)))
                horizon = obj.get("horizon")
                seq = EventSequence(tuple(events), Z, None if horizon is None else float(horizon))
                rec = Record(str(obj["id"]), seq)
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: malformed record (missing field {exc})") from exc
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
            for ev in events:
                if not 0 <= ev.dim < Z:
                    raise DataError(f"{path}:{lineno}: dim {ev.dim} out of range for Z={Z}")
            records.append(rec)
    return records


def write_series(records: Iterable[Record], path) -> None:
    records = [r for r in records if r.series is not None]
    width = records[0].series.num_features if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "start_time", "step"] + [f"f{k}" for k in range(width)])
        for r in records:
            s = r.series
            for row in s.samples:
                w.writerow([r.id, repr(float(s.start_time)), repr(float(s.step))]
                           + [repr(float(x)) for x in row])


def read_series(path) -> dict[str, TimeSeries]:
    rows: dict[str, list] = {}
    meta: dict[str, tuple[float, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "start_time", "step"]:
            raise DataError(f"{path}:1: header must start with id,start_time,step")
        width = len(header) - 3
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width + 3:
                raise DataError(f"{path}:{lineno}: expected {width + 3} fields, got {len(row)}")
            try:
                rid, start, step = row[0], float(row[1]), float(row[2])
                values = [float(x) for x in row[3:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed number ({exc})") from exc
            if rid in meta and meta[rid] != (start, step):
                raise DataError(f"{path}:{lineno}: start_time/step changed within id {rid!r}")
            meta[rid] = (start, step)
            rows.setdefault(rid, []).append(values)
    return {rid: TimeSeries(meta[rid][0], meta[rid][1], np.array(v, dtype=float).reshape(len(v), width))
            for rid, v in rows.items()}


def write_records(records: Sequence[Record], events_path, series_path=None) -> None:
    write_events(records, events_path)
    if series_path is not None:
        write_series(records, series_path)


def read_records(events_path, series_path=None) -> list[Record]:
    """Read an event file and, optionally, the series file that accompanies it."""
    records = read_events(events_path)
    if series_path is None or not Path(series_path).exists():
        return records
    series = read_series(series_path)
    return [Record(r.id, r.sequence, series.get(r.id)) for r in records]


def write_split(dataset: Dataset, path) -> None:
    obj = {name: [r.id for r in dataset.part(name)] for name in SPLITS}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def read_split(path) -> dict:
    obj = json.loads(Path(path).read_text())
    return {rid: name for name in SPLITS for rid in obj.get(name, [])}


def load_dataset(directory) -> Dataset:
    """Load ``events.jsonl`` (+ ``series.csv``, ``split.json``) from a directory."""
    directory = Path(directory)
    records = read_records(directory / "events.jsonl", directory / "series.csv")
    if not records:
        raise DataError(f"{directory}: no records")
    Zs = {r.sequence.num_dims for r in records}
    if len(Zs) != 1:
        raise DataError(f"records disagree on Z: {sorted(Zs)}")
    split_path = directory / "split.json"
    split = read_split(split_path) if split_path.exists() else {r.id: "train" for r in records}
    return Dataset(tuple(records), Zs.pop(), split)


def save_dataset(dataset: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_records(dataset.records, directory / "events.jsonl",
                  directory / "series.csv" if dataset.num_features else None)
    write_split(dataset, directory / "split.json")
