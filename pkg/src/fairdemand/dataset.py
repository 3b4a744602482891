"""Trip ingestion, the node-by-hour demand tensor, splits, windows, groups.

CSV formats
-----------
Trips: header ``pickup_datetime,pickup_zone``; ISO-8601 timestamps.  Naive
timestamps are read as UTC, aware ones are converted to UTC.

Attributes: header ``zone,race_white_pct,edu_bachelor_pct,age_young_pct,
income_low_pct`` with shares in [0, 1].  Extra columns are allowed.

Demand tensor files start with one ``# {json}`` metadata line, followed by
``timestamp,<zone ids...>`` and one row per interval (the N x T matrix
written column by column).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
DEFAULT_ATTRIBUTES = ("race_white_pct", "edu_bachelor_pct", "age_young_pct", "income_low_pct")
DEFAULT_DIRECTIONS = {
    "race_white_pct": "high",
    "edu_bachelor_pct": "high",
    "age_young_pct": "high",
    "income_low_pct": "low",
}

ADVANTAGED, MIDDLE, DISADVANTAGED = 1, 0, -1


class DataError(ValueError):
    """Input data violates a schema or precondition."""


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class TripRecord:
    pickup_timestamp: datetime
    pickup_zone_id: str


@dataclass
class IngestSummary:
    accepted: int = 0
    rejected: int = 0
    outside_zones: int = 0
    outside_range: int = 0
    reject_lines: list[int] = field(default_factory=list)
    dropped_zones: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "outside_zones": self.outside_zones,
            "outside_range": self.outside_range,
            "reject_lines": list(self.reject_lines),
            "dropped_zones": list(self.dropped_zones),
        }


def iter_trip_csv(path: str | Path, summary: IngestSummary | None = None) -> Iterator[TripRecord]:
    """Stream trip records, logging and counting rows that fail to parse."""
    summary = summary if summary is not None else IngestSummary()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty trips file")
        header = [h.strip() for h in header]
        try:
            i_ts, i_zone = header.index("pickup_datetime"), header.index("pickup_zone")
        except ValueError:
            raise DataError(f"{path}:1: expected header pickup_datetime,pickup_zone, got {header}") from None
        for line_no, row in enumerate(reader, start=2):
            try:
                zone = row[i_zone].strip()
                if not zone:
                    raise ValueError("empty zone id")
                yield TripRecord(parse_timestamp(row[i_ts]), zone)
            except (ValueError, IndexError) as exc:
                log.warning("%s:%d: rejected trip record (%s)", path, line_no, exc)
                summary.rejected += 1
                summary.reject_lines.append(line_no)


@dataclass(frozen=True)
class DemandTensor:
    """N x T trip counts; column ``t`` covers ``[t0 + t*interval, t0 + (t+1)*interval)``."""

    node_ids: tuple[str, ...]
    t0: datetime
    interval: timedelta
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] != len(self.node_ids):
            raise DataError(f"values shape {values.shape} does not match {len(self.node_ids)} nodes")
        if values.size and values.min() < 0:
            raise DataError("demand values must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def timestamp(self, t: int) -> datetime:
        return self.t0 + t * self.interval

    def columns(self, start: int, stop: int) -> "DemandTensor":
        return DemandTensor(self.node_ids, self.timestamp(start), self.interval, self.values[:, start:stop])

    def select_nodes(self, node_ids: Sequence[str]) -> "DemandTensor":
        index = {n: i for i, n in enumerate(self.node_ids)}
        rows = [index[n] for n in node_ids]
        return DemandTensor(tuple(node_ids), self.t0, self.interval, self.values[rows])

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_string())

    def to_csv_string(self) -> str:
        meta = {
            "kind": "demand_tensor",
            "t0": self.t0.isoformat(),
            "interval_seconds": self.interval.total_seconds(),
            "n_nodes": self.n_nodes,
            "n_steps": self.n_steps,
        }
        buf = io.StringIO()
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["timestamp", *self.node_ids])
        for t in range(self.n_steps):
            writer.writerow([self.timestamp(t).isoformat(), *(int(v) for v in self.values[:, t])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path: str | Path) -> "DemandTensor":
        with open(path, newline="") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise DataError(f"{path}: missing metadata line")
            meta = json.loads(first[2:])
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[int(v) for v in row[1:]] for row in reader]
        values = np.array(rows, dtype=np.int64).T.reshape(len(header) - 1, len(rows))
        return cls(
            tuple(header[1:]),
            datetime.fromisoformat(meta["t0"]),
            timedelta(seconds=meta["interval_seconds"]),
            values,
        )


def aggregate_trips(
    records: Iterable[TripRecord],
    zones: Iterable[str],
    interval: timedelta = timedelta(hours=1),
    start: datetime | None = None,
    end: datetime | None = None,
    summary: IngestSummary | None = None,
) -> tuple[DemandTensor, IngestSummary]:
    """Count trips per zone and half-open interval in one pass over ``records``.

    Intervals are aligned to multiples of ``interval`` since the Unix epoch
    unless ``start`` is given.  Records outside ``zones`` or outside
    ``[start, end)`` are counted in the summary, not silently dropped.
    """
    zone_list = list(dict.fromkeys(zones))
    if not zone_list:
        raise DataError("zone set is empty")
    zone_index = {z: i for i, z in enumerate(zone_list)}
    summary = summary if summary is not None else IngestSummary()
    step = interval.total_seconds()
    origin = EPOCH if start is None else start.astimezone(timezone.utc)
    counts: Counter = Counter()
    for rec in records:
        zi = zone_index.get(rec.pickup_zone_id)
        if zi is None:
            summary.outside_zones += 1
            continue
        ts = rec.pickup_timestamp.astimezone(timezone.utc)
        if (start is not None and ts < origin) or (end is not None and ts >= end):
            summary.outside_range += 1
            continue
        bucket = math.floor((ts - origin).total_seconds() / step)
        counts[(zi, bucket)] += 1
        summary.accepted += 1
    if summary.accepted == 0:
        raise DataError("no trips fall inside the zone set and time range")

    buckets = [b for _, b in counts]
    first = 0 if start is not None else min(buckets)
    if end is not None:
        last = math.ceil((end.astimezone(timezone.utc) - origin).total_seconds() / step) - 1
    else:
        last = max(buckets)
    values = np.zeros((len(zone_list), last - first + 1), dtype=np.int64)
    for (zi, b), c in counts.items():
        values[zi, b - first] = c
    t0 = origin + first * interval
    return DemandTensor(tuple(zone_list), t0, interval, values), summary


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.10
    test_fraction: float = 0.20

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not 0 < f < 1 for f in fracs) or abs(sum(fracs) - 1) > 1e-9:
            raise DataError(f"split fractions must lie in (0,1) and sum to 1, got {fracs}")

    def sizes(self, n_steps: int) -> tuple[int, int, int]:
        n_train = math.floor(self.train_fraction * n_steps + 1e-9)
        n_val = math.floor(self.val_fraction * n_steps + 1e-9)
        return n_train, n_val, n_steps - n_train - n_val


def chronological_split(tensor: DemandTensor, spec: SplitSpec = SplitSpec()):
    """Contiguous train/val/test column ranges; the remainder goes to test."""
    if tensor.n_steps < 10:
        raise DataError(f"need at least 10 intervals to split, got {tensor.n_steps}")
    n_train, n_val, n_test = spec.sizes(tensor.n_steps)
    if min(n_train, n_val, n_test) <= 0:
        raise DataError(f"empty split for T={tensor.n_steps}: {(n_train, n_val, n_test)}")
    a, b = n_train, n_train + n_val
    return tensor.columns(0, a), tensor.columns(a, b), tensor.columns(b, tensor.n_steps)


@dataclass(frozen=True)
class WindowedSamples:
    """``X[s]`` holds the K columns before ``t_index[s]``; ``Y[s]`` the M from it."""

    K: int
    M: int
    X: np.ndarray  # (S, N, K)
    Y: np.ndarray  # (S, N, M)
    t_index: np.ndarray  # (S,) column index of the first target in the source tensor

    def __len__(self) -> int:
        return self.X.shape[0]


def make_windows(tensor: DemandTensor | np.ndarray, K: int, M: int) -> WindowedSamples:
    values = tensor.values if isinstance(tensor, DemandTensor) else np.asarray(tensor)
    if K < 1 or M < 1:
        raise DataError("K and M must be positive")
    T = values.shape[1]
    if T < K + M:
        raise DataError(f"series of length {T} is shorter than K+M={K + M}")
    count = T - K - M + 1
    win = np.lib.stride_tricks.sliding_window_view(values, K + M, axis=1)  # (N, count, K+M)
    win = np.ascontiguousarray(win.transpose(1, 0, 2), dtype=np.float64)
    return WindowedSamples(K, M, win[:, :, :K], win[:, :, K:], np.arange(K, K + count))


@dataclass(frozen=True)
class ProtectedAttributeTable:
    node_ids: tuple[str, ...]
    names: tuple[str, ...]
    Z: np.ndarray  # (N, Q)
    directions: tuple[str, ...]

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "directions", tuple(self.directions))
        if Z.shape != (len(self.node_ids), len(self.names)):
            raise DataError(f"attribute matrix shape {Z.shape} does not match ids/names")
        if len(self.directions) != len(self.names):
            raise DataError("one advantaged direction per attribute is required")
        if any(d not in ("high", "low") for d in self.directions):
            raise DataError(f"directions must be 'high' or 'low', got {self.directions}")
        if not np.all(np.isfinite(Z)) or Z.min(initial=0) < 0 or Z.max(initial=0) > 1:
            raise DataError("attribute values must be finite shares in [0, 1]")

    @property
    def Q(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown attribute {name!r}; have {self.names}") from None

    def subset(self, names: Sequence[str]) -> "ProtectedAttributeTable":
        cols = [self.index(n) for n in names]
        return ProtectedAttributeTable(
            self.node_ids, tuple(names), self.Z[:, cols], tuple(self.directions[c] for c in cols)
        )

    def select_nodes(self, node_ids: Sequence[str]) -> "ProtectedAttributeTable":
        index = {n: i for i, n in enumerate(self.node_ids)}
        return ProtectedAttributeTable(tuple(node_ids), self.names, self.Z[[index[n] for n in node_ids]],
                                       self.directions)

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["zone", *self.names])
        for node, row in zip(self.node_ids, self.Z):
            writer.writerow([node, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def read_attribute_csv(
    path: str | Path,
    directions: dict[str, str] | None = None,
    names: Sequence[str] | None = None,
) -> tuple[ProtectedAttributeTable, list[str]]:
    """Load attribute shares; rows with any missing or invalid value are dropped.

    Returns the table and the list of dropped zone ids.
    """
    directions = {**DEFAULT_DIRECTIONS, **(directions or {})}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "zone" not in reader.fieldnames:
            raise DataError(f"{path}:1: attribute CSV needs a 'zone' column")
        names = tuple(names) if names else tuple(c for c in reader.fieldnames if c != "zone")
        missing_cols = [n for n in names if n not in reader.fieldnames]
        if missing_cols:
            raise DataError(f"{path}:1: missing attribute columns {missing_cols}")
        ids, rows, dropped = [], [], []
        for line_no, row in enumerate(reader, start=2):
            zone = (row.get("zone") or "").strip()
            try:
                vals = [float(row[n]) for n in names]
                if not all(0.0 <= v <= 1.0 for v in vals):
                    raise ValueError("value outside [0, 1]")
            except (TypeError, ValueError) as exc:
                log.warning("%s:%d: dropping zone %r (%s)", path, line_no, zone, exc)
                dropped.append(zone)
                continue
            ids.append(zone)
            rows.append(vals)
    for n in names:
        if n not in directions:
            raise DataError(f"no advantaged direction configured for attribute {n!r}")
    Z = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return ProtectedAttributeTable(tuple(ids), names, Z, tuple(directions[n] for n in names)), dropped


def align_nodes(
    tensor: DemandTensor, table: ProtectedAttributeTable
) -> tuple[DemandTensor, ProtectedAttributeTable, list[str]]:
    """Keep only zones present in both artifacts, in the tensor's order."""
    have = set(table.node_ids)
    keep = [n for n in tensor.node_ids if n in have]
    dropped = [n for n in tensor.node_ids if n not in have]
    for n in dropped:
        log.warning("zone %r has trips but no attributes; dropped", n)
    if not keep:
        raise DataError("no zone has both trips and attributes")
    return tensor.select_nodes(keep), table.select_nodes(keep), dropped


@dataclass(frozen=True)
class GroupLabeling:
    """Per-attribute node labels: +1 advantaged, -1 disadvantaged, 0 middle."""

    names: tuple[str, ...]
    labels: np.ndarray  # (Q, N) int8
    thresholds: tuple[tuple[float, float], ...]  # (p40, p60) per attribute
    degenerate: tuple[bool, ...]

    def advantaged(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels[j] == ADVANTAGED)

    def disadvantaged(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.labels[j] == DISADVANTAGED)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def swapped(self) -> "GroupLabeling":
        return GroupLabeling(self.names, (-self.labels).astype(np.int8), self.thresholds, self.degenerate)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "labels": self.labels.tolist(),
            "thresholds": [list(t) for t in self.thresholds],
            "degenerate": list(self.degenerate),
        }


def label_groups(table: ProtectedAttributeTable, low: float = 40.0, high: float = 60.0) -> GroupLabeling:
    """Three-way labels from the 40th/60th percentiles of each attribute.

    Percentiles use linear interpolation between order statistics; labels use
    strict inequalities, so values equal to a threshold land in the middle band.
    """
    N = len(table.node_ids)
    if N < 5:
        raise DataError(f"need at least 5 nodes to label groups, got {N}")
    labels = np.zeros((table.Q, N), dtype=np.int8)
    thresholds, degenerate = [], []
    for j in range(table.Q):
        z = table.Z[:, j]
        p_low, p_high = (float(v) for v in np.percentile(z, [low, high]))
        above, below = z > p_high, z < p_low
        if table.directions[j] == "high":
            labels[j, above], labels[j, below] = ADVANTAGED, DISADVANTAGED
        else:
            labels[j, below], labels[j, above] = ADVANTAGED, DISADVANTAGED
        flat = bool(np.all(z == z[0])) or not above.any() or not below.any()
        if flat:
            log.warning("attribute %r has no usable variation; excluded from PAG", table.names[j])
        thresholds.append((p_low, p_high))
        degenerate.append(flat)
    return GroupLabeling(table.names, labels, tuple(thresholds), tuple(degenerate))


@dataclass(frozen=True)
class Normalizer:
    """Z-score transform fit on the training split; ``mode`` is 'node' or 'global'."""

    mode: str
    mean: np.ndarray  # (N, 1) or (1, 1)
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean.ravel().tolist(), "std": self.std.ravel().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        mean = np.array(d["mean"], dtype=np.float64).reshape(-1, 1)
        return cls(d["mode"], mean, np.array(d["std"], dtype=np.float64).reshape(-1, 1))


STD_FLOOR = 1e-8


def fit_normalizer(train: DemandTensor | np.ndarray, mode: str = "node") -> Normalizer:
    values = np.asarray(train.values if isinstance(train, DemandTensor) else train, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot fit a normalizer on an empty split")
    if mode == "node":
        mean = values.mean(axis=1, keepdims=True)
        std = values.std(axis=1, keepdims=True)
    elif mode == "global":
        mean = np.full((1, 1), values.mean())
        std = np.full((1, 1), values.std())
    else:
        raise DataError(f"unknown normalization mode {mode!r}")
    return Normalizer(mode, mean, np.maximum(std, STD_FLOOR))
