"""Metric ingestion: parsing, missing-value policy, feature filtering, scaling.

Frames live on a one-minute grid.  Timestamps inside a :class:`MetricFrame`
are epoch *minutes*; on disk they are epoch seconds aligned to the minute.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    AllRowsDropped,
    EmptyFrame,
    FrameTooShort,
    MissingColumn,
    NonUniformGrid,
    ParseError,
    UnknownMetric,
)


class Category(str, enum.Enum):
    ERROR_LIKE = "error_like"
    UTILIZATION_LIKE = "utilization_like"


@dataclass(frozen=True)
class MetricColumn:
    name: str
    category: Category = Category.UTILIZATION_LIKE
    is_qos: bool = False

    def to_json(self) -> dict:
        return {"name": self.name, "category": self.category.value, "is_qos": self.is_qos}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricColumn":
        try:
            return cls(str(obj["name"]), Category(obj.get("category", "utilization_like")),
                       bool(obj.get("is_qos", False)))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad metric declaration {obj!r}: {exc}") from None


@dataclass(frozen=True)
class Schema:
    """Column categories plus the feature-selection allowlist."""

    metrics: tuple[MetricColumn, ...]
    allowlist: tuple[str, ...] = ()

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.metrics]

    @property
    def qos(self) -> list[str]:
        return [m.name for m in self.metrics if m.is_qos]

    def to_json(self) -> dict:
        return {"metrics": [m.to_json() for m in self.metrics], "allowlist": list(self.allowlist)}

    @classmethod
    def from_json(cls, obj: dict) -> "Schema":
        if "metrics" not in obj:
            raise ParseError("schema lacks 'metrics'")
        metrics = tuple(MetricColumn.from_json(m) for m in obj["metrics"])
        names = [m.name for m in metrics]
        if len(set(names)) != len(names):
            raise ParseError("duplicate metric names in schema")
        return cls(metrics, tuple(obj.get("allowlist", ())))

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        return cls.from_json(obj)


@dataclass(frozen=True, eq=False)
class MetricFrame:
    """Multivariate metric series; ``values`` rows follow ``timestamps``.

    Missing cells are NaN.  A freshly loaded frame sits on a gap-free
    one-minute grid; dropping rows in :func:`handle_missing` may leave gaps,
    which downstream windowing detects from the timestamps.
    """

    timestamps: np.ndarray
    columns: tuple[MetricColumn, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape != (len(ts), len(self.columns)):
            raise ValueError(f"values shape {vals.shape} != ({len(ts)}, {len(self.columns)})")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        ts = ts.copy()
        vals = vals.copy()
        ts.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "columns", tuple(self.columns))

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def qos(self) -> list[str]:
        return [c.name for c in self.columns if c.is_qos]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownMetric(name) from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def select(self, names: Sequence[str]) -> "MetricFrame":
        idx = [self.index(n) for n in names]
        return MetricFrame(self.timestamps, tuple(self.columns[i] for i in idx), self.values[:, idx])

    def rows(self, sel: slice | np.ndarray) -> "MetricFrame":
        return MetricFrame(self.timestamps[sel], self.columns, self.values[sel])

    def is_contiguous(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.timestamps) == 1))


# -- loading ------------------------------------------------------------------

def _schema_for(names: Sequence[str], schema: Schema | None) -> tuple[MetricColumn, ...]:
    if schema is None:
        return tuple(MetricColumn(n) for n in names)
    missing = [m.name for m in schema.metrics if m.name not in names]
    if missing:
        raise MissingColumn(f"declared metrics absent from data: {missing}")
    return schema.metrics


def _to_grid(stamps: list[int], rows: list[list[float]], lines: list[int],
             columns: tuple[MetricColumn, ...]) -> MetricFrame:
    if not stamps:
        raise EmptyFrame("no data rows")
    order = sorted(range(len(stamps)), key=lambda i: stamps[i])
    for a, b in zip(order, order[1:]):
        if stamps[a] == stamps[b]:
            raise ParseError(f"duplicate timestamp {stamps[b]}", line=lines[b])
    for i in order:
        if stamps[i] % 60 != 0:
            raise NonUniformGrid(f"timestamp {stamps[i]} (line {lines[i]}) is not minute aligned")
    minutes = np.array([stamps[i] // 60 for i in order], dtype=np.int64)
    start, stop = int(minutes[0]), int(minutes[-1])
    n = stop - start + 1
    # a coarser sampling interval shows up as a grid that is mostly holes
    if n > 2 * len(minutes) - 1 and len(minutes) > 1:
        raise NonUniformGrid(
            f"{len(minutes)} rows span {n} minutes; data is not on a one-minute grid")
    values = np.full((n, len(columns)), np.nan)
    values[minutes - start] = np.array([rows[i] for i in order], dtype=np.float64)
    return MetricFrame(np.arange(start, stop + 1, dtype=np.int64), columns, values)


def _parse_number(text: str, line: int, name: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "null", "none"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"column {name!r}: cannot parse {text!r}", line=line) from None


def _parse_stamp(raw: object, line: int) -> int:
    try:
        val = float(raw)  # type: ignore[arg-type]
    except (TypeError, ValueError):
        raise ParseError(f"bad timestamp {raw!r}", line=line) from None
    if not math.isfinite(val) or val != int(val):
        raise ParseError(f"bad timestamp {raw!r}", line=line)
    return int(val)


def load_metric_frame(path: str | Path, schema: Schema | None = None) -> MetricFrame:
    """Read a metric CSV or JSONL file onto a one-minute grid.

    Gaps in the timestamps become all-missing rows.  Only columns declared in
    ``schema`` are kept, in schema order; without a schema every column is
    treated as a non-QoS utilization metric.
    """
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        return _load_jsonl(path, schema)
    return _load_csv(path, schema)


def _load_csv(path: Path, schema: Schema | None) -> MetricFrame:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp":
            raise MissingColumn("first CSV column must be 'timestamp'")
        columns = _schema_for(header[1:], schema)
        col_idx = [header.index(c.name) for c in columns]
        stamps, rows, lines = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line=lineno)
            stamps.append(_parse_stamp(rec[0], lineno))
            rows.append([_parse_number(rec[j], lineno, header[j]) for j in col_idx])
            lines.append(lineno)
    return _to_grid(stamps, rows, lines, columns)


def _load_jsonl(path: Path, schema: Schema | None) -> MetricFrame:
    records = []
    seen: dict[str, None] = {}
    with path.open() as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
                stamp = _parse_stamp(obj["timestamp"], lineno)
                vals = obj["values"]
                if not isinstance(vals, dict):
                    raise TypeError("'values' must be an object")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from None
            for k in vals:
                seen.setdefault(k)
            records.append((lineno, stamp, vals))
    columns = _schema_for(list(seen), schema)
    stamps, rows, lines = [], [], []
    for lineno, stamp, vals in records:
        row = []
        for c in columns:
            v = vals.get(c.name)
            if v is None:
                row.append(math.nan)
            elif isinstance(v, (int, float)) and not isinstance(v, bool):
                row.append(float(v))
            else:
                raise ParseError(f"column {c.name!r}: non-numeric {v!r}", line=lineno)
        stamps.append(stamp)
        rows.append(row)
        lines.append(lineno)
    return _to_grid(stamps, rows, lines, columns)


def write_metric_csv(frame: MetricFrame, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["timestamp", *frame.names])
        for t, row in zip(frame.timestamps, frame.values):
            out.writerow([int(t) * 60, *("" if math.isnan(v) else repr(float(v)) for v in row)])


# -- cleaning -----------------------------------------------------------------

@dataclass(frozen=True)
class MissingReport:
    zero_filled: int
    dropped_rows: int


def handle_missing(frame: MetricFrame) -> tuple[MetricFrame, MissingReport]:
    """Zero-fill error-like gaps, then drop rows with utilization gaps."""
    vals = np.array(frame.values)
    err_cols = [i for i, c in enumerate(frame.columns) if c.category is Category.ERROR_LIKE]
    util_cols = [i for i, c in enumerate(frame.columns) if c.category is not Category.ERROR_LIKE]
    sub = vals[:, err_cols]
    filled = int(np.isnan(sub).sum())
    sub[np.isnan(sub)] = 0.0
    vals[:, err_cols] = sub
    keep = ~np.isnan(vals[:, util_cols]).any(axis=1)
    if not keep.any():
        raise AllRowsDropped("every row has a missing utilization value")
    out = MetricFrame(frame.timestamps[keep], frame.columns, vals[keep])
    return out, MissingReport(filled, int((~keep).sum()))


@dataclass(frozen=True)
class SelectionConfig:
    var_floor: float = 1e-12
    corr_ceiling: float = 0.99
    allowlist: tuple[str, ...] = field(default_factory=tuple)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


def select_features(frame: MetricFrame, cfg: SelectionConfig = SelectionConfig()) -> MetricFrame:
    """Drop low-variance columns, then the later member of redundant pairs.

    A pair is redundant when both the Pearson and Spearman coefficients reach
    ``corr_ceiling`` in magnitude.  QoS and allowlisted columns are never
    dropped and never take part in the pair test.
    """
    if np.isnan(frame.values).any():
        raise ValueError("select_features needs a frame without missing cells")
    protected = {c.name for c in frame.columns if c.is_qos} | set(cfg.allowlist)
    keep = []
    for i, c in enumerate(frame.columns):
        if c.name in protected or float(np.var(frame.values[:, i])) >= cfg.var_floor:
            keep.append(i)
    candidates = [i for i in keep if frame.columns[i].name not in protected]
    ranks = {i: rankdata(frame.values[:, i]) for i in candidates}
    dropped: set[int] = set()
    for a_pos, i in enumerate(candidates):
        if i in dropped:
            continue
        for j in candidates[a_pos + 1:]:
            if j in dropped:
                continue
            r = _pearson(frame.values[:, i], frame.values[:, j])
            if abs(r) < cfg.corr_ceiling:
                continue
            rho = _pearson(ranks[i], ranks[j])
            if abs(rho) >= cfg.corr_ceiling:
                dropped.add(j)
    names = [frame.columns[i].name for i in keep if i not in dropped]
    return frame.select(names)


# -- scaling ------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationStats:
    mins: dict[str, float]
    maxs: dict[str, float]
    epsilon: float = 1e-9

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        for k, lo in self.mins.items():
            if self.maxs[k] < lo:
                raise ValueError(f"max < min for {k}")

    def scale(self, name: str, value: float | np.ndarray, clamp: bool = True):
        """Map raw value(s) of metric ``name`` into normalized units."""
        if name not in self.mins:
            raise UnknownMetric(name)
        lo, hi = self.mins[name], self.maxs[name]
        out = (np.asarray(value, dtype=np.float64) - lo) / (hi - lo + self.epsilon)
        if clamp:
            out = np.clip(out, 0.0, 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def to_json(self) -> dict:
        return {"mins": self.mins, "maxs": self.maxs, "epsilon": self.epsilon}

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls({k: float(v) for k, v in obj["mins"].items()},
                   {k: float(v) for k, v in obj["maxs"].items()}, float(obj["epsilon"]))


def fit_normalizer(frame: MetricFrame, epsilon: float = 1e-9) -> NormalizationStats:
    """Record per-column min/max.  Call on the training split only."""
    if len(frame) == 0:
        raise EmptyFrame("cannot fit normalizer on an empty frame")
    if np.isnan(frame.values).any():
        raise ValueError("fit_normalizer needs a frame without missing cells")
    lo = frame.values.min(axis=0)
    hi = frame.values.max(axis=0)
    return NormalizationStats({n: float(v) for n, v in zip(frame.names, lo)},
                              {n: float(v) for n, v in zip(frame.names, hi)}, epsilon)


def normalize(frame: MetricFrame, stats: NormalizationStats) -> MetricFrame:
    """Min-max scale with training stats; values outside the fitted range clamp to [0, 1].

    Not idempotent: a second pass rescales already-scaled values.
    """
    cols = [stats.scale(n, frame.values[:, i]) for i, n in enumerate(frame.names)]
    vals = np.column_stack(cols) if cols else frame.values
    return MetricFrame(frame.timestamps, frame.columns, vals)


def window(frame: MetricFrame, w: int, stride: int = 1) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(t, X)`` for windows covering rows (t - w, t], ascending in t."""
    n = len(frame)
    if stride < 1 or w < 1:
        raise ValueError("w and stride must be >= 1")
    if n < w:
        raise FrameTooShort(f"frame has {n} rows, window needs {w}")
    for end in range(w - 1, n, stride):
        yield int(frame.timestamps[end]), frame.values[end - w + 1:end + 1]


def window_count(n: int, w: int, stride: int = 1) -> int:
    return 0 if n < w else (n - w) // stride + 1
