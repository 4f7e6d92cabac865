"""Proxy labels for extreme events on QoS metrics.

A window of ``window`` minutes qualifies when at least ``alpha`` of its
samples exceed the metric's percentile threshold and at least ``k`` alerts
fired inside it.  Every minute covered by a qualifying window is positive.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySeries, MissingQosMetric, OutOfRange, ParseError, UnknownSeverity
from .ingest import MetricFrame


class Severity(str, enum.Enum):
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


@dataclass(frozen=True, order=True)
class AlertRecord:
    timestamp: int  # epoch minutes
    monitor: str = ""
    severity: Severity = Severity.HIGH
    service: str = ""

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp * 60, "monitor": self.monitor,
                "severity": self.severity.value, "service": self.service}


def load_alerts(path: str | Path) -> list[AlertRecord]:
    """Parse alert JSONL (epoch-second timestamps) sorted by time."""
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ts = obj["timestamp"]
                if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
                    raise TypeError(f"bad timestamp {ts!r}")
                sev = obj.get("severity", "high")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from None
            try:
                severity = Severity(sev)
            except ValueError:
                raise UnknownSeverity(f"line {lineno}: severity {sev!r}") from None
            out.append(AlertRecord(int(ts) // 60, str(obj.get("monitor", "")), severity,
                                   str(obj.get("service", ""))))
    out.sort(key=lambda a: a.timestamp)
    return out


def write_alerts(alerts: Iterable[AlertRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for a in alerts:
            fh.write(json.dumps(a.to_json(), sort_keys=True) + "\n")


def percentile_value(series: Sequence[float] | np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest finite value."""
    arr = np.asarray(series, dtype=np.float64)
    arr = np.sort(arr[~np.isnan(arr)])
    if arr.size == 0:
        raise EmptySeries("percentile of an empty series")
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    rank = math.ceil(Fraction(percentile) * arr.size / 100)
    return float(arr[max(rank, 1) - 1])


@dataclass(frozen=True)
class LabelParams:
    window: int = 10
    percentile: float = 95.0
    alpha: float = 0.5
    k: int = 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ProxyLabelSeries:
    metric: str
    timestamps: np.ndarray
    labels: np.ndarray
    params: LabelParams
    threshold: float

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.timestamps):
            raise ValueError("labels and timestamps differ in length")

    @property
    def density(self) -> float:
        return float(np.mean(self.labels)) if len(self.labels) else 0.0


def label_at(series: ProxyLabelSeries, t: int) -> bool:
    i = int(np.searchsorted(series.timestamps, t))
    if i >= len(series.timestamps) or series.timestamps[i] != t:
        raise OutOfRange(f"t={t} is not on the label grid of {series.metric}")
    return bool(series.labels[i])


def qos_thresholds(reference: MetricFrame, qos: Sequence[str], percentile: float) -> dict[str, float]:
    """Percentile thresholds per QoS metric, taken from raw training values."""
    out = {}
    for name in qos:
        if name not in reference.names:
            raise MissingQosMetric(name)
        out[name] = percentile_value(reference.column(name), percentile)
    return out


def _label_one(ts: np.ndarray, values: np.ndarray, alert_ts: np.ndarray,
               tau: float, p: LabelParams) -> np.ndarray:
    n = len(ts)
    labels = np.zeros(n, dtype=bool)
    if n == 0:
        return labels
    starts = ts
    # rows/alerts falling in [start, start + window)
    row_end = np.searchsorted(ts, starts + p.window, side="left")
    full = starts + p.window - 1 <= ts[-1]
    exceed = np.concatenate([[0], np.cumsum(values > tau)])
    n_exceed = exceed[row_end] - exceed[np.arange(n)]
    need = max(1, math.ceil(p.alpha * p.window - 1e-12))
    a_lo = np.searchsorted(alert_ts, starts, side="left")
    a_hi = np.searchsorted(alert_ts, starts + p.window, side="left")
    qualifies = full & (n_exceed >= need) & ((a_hi - a_lo) >= p.k)
    idx = np.flatnonzero(qualifies)
    cover = np.zeros(n + 1, dtype=np.int64)
    np.add.at(cover, idx, 1)
    np.add.at(cover, row_end[idx], -1)
    return np.cumsum(cover[:n]) > 0


def generate_proxy_labels(
    raw: MetricFrame,
    qos: Sequence[str],
    alerts: Sequence[AlertRecord],
    params: LabelParams = LabelParams(),
    reference: MetricFrame | None = None,
    thresholds: Mapping[str, float] | None = None,
) -> dict[str, ProxyLabelSeries]:
    """Label extreme-event minutes for each QoS metric of a raw frame.

    Thresholds come from ``thresholds`` if given, else from the
    ``params.percentile`` of ``reference`` (the raw training split; the whole
    frame when omitted).  A window needs at least one exceeding sample even
    when ``alpha`` is zero.
    """
    for name in qos:
        if name not in raw.names:
            raise MissingQosMetric(name)
    if thresholds is None:
        thresholds = qos_thresholds(reference if reference is not None else raw, qos,
                                    params.percentile)
    alert_ts = np.array(sorted(a.timestamp for a in alerts), dtype=np.int64)
    out = {}
    for name in qos:
        tau = float(thresholds[name])
        labels = _label_one(raw.timestamps, raw.column(name), alert_ts, tau, params)
        out[name] = ProxyLabelSeries(name, raw.timestamps, labels, params, tau)
    return out
