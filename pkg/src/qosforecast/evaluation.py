"""AUC-PR, thresholded precision/recall/F1, percentile sweeps and MTTD accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import SingleClass
from .infer import MixtureSeries, OutageEvent, youden_threshold
from .ingest import MetricFrame, NormalizationStats
from .labeling import AlertRecord, LabelParams, generate_proxy_labels, qos_thresholds
from .train import label_matrix


def auc_pr(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: sum over score groups of (R_k - R_{k-1}) * P_k.

    Scores are ranked in descending order and equal scores enter together,
    so the result does not depend on how ties are ordered.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise SingleClass("AUC-PR needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each tie group
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp_k = tp[ends]
    precision = tp_k / (ends + 1)
    recall = tp_k / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def prf_at(scores: Sequence[float], labels: Sequence[int], theta: float) -> PRF:
    """Precision/recall/F1 for the rule ``score > theta``; empty denominators give 0."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.size == 0:
        raise ValueError("prf_at needs at least one score")
    pred = s > theta
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(precision, recall, f1, degenerate or (precision + recall == 0))


# -- percentile sweep ---------------------------------------------------------

@dataclass(frozen=True)
class ThresholdResult:
    percentile: float
    theta: float
    youden_j: float
    prf: PRF


def evaluate_percentile(
    percentile: float,
    stats: NormalizationStats,
    qos: Sequence[str],
    gamma: int,
    train_mix: MixtureSeries,
    test_mix: MixtureSeries,
    raw: MetricFrame,
    train_raw: MetricFrame,
    alerts: Sequence[AlertRecord],
    label_params: LabelParams = LabelParams(),
) -> ThresholdResult:
    """Re-derive thresholds and labels at ``percentile`` and score cached mixtures.

    Nothing is re-encoded: only the threshold each mixture is integrated
    against changes.  The decision threshold is re-fit with Youden's J on the
    training mixtures.
    """
    taus = qos_thresholds(train_raw, qos, percentile)
    params = LabelParams(label_params.window, percentile, label_params.alpha, label_params.k)
    series = generate_proxy_labels(raw, qos, alerts, params, thresholds=taus)
    tau_norm = {q: stats.scale(q, taus[q], clamp=False) for q in qos}
    train_p = train_mix.probabilities(tau_norm)
    train_y = label_matrix(series, qos, train_mix.timestamps + gamma)
    youden = youden_threshold(train_p.ravel(), train_y.ravel())
    test_p = test_mix.probabilities(tau_norm)
    test_y = label_matrix(series, qos, test_mix.timestamps + gamma)
    return ThresholdResult(percentile, youden.theta, youden.j,
                           prf_at(test_p.ravel(), test_y.ravel(), youden.theta))


def f1_over_thresholds(percentiles: Sequence[float], **context) -> dict[float, ThresholdResult]:
    """:func:`evaluate_percentile` for each percentile, sharing the cached mixtures."""
    return {float(T): evaluate_percentile(T, **context) for T in percentiles}


# -- MTTD ---------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthOutage:
    """Impact start ``start`` (B), baseline detection ``detected`` (C), end (D); epoch minutes."""

    start: int
    detected: int
    end: int
    metrics: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.start < self.detected <= self.end:
            raise ValueError(f"need B < C <= D, got {self.start}, {self.detected}, {self.end}")

    def to_json(self) -> dict:
        return {"B": self.start * 60, "C": self.detected * 60, "D": self.end * 60,
                "metrics": list(self.metrics)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "GroundTruthOutage":
        return cls(int(obj["B"]) // 60, int(obj["C"]) // 60, int(obj["D"]) // 60,
                   tuple(obj.get("metrics", ())))


@dataclass(frozen=True)
class OutageMatch:
    outage: GroundTruthOutage
    flagged: int | None
    reduction: float | None

    @property
    def display(self) -> str:
        return "-" if self.reduction is None else f"{100 * self.reduction:.0f}%"


@dataclass
class DetectionSummary:
    matches: list[OutageMatch]
    runs: int
    false_positive_runs: int

    @property
    def detected(self) -> int:
        return sum(m.flagged is not None for m in self.matches)

    @property
    def precision(self) -> float:
        return self.detected / self.runs if self.runs else 0.0

    @property
    def recall(self) -> float:
        return self.detected / len(self.matches) if self.matches else 0.0

    def to_json(self) -> dict:
        return {
            "outages": [
                {**m.outage.to_json(), "flagged": None if m.flagged is None else m.flagged * 60,
                 "mttd_reduction": m.reduction, "display": m.display}
                for m in self.matches
            ],
            "runs": self.runs,
            "false_positive_runs": self.false_positive_runs,
            "precision": self.precision,
            "recall": self.recall,
        }


def merge_runs(events: Sequence[OutageEvent]) -> list[tuple[int, int]]:
    """System-level sustained runs: union of per-metric [flagged, end] intervals."""
    spans = sorted((e.flagged, e.end) for e in events)
    merged: list[list[int]] = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [(a, b) for a, b in merged]


def mttd_reduction(events: Sequence[OutageEvent], truth: Sequence[GroundTruthOutage],
                   grace: int = 0) -> DetectionSummary:
    """Match outages to the earliest event flagged in [B, C + grace].

    Reduction is (C - flagged) / (C - B); unmatched outages get ``None``
    (shown as '-').  A system-level run that overlaps no outage span
    [B, max(D, C + grace)] is a false positive.
    """
    flags = sorted(e.flagged for e in events)
    matches = []
    for o in truth:
        hit = next((f for f in flags if o.start <= f <= o.detected + grace), None)
        red = None if hit is None else (o.detected - hit) / (o.detected - o.start)
        matches.append(OutageMatch(o, hit, red))
    runs = merge_runs(events)
    fp = 0
    for lo, hi in runs:
        if not any(lo <= max(o.end, o.detected + grace) and hi >= o.start for o in truth):
            fp += 1
    return DetectionSummary(matches, len(runs), fp)


@dataclass
class EvalReport:
    auc_pr: float
    theta: float
    youden_j: float
    prf: PRF
    per_percentile: dict[float, ThresholdResult] = field(default_factory=dict)
    detection: DetectionSummary | None = None

    def to_json(self) -> dict:
        return {
            "auc_pr": self.auc_pr,
            "theta": self.theta,
            "youden_j": self.youden_j,
            "precision": self.prf.precision,
            "recall": self.prf.recall,
            "f1": self.prf.f1,
            "degenerate": self.prf.degenerate,
            "per_percentile": {
                f"{T:g}": {"theta": r.theta, "youden_j": r.youden_j, "precision": r.prf.precision,
                           "recall": r.prf.recall, "f1": r.prf.f1}
                for T, r in self.per_percentile.items()
            },
            "detection": None if self.detection is None else self.detection.to_json(),
        }


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at each distinct score, highest first."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    n_pos = max(int(y.sum()), 1)
    return [(float(s[e]), float(tp[e] / (e + 1)), float(tp[e] / n_pos)) for e in ends]
