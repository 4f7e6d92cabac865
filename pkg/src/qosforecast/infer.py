"""Outage probabilities from forecast mixtures, threshold calibration, sustained detection."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erfc

from . import autodiff as ad
from .errors import FrameTooShort, SingleClass
from .ingest import MetricFrame
from .model import MixtureParams, check_mixture, forward, mixture_arrays

SQRT2 = math.sqrt(2.0)


def outage_probability(mix, tau) -> np.ndarray | float:
    """Mixture mass above ``tau``: sum_c alpha_c * (1 - Phi((tau - mu_c) / sigma_c)).

    ``mix`` is a :class:`MixtureParams` or an ``(alpha, mu, sigma)`` triple of
    arrays whose last axis indexes components.  ``tau`` is in normalized
    units and broadcasts against the leading axes.  Returns a float for a
    single mixture.
    """
    if isinstance(mix, MixtureParams):
        alpha, mu, sigma = mix.arrays()
    else:
        alpha, mu, sigma = (np.asarray(v, dtype=np.float64) for v in mix)
    check_mixture(alpha, mu, sigma)
    tau = np.asarray(tau, dtype=np.float64)[..., None]
    tail = 0.5 * erfc((tau - mu) / (sigma * SQRT2))
    prob = np.clip((alpha * tail).sum(axis=-1), 0.0, 1.0)
    return float(prob) if prob.ndim == 0 else prob


# -- calibration --------------------------------------------------------------

@dataclass(frozen=True)
class YoudenResult:
    theta: float
    j: float


def youden_threshold(probs: Sequence[float], labels: Sequence[int]) -> YoudenResult:
    """Threshold maximizing TPR - FPR for the rule ``prob > theta``.

    Candidates are 0, 1 and the midpoints between consecutive distinct
    sorted probabilities.  Ties go to the smallest candidate.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("Youden's J needs both classes")
    ps = np.sort(p)
    cpos = np.concatenate([[0], np.cumsum(y[np.argsort(p, kind="stable")])])
    distinct = np.unique(ps)
    cands = np.concatenate([[0.0], (distinct[:-1] + distinct[1:]) / 2.0, [1.0]])
    at_or_below = np.searchsorted(ps, cands, side="right")
    pos_above = n_pos - cpos[at_or_below]
    neg_above = n_neg - (at_or_below - cpos[at_or_below])
    j = pos_above / n_pos - neg_above / n_neg
    best = np.flatnonzero(j == j.max())
    k = best[np.argmin(cands[best])]
    return YoudenResult(float(cands[k]), float(j[k]))


# -- scoring ------------------------------------------------------------------

@dataclass
class MixtureSeries:
    """Forecast mixtures for consecutive anchors; arrays are (steps, |QoS|, C)."""

    timestamps: np.ndarray
    qos: tuple[str, ...]
    alpha: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def probabilities(self, tau_norm: Mapping[str, float]) -> np.ndarray:
        """(steps, |QoS|) outage probabilities against per-metric normalized thresholds."""
        tau = np.array([tau_norm[q] for q in self.qos])
        return outage_probability((self.alpha, self.mu, self.sigma), tau[None, :])


_ENCODE_CALLS = {"count": 0}


def encode_calls() -> int:
    """Number of windows pushed through the encoder by this module so far."""
    return _ENCODE_CALLS["count"]


def mixtures_for_windows(bundle, X: np.ndarray, stable: bool = True
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode mixtures for windows (batch, w, |M|).

    ``stable`` selects the row-stable matmul so a window scores identically
    alone or inside any batch; the BLAS path is several times faster.
    """
    cfg = bundle.config
    with ad.no_grad(), (ad.row_stable() if stable else contextlib.nullcontext()):
        out = forward(X, bundle.params, cfg, train=False, heads="mdn")
    _ENCODE_CALLS["count"] += len(X)
    return mixture_arrays(out, cfg)


def _frame_matrix(bundle, frame: MetricFrame) -> np.ndarray:
    names = [c.name for c in bundle.columns] if bundle.columns else frame.names
    return frame.select(names).values if names != frame.names else np.asarray(frame.values)


def score_mixtures(bundle, frame: MetricFrame, stream: bool = False,
                   chunk: int = 512) -> MixtureSeries:
    """Mixtures for every anchor t with a full window (t - w, t] in ``frame``.

    ``frame`` must already be normalized with the bundle's stats.  With
    ``stream`` each window is scored on its own as it would be online; the
    result is bit-identical to the chunked batch path.
    """
    cfg = bundle.config
    vals = _frame_matrix(bundle, frame)
    n, w = len(vals), cfg.w
    if n < w:
        raise FrameTooShort(f"{n} rows, window needs {w}")
    ts = frame.timestamps
    ends = np.arange(w - 1, n)
    ends = ends[ts[ends] - ts[ends - w + 1] == w - 1]
    parts = []
    step = 1 if stream else chunk
    offs = np.arange(-w + 1, 1)
    for s in range(0, len(ends), step):
        e = ends[s:s + step]
        parts.append(mixtures_for_windows(bundle, vals[e[:, None] + offs[None, :]]))
    if parts:
        a, m, sg = (np.concatenate(x, axis=0) for x in zip(*parts))
    else:
        shape = (0, len(cfg.qos), cfg.C)
        a = m = sg = np.zeros(shape)
    return MixtureSeries(ts[ends], cfg.qos, a, m, sg)


def normalized_thresholds(bundle, thresholds: Mapping[str, float] | None = None) -> dict[str, float]:
    raw = bundle.thresholds if thresholds is None else thresholds
    return {q: bundle.stats.scale(q, raw[q], clamp=False) for q in bundle.config.qos}


@dataclass
class ScoreSeries:
    timestamps: np.ndarray
    qos: tuple[str, ...]
    probs: np.ndarray  # (steps, |QoS|)

    def rows(self, theta: float | None = None) -> Iterable[dict]:
        for i, t in enumerate(self.timestamps):
            for j, q in enumerate(self.qos):
                p = float(self.probs[i, j])
                yield {"timestamp": int(t) * 60, "metric": q, "prob": p,
                       "flag": bool(theta is not None and p > theta)}


def score_stream(bundle, frame: MetricFrame, stream: bool = False,
                 thresholds: Mapping[str, float] | None = None) -> ScoreSeries:
    """Per-minute outage probability for every QoS metric (eval mode)."""
    mix = score_mixtures(bundle, frame, stream=stream)
    return ScoreSeries(mix.timestamps, mix.qos, mix.probabilities(normalized_thresholds(bundle, thresholds)))


# -- detection ----------------------------------------------------------------

@dataclass(frozen=True)
class DecisionConfig:
    theta: float
    percentile: float = 95.0
    thresholds: Mapping[str, float] = field(default_factory=dict)
    sustain: int = 15
    policy: str = "any_metric"

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.sustain < 1:
            raise ValueError("sustain must be >= 1 minute")
        if self.policy != "any_metric":
            raise ValueError("only the any_metric policy is supported")


@dataclass(frozen=True)
class OutageEvent:
    """A sustained run: begins at ``start``, fires at ``flagged``, lasts through ``end``."""

    metric: str
    start: int
    flagged: int
    peak: float
    end: int

    def to_json(self) -> dict:
        return {"metric": self.metric, "start": self.start * 60, "flagged": self.flagged * 60,
                "end": self.end * 60, "peak": self.peak}


def detect_series(timestamps: Sequence[int], probs: Sequence[float], theta: float,
                  sustain: int, metric: str = "") -> list[OutageEvent]:
    """Emit one event per run of ``sustain`` or more consecutive minutes with prob > theta.

    A run ends when the probability falls to theta or below, or at a gap in
    the timestamps.  Runs shorter than ``sustain`` produce nothing.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    above = np.asarray(probs, dtype=np.float64) > theta
    events: list[OutageEvent] = []
    i, n = 0, len(above)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1] and ts[j + 1] - ts[j] == 1:
            j += 1
        if j - i + 1 >= sustain:
            peak = float(np.max(np.asarray(probs, dtype=np.float64)[i:j + 1]))
            events.append(OutageEvent(metric, int(ts[i]), int(ts[i + sustain - 1]), peak, int(ts[j])))
        i = j + 1
    return events


def detect(scores: ScoreSeries, cfg: DecisionConfig) -> list[OutageEvent]:
    """Per-metric events, ordered by flag time; their union is the system flag."""
    events = []
    for j, q in enumerate(scores.qos):
        events.extend(detect_series(scores.timestamps, scores.probs[:, j], cfg.theta, cfg.sustain, q))
    events.sort(key=lambda e: (e.flagged, e.metric))
    return events
