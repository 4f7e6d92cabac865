"""Deterministic synthetic scenarios: metric frames, alert logs, outage timelines.

Each metric is ``offset + diurnal sinusoid + AR(1) noise``.  A fault ramps
linearly up to a plateau: precursor (non-QoS) metrics start ``lead`` minutes
before the impact start B, QoS metrics start at B.  Alerts fire when a
metric sits above its static rule threshold, re-firing every
``alert_repeat`` minutes while it stays there.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .autodiff import make_rng
from .errors import InvalidConfig, Unsatisfiable
from .evaluation import GroundTruthOutage
from .ingest import Category, MetricColumn, MetricFrame, Schema
from .labeling import AlertRecord, LabelParams, Severity, generate_proxy_labels

DAY = 1440
DEFAULT_START = 27_000_000  # epoch minutes, mid 2021


@dataclass(frozen=True)
class MetricSpec:
    name: str
    offset: float = 10.0
    amplitude: float = 1.0  # diurnal
    ar: float = 0.8
    noise: float = 0.5
    category: str = "utilization_like"
    is_qos: bool = False
    alert_sigmas: float = 6.0
    copy_of: int | None = None  # near-duplicate of another metric

    @property
    def stationary_std(self) -> float:
        return self.noise / math.sqrt(1.0 - self.ar ** 2)

    @property
    def rule_threshold(self) -> float:
        return self.offset + abs(self.amplitude) + self.alert_sigmas * self.stationary_std


@dataclass(frozen=True)
class Fault:
    start: int          # B, minutes from scenario start
    ramp: int           # minutes to reach the plateau
    plateau: int        # minutes held at full magnitude
    magnitude: float    # in stationary standard deviations of each metric
    lead: int           # precursor head start in minutes
    metrics: tuple[int, ...]
    outage: bool = True

    @property
    def end(self) -> int:
        return self.start + self.ramp + self.plateau


@dataclass(frozen=True)
class Schedule:
    """Rule for laying out faults when none are given explicitly.

    ``n_events`` minor extreme events are spread over the whole timeline;
    ``n_outages`` outages are spread over the final ``outage_span`` fraction.
    """

    n_events: int = 40
    n_outages: int = 3
    outage_span: float = 0.2
    event_ramp: int = 20
    event_plateau: tuple[int, int] = (30, 70)
    event_magnitude: tuple[float, float] = (8.0, 11.0)
    outage_ramp: int = 40
    outage_plateau: int = 90
    outage_magnitude: float = 12.0
    lead: int = 20
    precursors: tuple[int, ...] = ()
    impacted: tuple[int, ...] = ()


@dataclass(frozen=True)
class ScenarioConfig:
    metrics: tuple[MetricSpec, ...]
    duration: int = 30 * DAY
    faults: tuple[Fault, ...] | None = None
    schedule: Schedule | None = None
    magnitude_scale: float = 1.0
    duration_scale: float = 1.0
    alert_repeat: int = 5
    train_frac: float = 0.7
    start: int = DEFAULT_START
    seed: int = 0

    @property
    def n_metrics(self) -> int:
        return len(self.metrics)

    @property
    def n_qos(self) -> int:
        return sum(m.is_qos for m in self.metrics)

    def schema(self) -> Schema:
        return Schema(tuple(MetricColumn(m.name, Category(m.category), m.is_qos) for m in self.metrics))

    def to_json(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        try:
            obj = dict(obj)
            metrics = tuple(MetricSpec(**m) for m in obj.pop("metrics"))
            faults = obj.pop("faults", None)
            faults = None if faults is None else tuple(
                Fault(**{**f, "metrics": tuple(f["metrics"])}) for f in faults)
            sched = obj.pop("schedule", None)
            if sched is not None:
                sched = dict(sched)
                for k in ("event_plateau", "event_magnitude", "precursors", "impacted"):
                    if k in sched:
                        sched[k] = tuple(sched[k])
                sched = Schedule(**sched)
            cfg = cls(metrics=metrics, faults=faults, schedule=sched, **obj)
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"bad scenario config: {exc}") from None
        validate(cfg)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None


def validate(cfg: ScenarioConfig) -> None:
    if cfg.duration < 2:
        raise InvalidConfig("duration must be at least 2 minutes")
    names = [m.name for m in cfg.metrics]
    if len(set(names)) != len(names) or not names:
        raise InvalidConfig("metric names must be unique and non-empty")
    for m in cfg.metrics:
        if not 0.0 <= m.ar < 1.0:
            raise InvalidConfig(f"{m.name}: AR coefficient must lie in [0, 1)")
        if m.noise < 0 or m.category not in ("utilization_like", "error_like"):
            raise InvalidConfig(f"{m.name}: bad noise or category")
        if m.copy_of is not None and not 0 <= m.copy_of < len(names):
            raise InvalidConfig(f"{m.name}: copy_of out of range")
    if cfg.n_qos == 0:
        raise InvalidConfig("at least one QoS metric is required")
    if cfg.faults is not None:
        per_metric: dict[int, list[tuple[int, int]]] = {}
        for f in cfg.faults:
            if f.ramp < 1 or f.plateau < 0 or f.lead < 0:
                raise InvalidConfig(f"bad fault timing {f}")
            for i in f.metrics:
                if not 0 <= i < len(names):
                    raise InvalidConfig(f"fault metric index {i} out of range")
                lo = f.start - (0 if cfg.metrics[i].is_qos else f.lead)
                per_metric.setdefault(i, []).append((lo, f.end))
        for spans in per_metric.values():
            spans.sort()
            for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
                if b0 < a1:
                    raise InvalidConfig("faults overlap on a metric")


def expand_faults(cfg: ScenarioConfig) -> tuple[Fault, ...]:
    """The explicit fault list, or the schedule laid out with the scenario seed."""
    if cfg.faults is not None:
        faults = cfg.faults
    elif cfg.schedule is None:
        faults = ()
    else:
        faults = _layout(cfg)
    return tuple(
        replace(f, magnitude=f.magnitude * cfg.magnitude_scale,
                plateau=int(round(f.plateau * cfg.duration_scale)))
        for f in faults)


def _layout(cfg: ScenarioConfig) -> tuple[Fault, ...]:
    s = cfg.schedule
    rng = make_rng(cfg.seed, 101)
    qos = tuple(i for i, m in enumerate(cfg.metrics) if m.is_qos)
    impacted = tuple(s.impacted) or qos
    pre = tuple(s.precursors)
    metrics = tuple(sorted(set(pre) | set(impacted)))
    out_lo = int(cfg.duration * (1 - s.outage_span))
    faults = []
    # minor events fill slots over the whole timeline, skipping outage slots
    slots = []
    if s.n_outages:
        width = (cfg.duration - out_lo) // s.n_outages
        for k in range(s.n_outages):
            slot_lo = out_lo + k * width
            start = slot_lo + width // 3 + int(rng.integers(0, max(width // 3, 1)))
            faults.append(Fault(start, s.outage_ramp, s.outage_plateau, s.outage_magnitude,
                                s.lead, metrics, True))
            slots.append((start - s.lead - 60, start + s.outage_ramp + s.outage_plateau + 60))
    width = cfg.duration // max(s.n_events, 1)
    for k in range(s.n_events):
        lo = k * width + s.lead + 60
        hi = (k + 1) * width - 3 * s.event_ramp - s.event_plateau[1] - 60
        if hi <= lo:
            raise InvalidConfig("too many events for the scenario duration")
        start = int(rng.integers(lo, hi))
        plateau = int(rng.integers(s.event_plateau[0], s.event_plateau[1] + 1))
        mag = float(rng.uniform(*s.event_magnitude))
        f = Fault(start, s.event_ramp, plateau, mag, s.lead, metrics, False)
        if any(f.start - f.lead < b and f.end + 60 > a for a, b in slots):
            continue
        faults.append(f)
    faults.sort(key=lambda f: f.start)
    return tuple(faults)


def _fault_profile(n: int, onset: int, ramp: int, end: int) -> np.ndarray:
    t = np.arange(n)
    prof = np.clip((t - onset + 1) / ramp, 0.0, 1.0)
    prof[(t < onset) | (t >= end)] = 0.0
    return prof


def _base_signals(cfg: ScenarioConfig) -> np.ndarray:
    n = cfg.duration
    t = np.arange(n)
    out = np.empty((n, cfg.n_metrics))
    for i, m in enumerate(cfg.metrics):
        rng = make_rng(cfg.seed, 7, i)
        phase = float(rng.uniform(0, 2 * math.pi))
        eps = rng.normal(0.0, m.noise, size=n)
        # start from the stationary distribution so there is no burn-in transient
        eps[0] = rng.normal(0.0, m.stationary_std)
        noise = lfilter([1.0], [1.0, -m.ar], eps)
        out[:, i] = m.offset + m.amplitude * np.sin(2 * math.pi * t / DAY + phase) + noise
    return out


@dataclass
class Scenario:
    frame: MetricFrame
    alerts: list[AlertRecord]
    outages: list[GroundTruthOutage]
    faults: tuple[Fault, ...]
    config: ScenarioConfig

    @property
    def schema(self) -> Schema:
        return self.config.schema()


def generate(cfg: ScenarioConfig) -> Scenario:
    """Build the raw frame, alert log and outage timeline for a scenario."""
    validate(cfg)
    faults = expand_faults(cfg)
    n = cfg.duration
    values = _base_signals(cfg)
    for f in faults:
        for i in f.metrics:
            if i >= cfg.n_metrics:
                raise InvalidConfig(f"fault metric index {i} out of range")
            m = cfg.metrics[i]
            onset = f.start if m.is_qos else f.start - f.lead
            values[:, i] += f.magnitude * m.stationary_std * _fault_profile(n, onset, f.ramp, f.end)
    for i, m in enumerate(cfg.metrics):
        if m.copy_of is not None:
            src = cfg.metrics[m.copy_of]
            jitter = make_rng(cfg.seed, 9, i).normal(0.0, 1e-3 * src.stationary_std, n)
            values[:, i] = values[:, m.copy_of] * 1.0 + jitter
    ts = cfg.start + np.arange(n, dtype=np.int64)

    alerts = []
    for i, m in enumerate(cfg.metrics):
        above = values[:, i] > m.rule_threshold
        last = -10**9
        for k in np.flatnonzero(above):
            if k == 0 or not above[k - 1]:
                last = -10**9
            if k - last >= cfg.alert_repeat:
                sev = Severity.HIGH if m.is_qos else Severity.MEDIUM
                alerts.append(AlertRecord(int(ts[k]), f"{m.name}_high", sev, "checkout"))
                last = k
    alerts.sort(key=lambda a: (a.timestamp, a.monitor))

    qos_idx = [i for i, m in enumerate(cfg.metrics) if m.is_qos]
    outages = []
    for f in faults:
        if not f.outage:
            continue
        hit = [i for i in f.metrics if i in qos_idx]
        end = min(f.end, n) - 1
        detected = end
        for k in range(f.start, end + 1):
            if any(values[k, i] > cfg.metrics[i].rule_threshold for i in hit):
                detected = k
                break
        detected = max(detected, f.start + 1)
        end = max(end, detected)
        outages.append(GroundTruthOutage(int(ts[f.start]), int(ts[detected]), int(ts[end]),
                                         tuple(cfg.metrics[i].name for i in hit)))
    frame = MetricFrame(ts, cfg.schema().metrics, values)
    return Scenario(frame, alerts, outages, faults, cfg)


def label_density(scn: Scenario, params: LabelParams = LabelParams()) -> float:
    """Share of training minutes labeled positive on any QoS metric."""
    n_train = int(len(scn.frame) * scn.config.train_frac)
    train = scn.frame.rows(slice(0, n_train))
    labels = generate_proxy_labels(train, scn.frame.qos, scn.alerts, params)
    hit = np.zeros(n_train, dtype=bool)
    for s in labels.values():
        hit |= s.labels
    return float(hit.mean())


def make_label_regime(cfg: ScenarioConfig, low: float = 0.04, high: float = 0.08) -> ScenarioConfig:
    """Rescale fault magnitude (then durations) until label density lands in [low, high].

    Scales are tried on a fixed grid ordered by distance from the current
    setting, and the first hit is returned, so an already-conforming config
    comes back unchanged.
    """
    if not expand_faults(cfg):
        raise Unsatisfiable("scenario has no faults, so no extreme events exist")
    mags = (1.0, 1.25, 0.8, 1.5, 0.65, 2.0, 0.5, 3.0)
    durs = (1.0, 1.5, 0.67, 2.0, 0.5, 3.0, 0.33)
    for d in durs:
        for m in mags:
            cand = replace(cfg, magnitude_scale=cfg.magnitude_scale * m,
                           duration_scale=cfg.duration_scale * d)
            if low <= label_density(generate(cand)) <= high:
                return cand
    raise Unsatisfiable(f"no magnitude/duration scaling puts label density in [{low}, {high}]")


def default_metrics() -> tuple[MetricSpec, ...]:
    return (
        MetricSpec("latency_ms", offset=120.0, amplitude=8.0, ar=0.85, noise=3.0, is_qos=True),
        MetricSpec("error_rate", offset=2.0, amplitude=0.3, ar=0.7, noise=0.15,
                   category="error_like", is_qos=True),
        MetricSpec("cpu_util", offset=45.0, amplitude=10.0, ar=0.9, noise=1.5),
        MetricSpec("mem_util", offset=60.0, amplitude=3.0, ar=0.95, noise=0.6),
        MetricSpec("queue_depth", offset=20.0, amplitude=4.0, ar=0.8, noise=1.2),
        MetricSpec("request_rate", offset=500.0, amplitude=120.0, ar=0.9, noise=10.0),
        MetricSpec("disk_io", offset=30.0, amplitude=2.0, ar=0.6, noise=2.0),
        MetricSpec("cpu_util_host", offset=45.0, amplitude=10.0, ar=0.9, noise=1.5, copy_of=2),
        MetricSpec("build_version", offset=7.0, amplitude=0.0, ar=0.0, noise=0.0),
    )


def default_scenario(seed: int = 0, duration: int = 30 * DAY, lead: int = 20,
                     n_events: int | None = None, n_outages: int = 3) -> ScenarioConfig:
    """Nine metrics (two QoS), minor extreme events throughout, outages near the end.

    ``n_events`` defaults to 40 per 30 days, so shorter scenarios keep the
    same label density.
    """
    metrics = default_metrics()
    if n_events is None:
        n_events = max(1, round(40 * duration / (30 * DAY)))
    sched = Schedule(n_events=n_events, n_outages=n_outages, lead=lead,
                     precursors=(2, 3, 4), impacted=(0, 1))
    return ScenarioConfig(metrics=metrics, duration=duration, schedule=sched, seed=seed)
