"""End-to-end wiring: prepare data, fit, calibrate, score and evaluate.

The split is decided on sample anchors before anything is fitted, so the
normalizer, feature filter, percentile thresholds and Youden threshold only
ever see rows that training samples touch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import (
    EvalReport,
    GroundTruthOutage,
    ThresholdResult,
    auc_pr,
    evaluate_percentile,
    mttd_reduction,
    prf_at,
)
from .infer import (
    DecisionConfig,
    MixtureSeries,
    ScoreSeries,
    detect,
    mixtures_for_windows,
    normalized_thresholds,
    youden_threshold,
)
from .ingest import (
    MetricFrame,
    SelectionConfig,
    fit_normalizer,
    handle_missing,
    normalize,
    select_features,
)
from .labeling import AlertRecord, LabelParams, ProxyLabelSeries, generate_proxy_labels, qos_thresholds
from .model import ModelConfig, classifier_head, encode
from .train import (
    ModelBundle,
    TrainReport,
    WindowedDataset,
    build_dataset,
    label_matrix,
    split_chronological,
    train,
)

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    raw: MetricFrame                 # cleaned and feature-selected, raw units
    frame: MetricFrame               # normalized
    train_raw: MetricFrame           # raw rows touched by training samples
    stats: object
    thresholds: dict[str, float]
    labels: dict[str, ProxyLabelSeries]
    alerts: list[AlertRecord]
    label_params: LabelParams
    data: WindowedDataset
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    w: int
    gamma: int
    dropped_rows: int = 0

    @property
    def qos(self) -> list[str]:
        return self.frame.qos

    def label_density(self) -> float:
        return float(self.train.labels.any(axis=1).mean())


def prepare(raw: MetricFrame, alerts: Sequence[AlertRecord], w: int = 60, gamma: int = 10,
            train_frac: float = 0.7, val_frac: float = 0.1,
            label_params: LabelParams = LabelParams(),
            selection: SelectionConfig = SelectionConfig()) -> Prepared:
    clean, report = handle_missing(raw)
    skeleton = build_dataset(clean, None, w, gamma)
    tr, _, _ = split_chronological(skeleton, train_frac, val_frac)
    last_row = int(tr.anchors.max()) + gamma
    train_rows = clean.rows(slice(0, last_row + 1))
    keep = select_features(train_rows, selection).names
    clean = clean.select(keep)
    train_rows = train_rows.select(keep)
    stats = fit_normalizer(train_rows)
    frame = normalize(clean, stats)
    taus = qos_thresholds(train_rows, clean.qos, label_params.percentile)
    labels = generate_proxy_labels(clean, clean.qos, alerts, label_params, thresholds=taus)
    data = build_dataset(frame, labels, w, gamma)
    tr, va, te = split_chronological(data, train_frac, val_frac)
    return Prepared(clean, frame, train_rows, stats, taus, labels, list(alerts), label_params,
                    data, tr, va, te, w, gamma, report.dropped_rows)


def prepare_for(bundle: ModelBundle, raw: MetricFrame, alerts: Sequence[AlertRecord],
                train_frac: float = 0.7, val_frac: float = 0.1) -> Prepared:
    """Rebuild the dataset for ``raw`` with a bundle's columns, scaling and thresholds.

    Nothing is refitted, so calibration and evaluation see exactly the
    inputs the model was trained on.
    """
    cfg = bundle.config
    clean, report = handle_missing(raw)
    clean = clean.select([c.name for c in bundle.columns] or clean.names)
    frame = normalize(clean, bundle.stats)
    labels = generate_proxy_labels(clean, cfg.qos, alerts, bundle.label_params,
                                   thresholds=bundle.thresholds)
    data = build_dataset(frame, labels, cfg.w, cfg.gamma)
    tr, va, te = split_chronological(data, train_frac, val_frac)
    train_rows = clean.rows(slice(0, int(tr.anchors.max()) + cfg.gamma + 1))
    return Prepared(clean, frame, train_rows, bundle.stats, dict(bundle.thresholds), labels,
                    list(alerts), bundle.label_params, data, tr, va, te, cfg.w, cfg.gamma,
                    report.dropped_rows)


def model_config(prep: Prepared, **overrides) -> ModelConfig:
    base = dict(n_metrics=len(prep.frame.names), qos=tuple(prep.qos), w=prep.w, gamma=prep.gamma)
    base.update(overrides)
    return ModelConfig(**base)


def fit(prep: Prepared, cfg: ModelConfig, epochs: int = 50, batch_size: int = 64,
        patience: int = 5, train_stride: int = 1, lr: float = 1e-3) -> tuple[ModelBundle, TrainReport]:
    params, report = train(cfg, prep.train.thin(train_stride), prep.val, epochs=epochs,
                           batch_size=batch_size, patience=patience, lr=lr)
    bundle = ModelBundle(params, cfg, prep.stats, prep.frame.columns, prep.label_params,
                         dict(prep.thresholds), percentile=prep.label_params.percentile)
    return bundle, report


# -- scoring ------------------------------------------------------------------

def mixtures_for(bundle: ModelBundle, data: WindowedDataset, chunk: int = 512,
                 stable: bool = False) -> MixtureSeries:
    """Mixtures for each sample of ``data``, in sample order."""
    parts = []
    for s in range(0, len(data), chunk):
        X = data.windows(np.arange(s, min(s + chunk, len(data))))
        parts.append(mixtures_for_windows(bundle, X, stable=stable))
    a, m, sg = (np.concatenate(x, axis=0) for x in zip(*parts))
    return MixtureSeries(data.anchor_times, bundle.config.qos, a, m, sg)


def classifier_scores(bundle: ModelBundle, data: WindowedDataset, chunk: int = 512) -> np.ndarray:
    cfg = bundle.config
    out = []
    with ad.no_grad():
        for s in range(0, len(data), chunk):
            h = encode(data.windows(np.arange(s, min(s + chunk, len(data)))), bundle.params, cfg)
            out.append(np.stack([classifier_head(h, bundle.params, q, cfg).data for q in cfg.qos], axis=1))
    return np.concatenate(out, axis=0)


@dataclass
class Evaluation:
    """Cached scores for one trained bundle on one prepared dataset."""

    bundle: ModelBundle
    prep: Prepared
    train_mix: MixtureSeries | None = None
    test_mix: MixtureSeries | None = None
    calib_stride: int = 1
    _clf: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.bundle.config.classifier_only:
            self.train_mix = mixtures_for(self.bundle, self.prep.train.thin(self.calib_stride))
            self.test_mix = mixtures_for(self.bundle, self.prep.test)

    def _calib(self) -> WindowedDataset:
        return self.prep.train.thin(self.calib_stride)

    def scores(self, split: str) -> np.ndarray:
        """(samples, |QoS|) outage scores at the bundle's percentile."""
        if self.bundle.config.classifier_only:
            if split not in self._clf:
                data = self._calib() if split == "train" else self.prep.test
                self._clf[split] = classifier_scores(self.bundle, data)
            return self._clf[split]
        mix = self.train_mix if split == "train" else self.test_mix
        return mix.probabilities(normalized_thresholds(self.bundle))

    def labels(self, split: str) -> np.ndarray:
        return self._calib().labels if split == "train" else self.prep.test.labels

    def calibrate(self) -> tuple[float, float]:
        res = youden_threshold(self.scores("train").ravel(), self.labels("train").ravel())
        self.bundle.theta, self.bundle.youden_j = res.theta, res.j
        return res.theta, res.j

    def auc_pr(self) -> float:
        return auc_pr(self.scores("test").ravel(), self.labels("test").ravel())

    def percentile(self, T: float) -> ThresholdResult:
        p = self.prep
        return evaluate_percentile(T, p.stats, p.qos, p.gamma, self.train_mix, self.test_mix,
                                   p.raw, p.train_raw, p.alerts, p.label_params)

    def test_scores(self) -> ScoreSeries:
        return ScoreSeries(self.prep.test.anchor_times, tuple(self.prep.qos), self.scores("test"))

    def report(self, truth: Sequence[GroundTruthOutage] = (), percentiles: Sequence[float] = (),
               sustain: int = 15, grace: int = 0) -> EvalReport:
        if self.bundle.theta is None:
            self.calibrate()
        theta = self.bundle.theta
        rep = EvalReport(self.auc_pr(), theta, self.bundle.youden_j,
                         prf_at(self.scores("test").ravel(), self.labels("test").ravel(), theta))
        if not self.bundle.config.classifier_only:
            rep.per_percentile = {float(T): self.percentile(T) for T in percentiles}
        test_lo = int(self.prep.test.anchor_times[0])
        test_hi = int(self.prep.test.anchor_times[-1])
        in_test = [o for o in truth if test_lo <= o.start and o.detected <= test_hi]
        events = detect(self.test_scores(), DecisionConfig(theta, sustain=sustain))
        rep.detection = mttd_reduction(events, in_test, grace)
        return rep
