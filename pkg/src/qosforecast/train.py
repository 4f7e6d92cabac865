"""Supervised samples at horizon t+gamma, chronological splits, training loop, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CorruptFile, DivergedLoss, EmptySplit, FrameTooShort, VersionMismatch
from .ingest import MetricColumn, MetricFrame, NormalizationStats
from .labeling import LabelParams, ProxyLabelSeries
from .model import ModelConfig, forward, init_params, loss_terms, trainable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowedSample:
    t: int
    X: np.ndarray
    y_true: np.ndarray
    label: np.ndarray


class WindowedDataset:
    """Windows over a normalized frame, materialized lazily per batch.

    Sample ``i`` is anchored at row ``anchors[i]``: its input covers rows
    (anchor - w, anchor] and its targets sit at row anchor + gamma.
    """

    def __init__(self, values: np.ndarray, timestamps: np.ndarray, anchors: np.ndarray,
                 w: int, gamma: int, y_true: np.ndarray, labels: np.ndarray) -> None:
        self.values = values
        self.timestamps = timestamps
        self.anchors = np.asarray(anchors, dtype=np.int64)
        self.w = w
        self.gamma = gamma
        self.y_true = y_true
        self.labels = labels

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i: int) -> WindowedSample:
        r = int(self.anchors[i])
        return WindowedSample(int(self.timestamps[r]), self.values[r - self.w + 1:r + 1],
                              self.y_true[i], self.labels[i])

    @property
    def anchor_times(self) -> np.ndarray:
        return self.timestamps[self.anchors]

    @property
    def target_times(self) -> np.ndarray:
        return self.timestamps[self.anchors + self.gamma]

    def windows(self, idx: np.ndarray | None = None) -> np.ndarray:
        a = self.anchors if idx is None else self.anchors[idx]
        rows = a[:, None] + np.arange(-self.w + 1, 1)[None, :]
        return self.values[rows]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.windows(idx), self.y_true[idx], self.labels[idx]

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowedDataset(self.values, self.timestamps, self.anchors[idx], self.w,
                               self.gamma, self.y_true[idx], self.labels[idx])

    def thin(self, stride: int) -> "WindowedDataset":
        return self.subset(np.arange(0, len(self), stride))


def label_matrix(labels: Mapping[str, ProxyLabelSeries] | None, qos: Sequence[str],
                 times: np.ndarray) -> np.ndarray:
    """(len(times), |qos|) label lookup; times off the label grid read as False."""
    out = np.zeros((len(times), len(qos)), dtype=bool)
    if not labels:
        return out
    for j, q in enumerate(qos):
        s = labels[q]
        pos = np.searchsorted(s.timestamps, times)
        pos = np.clip(pos, 0, len(s.timestamps) - 1)
        hit = s.timestamps[pos] == times
        out[hit, j] = s.labels[pos[hit]]
    return out


def build_dataset(frame: MetricFrame, labels: Mapping[str, ProxyLabelSeries] | None,
                  w: int, gamma: int, stride: int = 1,
                  qos: Sequence[str] | None = None) -> WindowedDataset:
    """One sample per anchor whose window and target lie on a gap-free stretch."""
    n = len(frame)
    if n < w + gamma:
        raise FrameTooShort(f"{n} rows < w + gamma = {w + gamma}")
    qos = list(qos) if qos is not None else frame.qos
    anchors = np.arange(w - 1, n - gamma, stride, dtype=np.int64)
    ts = frame.timestamps
    span = ts[anchors + gamma] - ts[anchors - w + 1]
    anchors = anchors[span == w + gamma - 1]
    q_idx = [frame.index(q) for q in qos]
    y_true = frame.values[anchors + gamma][:, q_idx]
    lab = label_matrix(labels, qos, ts[anchors + gamma])
    return WindowedDataset(np.asarray(frame.values), ts, anchors, w, gamma, y_true, lab)


def _count(frac: float, n: int) -> int:
    return int(math.floor(round(frac * n, 9)))


def split_chronological(samples: WindowedDataset, train_frac: float = 0.7, val_frac: float = 0.1
                        ) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Contiguous train/val/test blocks in time order.

    Train and validation samples whose target falls at or after the first
    minute of the earliest test input window are discarded.
    """
    if train_frac <= 0 or val_frac <= 0:
        raise ValueError("split fractions must be positive")
    if train_frac + val_frac >= 1:
        raise EmptySplit("fractions leave nothing for the test split")
    n = len(samples)
    n_train = _count(train_frac, n)
    n_val = _count(val_frac, n)
    idx = np.arange(n)
    tr, va, te = idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]
    if len(te) == 0:
        raise EmptySplit("test split is empty")
    test_start = samples.anchor_times[te[0]] - samples.w + 1
    targets = samples.target_times
    tr = tr[targets[tr] < test_start]
    va = va[targets[va] < test_start]
    for name, part in (("train", tr), ("validation", va)):
        if len(part) == 0:
            raise EmptySplit(f"{name} split is empty")
    return samples.subset(tr), samples.subset(va), samples.subset(te)


# -- training -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    val_total: float
    val_nll: float | None
    val_clf: float | None


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self, with_time: bool = False) -> dict:
        d = {
            "history": [vars(r) for r in self.history],
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
        }
        if with_time:
            d["wall_time"] = self.wall_time
        return d


def evaluate_loss(params: Mapping[str, Tensor], cfg: ModelConfig, data: WindowedDataset,
                  batch_size: int = 512) -> tuple[float, float | None, float | None]:
    """Sample-weighted mean of (total, nll, classifier) loss in eval mode."""
    sums = np.zeros(3)
    seen = 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            X, y, lab = data.batch(idx)
            terms = loss_terms(forward(X, params, cfg), y, lab, cfg)
            vals = [terms.total, terms.nll, terms.clf]
            sums += [0.0 if v is None else v.item() * len(idx) for v in vals]
            seen += len(idx)
        terms_present = terms
    out = sums / max(seen, 1)
    return (float(out[0]), None if terms_present.nll is None else float(out[1]),
            None if terms_present.clf is None else float(out[2]))


def train(cfg: ModelConfig, train_set: WindowedDataset, val_set: WindowedDataset,
          epochs: int = 50, batch_size: int = 64, patience: int = 5, lr: float = 1e-3,
          params: dict[str, Tensor] | None = None) -> tuple[dict[str, Tensor], TrainReport]:
    """Adam on the multitask loss with early stopping on validation total loss.

    Returns the parameters of the best validation epoch (epoch 0 is the
    initialization).  Shuffling and dropout draw from streams derived from
    ``cfg.seed`` so reruns are bit-identical.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplit("training needs non-empty train and validation sets")
    t0 = time.perf_counter()
    params = params if params is not None else init_params(cfg)
    opt_params = trainable(params, cfg)
    state = ad.AdamState(lr=lr)
    shuffle_rng = ad.make_rng(cfg.seed, 1)
    drop_rng = ad.make_rng(cfg.seed, 2)

    report = TrainReport()
    v = evaluate_loss(params, cfg, val_set)
    report.history.append(EpochRecord(0, None, *v))
    best_val, best = v[0], {k: p.data.copy() for k, p in params.items()}
    stale = 0
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            X, y, lab = train_set.batch(idx)
            ad.zero_grad(params.values())
            out = forward(X, params, cfg, train=True, rng=drop_rng)
            loss = loss_terms(out, y, lab, cfg).total
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            ad.backward(loss)
            ad.adam_step(opt_params, state)
            total += value * len(idx)
            count += len(idx)
        v = evaluate_loss(params, cfg, val_set)
        if not math.isfinite(v[0]):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        report.history.append(EpochRecord(epoch, total / count, *v))
        report.epochs_run = epoch
        log.debug("epoch %d train %.5f val %.5f", epoch, total / count, v[0])
        if v[0] < best_val:
            best_val, stale = v[0], 0
            report.best_epoch = epoch
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= patience:
                report.stopped_early = True
                break
    for k, p in params.items():
        p.data = best[k]
        p.grad = None
    report.wall_time = time.perf_counter() - t0
    return params, report


# -- checkpoint bundle --------------------------------------------------------

SIDECAR_VERSION = 1


@dataclass
class ModelBundle:
    """Everything inference needs: weights, config, scaling, thresholds."""

    params: dict[str, Tensor]
    config: ModelConfig
    stats: NormalizationStats
    columns: tuple[MetricColumn, ...] = ()
    label_params: LabelParams = LabelParams()
    thresholds: dict[str, float] = field(default_factory=dict)  # raw tau per QoS metric
    theta: float | None = None
    youden_j: float | None = None
    percentile: float = 95.0
    sustain: int = 15

    def sidecar(self) -> dict:
        return {
            "format": SIDECAR_VERSION,
            "model": self.config.to_json(),
            "normalization": self.stats.to_json(),
            "columns": [c.to_json() for c in self.columns],
            "labels": self.label_params.to_json(),
            "decision": {
                "percentile": self.percentile,
                "thresholds": self.thresholds,
                "theta": self.theta,
                "youden_j": self.youden_j,
                "sustain": self.sustain,
            },
        }


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Write weights to ``path`` and the JSON sidecar to ``path + '.json'``."""
    path = Path(path)
    ad.save_params(bundle.params, path)
    _sidecar_path(path).write_text(json.dumps(bundle.sidecar(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> ModelBundle:
    path = Path(path)
    arrays = ad.load_params(path)
    try:
        meta = json.loads(_sidecar_path(path).read_text())
    except FileNotFoundError:
        raise CorruptFile(f"sidecar {_sidecar_path(path)} missing") from None
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"sidecar unreadable: {exc}") from None
    if meta.get("format") != SIDECAR_VERSION:
        raise VersionMismatch(f"sidecar format {meta.get('format')}, expected {SIDECAR_VERSION}")
    try:
        cfg = ModelConfig.from_json(meta["model"])
        dec = meta["decision"]
        bundle = ModelBundle(
            params={k: Tensor(v, requires_grad=True) for k, v in arrays.items()},
            config=cfg,
            stats=NormalizationStats.from_json(meta["normalization"]),
            columns=tuple(MetricColumn.from_json(c) for c in meta.get("columns", [])),
            label_params=LabelParams(**meta["labels"]),
            thresholds={k: float(v) for k, v in dec["thresholds"].items()},
            theta=dec["theta"],
            youden_j=dec["youden_j"],
            percentile=float(dec["percentile"]),
            sustain=int(dec["sustain"]),
        )
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"sidecar lacks field: {exc}") from None
    return bundle
