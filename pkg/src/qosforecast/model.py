"""BiLSTM metric encoder with per-QoS mixture-density and classifier heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyBatch, InvalidConfig, InvalidMixture, ShapeMismatch

SIGMA_FLOOR = 1e-4
PROB_EPS = 1e-7
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

ENCODERS = ("bilstm", "lstm")
LOSSES = ("evl", "bce")


@dataclass(frozen=True)
class ModelConfig:
    n_metrics: int
    qos: tuple[str, ...]
    w: int = 60
    gamma: int = 10
    encoder: str = "bilstm"
    hidden_per_direction: int = 64
    dropout_p: float = 0.2
    C: int = 3
    mdn_hidden: tuple[int, ...] = (200, 200)
    clf_hidden: tuple[int, ...] = (20,)
    loss: str = "evl"
    delta: float = 2.0
    lam: float = 1.0
    classifier_only: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "qos", tuple(self.qos))
        object.__setattr__(self, "mdn_hidden", tuple(self.mdn_hidden))
        object.__setattr__(self, "clf_hidden", tuple(self.clf_hidden))
        problems = []
        if self.n_metrics < 1:
            problems.append("n_metrics >= 1")
        if not self.qos:
            problems.append("at least one QoS metric")
        if self.C < 1:
            problems.append("C >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            problems.append("0 <= dropout_p < 1")
        if self.w < 1 or self.gamma < 1:
            problems.append("w >= 1 and gamma >= 1")
        if self.encoder not in ENCODERS:
            problems.append(f"encoder in {ENCODERS}")
        if self.loss not in LOSSES:
            problems.append(f"loss in {LOSSES}")
        if self.delta <= 1.0 or (self.loss == "evl" and self.delta < 2.0):
            problems.append("delta > 1, and delta >= 2 with the EVL loss")
        if self.hidden_per_direction < 1 or self.lam < 0:
            problems.append("hidden_per_direction >= 1 and lam >= 0")
        if problems:
            raise InvalidConfig("model config needs " + ", ".join(problems))

    @property
    def encoding_size(self) -> int:
        return self.hidden_per_direction * (2 if self.encoder == "bilstm" else 1)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("qos", "mdn_hidden", "clf_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None


# -- parameters ---------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _lstm_params(rng, n_in: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    W = _glorot(rng, n_in + hidden, 4 * hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate starts open
    return W, b


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases (forget-gate bias 1)."""
    rng = ad.make_rng(cfg.seed, 0)
    p: dict[str, np.ndarray] = {}
    H = cfg.hidden_per_direction
    p["enc.fwd.W"], p["enc.fwd.b"] = _lstm_params(rng, cfg.n_metrics, H)
    if cfg.encoder == "bilstm":
        p["enc.bwd.W"], p["enc.bwd.b"] = _lstm_params(rng, cfg.n_metrics, H)
    D = cfg.encoding_size
    for q in cfg.qos:
        sizes = [D, *cfg.mdn_hidden, 3 * cfg.C]
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            p[f"mdn.{q}.W{i}"] = _glorot(rng, a, b)
            p[f"mdn.{q}.b{i}"] = np.zeros(b)
        sizes = [D, *cfg.clf_hidden, 1]
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            p[f"clf.{q}.W{i}"] = _glorot(rng, a, b)
            p[f"clf.{q}.b{i}"] = np.zeros(b)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def trainable(params: Mapping[str, Tensor], cfg: ModelConfig) -> dict[str, Tensor]:
    """Parameters that receive gradient under the config's task mix."""
    def used(name: str) -> bool:
        if name.startswith("mdn."):
            return not cfg.classifier_only
        if name.startswith("clf."):
            return cfg.classifier_only or cfg.lam > 0
        return True
    return {k: v for k, v in params.items() if used(k)}


# -- network blocks -----------------------------------------------------------

def _batch3(X) -> np.ndarray:
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


def encode(X, params: Mapping[str, Tensor], cfg: ModelConfig, train: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    """Encode windows (batch, w, |M|) or a single (w, |M|) window into h."""
    Xb = _batch3(X)
    if Xb.ndim != 3 or Xb.shape[1:] != (cfg.w, cfg.n_metrics):
        raise ShapeMismatch(f"expected windows of shape (*, {cfg.w}, {cfg.n_metrics}), "
                            f"got {Xb.shape}")
    x = Tensor(Xb)
    h = ad.lstm(x, params["enc.fwd.W"], params["enc.fwd.b"])
    if cfg.encoder == "bilstm":
        hb = ad.lstm(x, params["enc.bwd.W"], params["enc.bwd.b"], reverse=True)
        h = ad.concat([h, hb], axis=1)
    return ad.dropout(h, cfg.dropout_p, train, rng)


def _mlp(h: Tensor, params: Mapping[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    out = h
    for i in range(n_layers):
        out = ad.matmul(out, params[f"{prefix}.W{i}"]) + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            out = ad.relu(out)
    return out


@dataclass
class MixtureParams:
    """Gaussian mixture per batch row; each field is (batch, C)."""

    alpha: Tensor
    mu: Tensor
    sigma: Tensor
    log_alpha: Tensor | None = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.alpha.data, self.mu.data, self.sigma.data

    @classmethod
    def of(cls, alpha, mu, sigma) -> "MixtureParams":
        a, m, s = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (alpha, mu, sigma))
        check_mixture(a, m, s)
        return cls(Tensor(a), Tensor(m), Tensor(s))


def check_mixture(alpha: np.ndarray, mu: np.ndarray, sigma: np.ndarray, tol: float = 1e-9) -> None:
    if not (alpha.shape == mu.shape == sigma.shape):
        raise InvalidMixture(f"shapes differ: {alpha.shape}, {mu.shape}, {sigma.shape}")
    if np.any(alpha < 0) or np.any(np.abs(alpha.sum(axis=-1) - 1.0) > tol):
        raise InvalidMixture("mixture weights must be a probability simplex")
    if np.any(~(sigma > 0)) or not np.all(np.isfinite(mu)):
        raise InvalidMixture("sigma must be positive and mu finite")


def mdn_head(h: Tensor, params: Mapping[str, Tensor], metric: str, cfg: ModelConfig) -> MixtureParams:
    raw = _mlp(h, params, f"mdn.{metric}", len(cfg.mdn_hidden) + 1)
    C = cfg.C
    logits = raw[:, :C]
    mu = raw[:, C:2 * C]
    sigma = ad.softplus(raw[:, 2 * C:]) + SIGMA_FLOOR
    return MixtureParams(ad.softmax(logits), mu, sigma, ad.log_softmax(logits))


def classifier_head(h: Tensor, params: Mapping[str, Tensor], metric: str, cfg: ModelConfig) -> Tensor:
    logit = _mlp(h, params, f"clf.{metric}", len(cfg.clf_hidden) + 1)
    return ad.clamp(ad.sigmoid(logit[:, 0]), PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class ModelOutput:
    mixtures: dict[str, MixtureParams]
    clf_prob: dict[str, Tensor]
    h: Tensor


def forward(X, params: Mapping[str, Tensor], cfg: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None, heads: str = "auto") -> ModelOutput:
    """Full forward pass.  ``heads`` is "mdn", "clf", "both" or "auto" (what the loss needs)."""
    if heads == "auto":
        heads = "clf" if cfg.classifier_only else ("both" if cfg.lam > 0 else "mdn")
    h = encode(X, params, cfg, train, rng)
    mix = {q: mdn_head(h, params, q, cfg) for q in cfg.qos} if heads in ("mdn", "both") else {}
    clf = {q: classifier_head(h, params, q, cfg) for q in cfg.qos} if heads in ("clf", "both") else {}
    return ModelOutput(mix, clf, h)


# -- losses -------------------------------------------------------------------

def _column(y, n: int) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if arr.size == 1 and n > 1:
        arr = np.full(n, float(arr[0]))
    if arr.size != n:
        raise ShapeMismatch(f"{arr.size} targets for a batch of {n}")
    return arr


def nll_loss(mix: MixtureParams, y_true) -> Tensor:
    """Mean negative log-likelihood of ``y_true`` under the mixtures (logsumexp form)."""
    B = mix.mu.shape[0]
    if B == 0:
        raise EmptyBatch("empty batch")
    if mix.log_alpha is None:
        check_mixture(mix.alpha.data, mix.mu.data, mix.sigma.data)
    y = _column(y_true, B)[:, None]
    log_alpha = mix.log_alpha if mix.log_alpha is not None else ad.log(mix.alpha)
    z = (Tensor(y) - mix.mu) / mix.sigma
    comp = log_alpha - ad.log(mix.sigma) - HALF_LOG_2PI - 0.5 * ad.square(z)
    return -ad.mean(ad.logsumexp(comp))


def class_weights(labels) -> tuple[float, float]:
    """(beta0, beta1): fractions of normal and extreme rows in the batch."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise EmptyBatch("empty batch")
    beta1 = float(y.mean())
    return 1.0 - beta1, beta1


def evl_loss(p_hat: Tensor, labels, delta: float = 2.0,
             beta0: float | None = None, beta1: float | None = None) -> Tensor:
    """Extreme value loss.

    The positive term is weighted by ``beta0`` (share of normal rows) and
    the negative term by ``beta1`` (share of extreme rows), both taken from
    the batch unless given.
    """
    p_hat = ad.as_tensor(p_hat)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise EmptyBatch("empty batch")
    b0, b1 = class_weights(y)
    b0 = b0 if beta0 is None else beta0
    b1 = b1 if beta1 is None else beta1
    p = p_hat if p_hat.data.ndim == 1 else ad.reshape(p_hat, (-1,))
    pos = ad.power(1.0 - p / delta, delta) * ad.log(p) * (b0 * y)
    neg = ad.power(1.0 - (1.0 - p) / delta, delta) * ad.log(1.0 - p) * (b1 * (1.0 - y))
    return -ad.mean(pos + neg)


def bce_loss(p_hat: Tensor, labels) -> Tensor:
    p_hat = ad.as_tensor(p_hat)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise EmptyBatch("empty batch")
    p = p_hat if p_hat.data.ndim == 1 else ad.reshape(p_hat, (-1,))
    return -ad.mean(ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y))


@dataclass
class LossTerms:
    total: Tensor
    nll: Tensor | None
    clf: Tensor | None


def loss_terms(out: ModelOutput, y_true: np.ndarray, labels: np.ndarray, cfg: ModelConfig) -> LossTerms:
    """Mean NLL over QoS metrics plus ``lam`` times the mean classifier loss.

    ``y_true`` and ``labels`` are (batch, |QoS|) in ``cfg.qos`` order.  With
    ``classifier_only`` the NLL part is dropped entirely.
    """
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1, len(cfg.qos))
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, len(cfg.qos))
    nll = clf = None
    if out.mixtures:
        parts = [nll_loss(out.mixtures[q], y_true[:, j]) for j, q in enumerate(cfg.qos)]
        nll = ad.mean(ad.concat([ad.reshape(t, (1,)) for t in parts]))
    if out.clf_prob:
        if cfg.loss == "evl":
            parts = [evl_loss(out.clf_prob[q], labels[:, j], cfg.delta) for j, q in enumerate(cfg.qos)]
        else:
            parts = [bce_loss(out.clf_prob[q], labels[:, j]) for j, q in enumerate(cfg.qos)]
        clf = ad.mean(ad.concat([ad.reshape(t, (1,)) for t in parts]))
    if cfg.classifier_only:
        total = clf
    elif clf is None or cfg.lam == 0:
        total = nll
    else:
        total = nll + cfg.lam * clf
    if total is None:
        raise ValueError("model output lacks the heads the loss needs")
    return LossTerms(total, nll, clf)


def multitask_loss(out: ModelOutput, y_true, labels, cfg: ModelConfig) -> Tensor:
    return loss_terms(out, y_true, labels, cfg).total


def mixture_arrays(out: ModelOutput, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack mixtures into (batch, |QoS|, C) arrays of alpha, mu, sigma."""
    a = np.stack([out.mixtures[q].alpha.data for q in cfg.qos], axis=1)
    m = np.stack([out.mixtures[q].mu.data for q in cfg.qos], axis=1)
    s = np.stack([out.mixtures[q].sigma.data for q in cfg.qos], axis=1)
    return a, m, s
