"""Metric-based distillation losses ``L(prediction, target)``.

All kinds return a non-negative scalar and vanish when ``prediction`` equals
``target``. Logit kinds expect ``(B, classes)`` tensors; ``pkd`` and
``squared_error`` accept any shape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

_EPS = 1e-6
_MASK = 1000.0


class LossKind(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    VANILLA_KD = "vanilla_kd"
    DKD = "dkd"
    DIST = "dist"
    PKD = "pkd"


_DEFAULT_TEMPERATURE = {LossKind.VANILLA_KD: 4.0, LossKind.DKD: 4.0, LossKind.DIST: 1.0}


@dataclass(frozen=True)
class MetricLoss:
    kind: LossKind = LossKind.SQUARED_ERROR
    temperature: float | None = None
    dkd_alpha: float = 1.0
    dkd_beta: float = 8.0
    dist_beta: float = 2.0
    dist_gamma: float = 2.0

    def __post_init__(self) -> None:
        try:
            kind = LossKind(self.kind)
        except ValueError as exc:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}") from exc
        object.__setattr__(self, "kind", kind)
        if self.temperature is None:
            object.__setattr__(self, "temperature", _DEFAULT_TEMPERATURE.get(kind, 1.0))
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        weights = (self.dkd_alpha, self.dkd_beta, self.dist_beta, self.dist_gamma)
        if not all(torch.isfinite(torch.tensor(w)) for w in weights):
            raise ConfigurationError("loss weights must be finite")

    @property
    def needs_labels(self) -> bool:
        return self.kind is LossKind.DKD

    def __call__(self, prediction, target, labels=None):
        return compute(self, prediction, target, labels)


def kl_div(p_log: torch.Tensor, q_log: torch.Tensor) -> torch.Tensor:
    """Row-wise ``KL(p || q)`` from log-probabilities, batch-averaged."""
    return (p_log.exp() * (p_log - q_log)).sum(-1).mean()


def vanilla_kd(prediction, target, temperature: float = 4.0):
    tau = temperature
    return tau * tau * kl_div(F.log_softmax(target / tau, -1), F.log_softmax(prediction / tau, -1))


def dkd(prediction, target, labels, temperature: float = 4.0, alpha: float = 1.0, beta: float = 8.0):
    """Decoupled KD: target-class binary KL plus non-target-class KL."""
    tau = temperature
    gt = F.one_hot(labels.long(), prediction.shape[-1]).to(torch.bool)
    p_s = F.softmax(prediction / tau, -1)
    p_t = F.softmax(target / tau, -1)
    pt_s = (p_s * gt).sum(-1)
    pt_t = (p_t * gt).sum(-1)
    b_s = torch.stack([pt_s, 1 - pt_s], -1).clamp_min(1e-12)
    b_t = torch.stack([pt_t, 1 - pt_t], -1).clamp_min(1e-12)
    tckd = kl_div(b_t.log(), b_s.log())
    nckd = kl_div(
        F.log_softmax(target / tau - _MASK * gt, -1),
        F.log_softmax(prediction / tau - _MASK * gt, -1),
    )
    return tau * tau * (alpha * tckd + beta * nckd)


def _pearson(a: torch.Tensor, b: torch.Tensor, dim: int) -> torch.Tensor:
    a = a - a.mean(dim, keepdim=True)
    b = b - b.mean(dim, keepdim=True)
    num = (a * b).sum(dim)
    den = (a.pow(2).sum(dim) * b.pow(2).sum(dim) + _EPS * _EPS).sqrt()
    return num / den


def dist(prediction, target, temperature: float = 1.0, beta: float = 2.0, gamma: float = 2.0):
    """Inter-class (per-sample rows) and intra-class (per-class columns) correlation loss."""
    y_s = F.softmax(prediction / temperature, -1)
    y_t = F.softmax(target / temperature, -1)
    inter = 1.0 - _pearson(y_s, y_t, dim=1).mean()
    intra = 1.0 - _pearson(y_s, y_t, dim=0).mean()
    return beta * inter + gamma * intra


def _standardize(x: torch.Tensor) -> torch.Tensor:
    dims = [0] + list(range(2, x.ndim))
    mean = x.mean(dims, keepdim=True)
    var = x.var(dims, unbiased=False, keepdim=True)
    return (x - mean) / (var + _EPS).sqrt()


def pkd(prediction, target):
    """MSE between per-channel standardised feature maps (stats over batch and space)."""
    return F.mse_loss(_standardize(prediction), _standardize(target))


def compute(loss: MetricLoss, prediction: torch.Tensor, target: torch.Tensor, labels=None) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise ShapeError(f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}")
    kind = loss.kind
    if kind is LossKind.SQUARED_ERROR:
        return F.mse_loss(prediction, target)
    if kind is LossKind.PKD:
        return pkd(prediction, target)
    if prediction.ndim != 2:
        raise ShapeError(f"{kind.value} expects (batch, classes) logits")
    if kind is LossKind.VANILLA_KD:
        return vanilla_kd(prediction, target, loss.temperature)
    if kind is LossKind.DIST:
        return dist(prediction, target, loss.temperature, loss.dist_beta, loss.dist_gamma)
    if labels is None:
        raise ConfigurationError("dkd requires ground-truth labels")
    return dkd(prediction, target, labels, loss.temperature, loss.dkd_alpha, loss.dkd_beta)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels.long())
