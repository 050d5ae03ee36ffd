"""Numerical studies of the Euler sampler and calibration of its predictions.

``truncation_error_study`` integrates an analytic velocity field whose flow
is known in closed form and measures how the endpoint error falls with the
number of steps. Signed per-step residuals ``kappa_i`` (the one-step error
of the Euler map applied to the *exact* state, scaled by ``K``) are exposed
together with the error recursion they feed::

    E_{i+1} = E_i (1 - psi_i / K) + kappa_i / K,   psi_i = d g / d z

whose first term alone is ``sum_i kappa_i / K``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DomainError
from .flow import rollout, time_grid
from .schedules import NoiseSchedule, ScheduleKind


class AnalyticField(Protocol):
    def __call__(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor: ...

    def exact(self, z1: torch.Tensor, t: float) -> torch.Tensor:
        """Exact state at time ``t`` of the reverse flow started at ``z1`` (t=1)."""


def _bt(t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=z.dtype)
    return t.reshape(t.shape + (1,) * (z.ndim - t.ndim)) if t.ndim else t


@dataclass
class ConstantField:
    """``v = x_s - x_t``; the straight rectified path."""

    x_s: torch.Tensor
    x_t: torch.Tensor

    def __call__(self, z, t):
        return (self.x_s - self.x_t).expand_as(z)

    def exact(self, z1, t):
        return z1 - (1.0 - t) * (self.x_s - self.x_t)


@dataclass
class LinearField:
    """``v = rate * z``; exact reverse flow ``z_t = z_1 exp(rate (t - 1))``."""

    rate: float = 1.0

    def __call__(self, z, t):
        return self.rate * z

    def exact(self, z1, t):
        return z1 * math.exp(self.rate * (t - 1.0))


@dataclass
class TimeVaryingField:
    """``v = (1 + t) z``; exact ``z_t = z_1 exp(t + t^2/2 - 3/2)``."""

    def __call__(self, z, t):
        return (1.0 + _bt(t, z)) * z

    def exact(self, z1, t):
        return z1 * math.exp(t + 0.5 * t * t - 1.5)


@dataclass
class ErrorStudyReport:
    K_values: list[int]
    endpoint_errors: list[float]
    fitted_order: float
    signed_errors: list[np.ndarray] = field(default_factory=list)
    per_step_errors: list[np.ndarray] | None = None
    first_order_estimates: list[np.ndarray] | None = None
    second_order_estimates: list[np.ndarray] | None = None

    @property
    def exact(self) -> bool:
        return all(e == 0.0 for e in self.endpoint_errors)

    def rows(self):
        return list(zip(self.K_values, self.endpoint_errors))


def fit_order(K_values: Sequence[int], errors: Sequence[float]) -> float:
    """Negative log-log slope of error against K (1.0 for first-order methods)."""
    pairs = [(k, e) for k, e in zip(K_values, errors) if e > 0]
    if len(pairs) < 2:
        return float("nan")
    x = np.log([k for k, _ in pairs])
    y = np.log([e for _, e in pairs])
    return float(-np.polyfit(x, y, 1)[0])


def _residuals(field_, z1: torch.Tensor, K: int) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    h = 1.0 / K
    grid = time_grid(K)
    exact_states = [field_.exact(z1, t) for t in grid]
    kappas = []
    for t, x in zip(grid, exact_states):
        tt = torch.full((x.shape[0],), t, dtype=x.dtype)
        euler = x - h * field_(x, tt)
        kappas.append(K * (euler - field_.exact(z1, t - h)))
    return exact_states, kappas


def _jvp(field_, x: torch.Tensor, t: float, u: torch.Tensor) -> torch.Tensor:
    tt = torch.full((x.shape[0],), t, dtype=x.dtype)
    _, out = torch.func.jvp(lambda z: field_(z, tt), (x,), (u,))
    return out


def truncation_error_study(velocity_field, K_values: Sequence[int], z1: torch.Tensor,
                           schedule: NoiseSchedule | None = None, *,
                           residuals: bool = False, second_order: bool = False) -> ErrorStudyReport:
    """Euler endpoint error against the closed-form endpoint for each ``K``.

    ``residuals`` keeps the signed per-step residuals ``kappa_i`` and the
    first-order estimate ``sum kappa_i / K``; ``second_order`` adds the
    ``-1/K^2 sum_j psi_j sum_{i<j} kappa_i`` correction evaluated with
    Jacobian-vector products along the exact trajectory.
    """
    schedule = schedule or NoiseSchedule(ScheduleKind.RECTIFIED_FLOW)
    if schedule.kind is not ScheduleKind.RECTIFIED_FLOW:
        raise ConfigurationError("analytic studies integrate on the rectified-flow grid")
    K_values = [int(k) for k in K_values]
    if not K_values or any(k < 1 or k > 1024 for k in K_values):
        raise DomainError("K values must lie in [1, 1024]")
    if any(a >= b for a, b in zip(K_values, K_values[1:])):
        raise DomainError("K values must be strictly increasing")
    target = velocity_field.exact(z1, 0.0)
    errors, signed = [], []
    per_step, first, second = [], [], []
    for K in K_values:
        traj = rollout(z1, velocity_field, schedule, time_grid(K))
        diff = traj.final_state - target
        signed.append(diff.detach().cpu().numpy())
        errors.append(float(torch.linalg.vector_norm(diff)))
        if residuals or second_order:
            exact_states, kappas = _residuals(velocity_field, z1, K)
            per_step.append(torch.stack(kappas).detach().cpu().numpy())
            est1 = sum(kappas) / K
            first.append(est1.detach().cpu().numpy())
            if second_order:
                grid = time_grid(K)
                corr = torch.zeros_like(z1)
                running = torch.zeros_like(z1)
                for j in range(1, K):
                    running = running + kappas[j - 1]
                    corr = corr + _jvp(velocity_field, exact_states[j], grid[j], running)
                second.append((est1 - corr / (K * K)).detach().cpu().numpy())
    return ErrorStudyReport(
        K_values, errors, fit_order(K_values, errors), signed,
        per_step if (residuals or second_order) else None,
        first if (residuals or second_order) else None,
        second if second_order else None,
    )


def error_recursion(kappas: np.ndarray, psis: np.ndarray) -> np.ndarray:
    """Run ``E_{i+1} = E_i (1 - psi_i/K) + kappa_i/K`` from ``E_0 = 0`` (scalar or diagonal psi)."""
    K = len(kappas)
    e = np.zeros_like(kappas[0], dtype=float)
    for kappa, psi in zip(kappas, psis):
        e = e * (1.0 - psi / K) + kappa / K
    return e


@dataclass
class ReliabilityHistogram:
    bin_edges: list[float]
    bin_confidence: list[float]
    bin_accuracy: list[float]
    bin_counts: list[int]
    step_index: int = 0

    @property
    def total(self) -> int:
        return int(sum(self.bin_counts))

    @property
    def ece(self) -> float:
        n = self.total
        return float(sum(c / n * abs(a - p) for c, a, p in
                         zip(self.bin_counts, self.bin_accuracy, self.bin_confidence) if c))


def reliability_histogram(probabilities, labels, bins: int = 10, step_index: int = 0,
                          atol: float = 1e-4) -> ReliabilityHistogram:
    """Equal-width binning of max-probability confidence against accuracy.

    Empty bins report ``nan`` confidence and accuracy. Per-bin sums run over
    sorted values so the statistics do not depend on sample order.
    """
    p = np.asarray(torch.as_tensor(probabilities).detach().cpu(), dtype=np.float64)
    y = np.asarray(torch.as_tensor(labels).detach().cpu()).astype(np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DomainError("reliability_histogram needs a non-empty (n, classes) array")
    if y.shape != (p.shape[0],):
        raise DomainError("labels must have one entry per row")
    if bins < 1:
        raise DomainError("bins must be positive")
    if np.max(np.abs(p.sum(1) - 1.0)) > atol:
        raise DomainError("probability rows must sum to 1")
    conf = p.max(1)
    correct = (p.argmax(1) == y).astype(np.float64)
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    edges = [i / bins for i in range(bins + 1)]
    counts, mean_conf, mean_acc = [], [], []
    for b in range(bins):
        mask = idx == b
        n = int(mask.sum())
        counts.append(n)
        if n:
            mean_conf.append(float(np.sort(conf[mask]).sum() / n))
            mean_acc.append(float(correct[mask].sum() / n))
        else:
            mean_conf.append(float("nan"))
            mean_acc.append(float("nan"))
    return ReliabilityHistogram(edges, mean_conf, mean_acc, counts, step_index)


def trajectory_reliability(per_step_logits: Sequence[torch.Tensor], labels, bins: int = 10):
    """One histogram per sampling step, in integration order."""
    return [reliability_histogram(torch.softmax(l.detach().double(), -1), labels, bins, i)
            for i, l in enumerate(per_step_logits)]


def write_error_csv(report: ErrorStudyReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "endpoint_error"])
        for k, e in report.rows():
            w.writerow([k, repr(float(e))])
    return path


def write_reliability_csv(hists: Sequence[ReliabilityHistogram], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "bin_lo", "bin_hi", "confidence", "accuracy", "count"])
        for h in hists:
            for i, c in enumerate(h.bin_counts):
                w.writerow([h.step_index, h.bin_edges[i], h.bin_edges[i + 1],
                            h.bin_confidence[i], h.bin_accuracy[i], c])
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_error_vs_k(report: ErrorStudyReport, path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    ks = [k for k, e in report.rows() if e > 0]
    es = [e for e in report.endpoint_errors if e > 0]
    ax.loglog(ks, es, "o-", label=f"order {report.fitted_order:.2f}")
    ax.set_xlabel("K (Euler steps)")
    ax.set_ylabel("endpoint error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_reliability(hists: Sequence[ReliabilityHistogram], path: str | Path) -> Path:
    plt = _pyplot()
    n = len(hists)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for ax, h in zip(axes[0], hists):
        lo = np.array(h.bin_edges[:-1])
        acc = np.nan_to_num(np.array(h.bin_accuracy))
        ax.bar(lo, acc, width=lo[1] - lo[0] if len(lo) > 1 else 1.0, align="edge", edgecolor="k")
        ax.plot([0, 1], [0, 1], "r--", lw=1)
        ax.set_title(f"step {h.step_index}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
