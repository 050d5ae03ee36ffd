"""Serial flow-matching transfer: interpolant, Euler sampling and the training loss.

The state starts at ``Z_1 = alpha_1 * x_s`` and is integrated backwards in
time with explicit Euler steps ``Z <- Z - h * g(Z, t)``. At every step the
current velocity is inverted into a prediction of the teacher quantity::

    pred_t = T((d_alpha * Z_1 - g(Z_t, t)) / -d_sigma)

The states are produced from ``x_s`` and encoder outputs only. Teacher
tensors and labels enter the computation exclusively as loss targets, so the
encoder can never read the answer off its own input.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn

from . import losses as L
from .encoders import ShapeTransform, apply_transform, has_batch_statistics
from .errors import ConfigurationError, NumericalFailure, ShapeError
from .schedules import NoiseSchedule, evaluate

MAX_STEPS = 8

Encoder = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class Mode(str, enum.Enum):
    FEATURE_BASED = "feature_based"
    LOGIT_BASED = "logit_based"


@dataclass
class FlowBatch:
    x_s: torch.Tensor
    x_t: torch.Tensor | None
    y: torch.Tensor | None = None
    mode: Mode = Mode.LOGIT_BASED
    match_label: bool | None = None

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.x_t is not None and self.x_t.shape[0] != self.x_s.shape[0]:
            raise ShapeError("x_s and x_t must share the batch dimension")
        if self.y is not None:
            if self.y.shape[0] != self.x_s.shape[0]:
                raise ShapeError("labels must have one entry per sample")
            if self.mode is Mode.FEATURE_BASED and not self.match_label:
                raise ConfigurationError("labels in feature_based mode need match_label=True")

    @property
    def uses_labels(self) -> bool:
        if self.match_label is None:
            return self.mode is Mode.LOGIT_BASED and self.y is not None
        return bool(self.match_label)


@dataclass
class FlowTrajectory:
    states: list[torch.Tensor]
    per_step_predictions: list[torch.Tensor]
    times: list[float]
    ensemble: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.ensemble = torch.stack(self.per_step_predictions, 0).mean(0)

    @property
    def step_count(self) -> int:
        return len(self.per_step_predictions)

    @property
    def final_state(self) -> torch.Tensor:
        return self.states[-1]


@dataclass(frozen=True)
class PairDecoupleConfig:
    dirac_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.dirac_ratio <= 1.0):
            raise ConfigurationError("dirac_ratio must lie in [0, 1]")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x_s, x_t, t: float, schedule: NoiseSchedule):
    _check_same_shape(x_s, x_t)
    v = evaluate(schedule, t)
    return v.alpha * x_s + v.sigma * x_t


def velocity_target(x_s, x_t, t: float, schedule: NoiseSchedule, delta: float | None = None):
    """Time derivative of the interpolant, ``d_alpha * x_s + d_sigma * x_t``."""
    _check_same_shape(x_s, x_t)
    v = evaluate(schedule, t, delta)
    return v.d_alpha * x_s + v.d_sigma * x_t


def time_grid(steps: int) -> list[float]:
    """Uniform descending grid ``[1, 1 - 1/steps, ..., 1/steps]``."""
    return [i / steps for i in range(steps, 0, -1)]


def _step_sizes(grid: Sequence[float]) -> list[float]:
    nxt = list(grid[1:]) + [0.0]
    return [a - b for a, b in zip(grid, nxt)]


def euler_step(z, t: float, step_size: float, encoder: Encoder, step_index: int | None = None):
    """One reverse Euler step; returns ``(z - step_size * v, v)``."""
    if not step_size > 0:
        raise ConfigurationError("step_size must be positive")
    if t - step_size < -1e-9:
        raise ConfigurationError(f"step from t={t} by {step_size} leaves [0, 1]")
    tt = torch.full((z.shape[0],), float(t), dtype=z.dtype, device=z.device)
    velocity = encoder(z, tt)
    if not torch.isfinite(velocity).all():
        raise NumericalFailure(
            f"non-finite velocity at t={t:g} (step {step_index})", t=t, step=step_index
        )
    return z - step_size * velocity, velocity


def predict_target(z1, velocity, t: float, schedule: NoiseSchedule,
                   transform: ShapeTransform | None = None, delta: float | None = None):
    v = evaluate(schedule, t, delta)
    if v.d_sigma == 0:
        raise ZeroDivisionError(f"d_sigma vanishes at t={t:g}")
    if v.d_alpha == 1.0 and v.d_sigma == -1.0:
        raw = z1 - velocity
    else:
        raw = (v.d_alpha * z1 - velocity) / (-v.d_sigma)
    return apply_transform(transform, raw)


def pair_decouple(x_t: torch.Tensor, pd: PairDecoupleConfig,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Keep the first ``floor(ratio * B)`` rows, permute the remainder among themselves."""
    b = x_t.shape[0]
    keep = int(math.floor(pd.dirac_ratio * b))
    if keep >= b:
        return x_t
    if generator is None:
        generator = torch.Generator().manual_seed(pd.seed)
    perm = torch.randperm(b - keep, generator=generator) + keep
    index = torch.cat([torch.arange(keep), perm])
    return x_t[index.to(x_t.device)]


def _check_steps(steps: int, allow_more: bool) -> None:
    if steps < 1:
        raise ConfigurationError("step count must be >= 1")
    if steps > MAX_STEPS and not allow_more:
        raise ConfigurationError(f"N={steps} exceeds {MAX_STEPS}; pass allow_more_steps=True to override")


def _check_encoder(encoder) -> None:
    if isinstance(encoder, nn.Module) and has_batch_statistics(encoder):
        raise ConfigurationError("encoder uses batch-statistics normalisation")


def rollout(x_s, encoder: Encoder, schedule: NoiseSchedule, grid: Sequence[float],
            transform: ShapeTransform | None = None) -> FlowTrajectory:
    """Integrate from ``alpha_1 * x_s`` over ``grid`` collecting per-step predictions."""
    alpha_1 = evaluate(schedule, 1.0).alpha
    z1 = x_s if alpha_1 == 1.0 else alpha_1 * x_s
    z = z1
    states, preds = [z1], []
    for i, (t, h) in enumerate(zip(grid, _step_sizes(grid))):
        z, velocity = euler_step(z, t, h, encoder, step_index=i)
        states.append(z)
        preds.append(predict_target(z1, velocity, t, schedule, transform, delta=h))
    return FlowTrajectory(states, preds, list(grid))


def serial_loss(batch: FlowBatch, encoder: Encoder, schedule: NoiseSchedule, loss: L.MetricLoss,
                N: int, transform: ShapeTransform | None = None, *,
                pd: PairDecoupleConfig | None = None, generator: torch.Generator | None = None,
                weight: float = 1.0, allow_more_steps: bool = False):
    """Serial training loss over ``N`` Euler steps; returns ``(loss, trajectory)``.

    The returned loss is ``weight / N * sum_i [L(pred_i, x_t) + CE(pred_i, y)]``,
    the cross-entropy term present only when the batch matches labels.
    """
    _check_steps(N, allow_more_steps)
    _check_encoder(encoder)
    if batch.x_t is None:
        raise ConfigurationError("serial_loss needs a teacher target; use variants.online_loss")
    target = batch.x_t
    if pd is not None and pd.dirac_ratio < 1.0:
        target = pair_decouple(target, pd, generator)
    traj = rollout(batch.x_s, encoder, schedule, time_grid(N), transform)
    total = 0.0
    for pred in traj.per_step_predictions:
        total = total + loss(pred, target, batch.y)
        if batch.uses_labels:
            total = total + L.cross_entropy(pred, batch.y)
    return total * (weight / N), traj


def sample(x_s, encoder: Encoder, schedule: NoiseSchedule, K: int,
           transform: ShapeTransform | None = None, grid: Sequence[float] | None = None) -> FlowTrajectory:
    """Skip-step inference with ``K`` steps; the ensemble mean is the model output."""
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    if grid is None:
        grid = time_grid(K)
    elif len(grid) != K or grid[0] != 1.0 or any(a <= b for a, b in zip(grid, list(grid[1:]) + [0.0])):
        raise ConfigurationError("grid must hold K strictly decreasing times starting at 1")
    return rollout(x_s, encoder, schedule, grid, transform)
