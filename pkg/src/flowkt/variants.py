"""Two derived objectives.

``theta_loss`` distils the flow's final state into the student's own
classification head, so deployment runs the head alone and never touches the
meta-encoder. ``online_loss`` drops the teacher: the flow's completed sample
acts as the target for every intermediate prediction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import nn

from . import losses as L
from .encoders import ShapeTransform, apply_transform
from .errors import ConfigurationError
from .flow import Encoder, FlowBatch, MAX_STEPS, PairDecoupleConfig, rollout, serial_loss, time_grid, _check_steps
from .schedules import NoiseSchedule


class OnlineTarget(str, enum.Enum):
    FINAL_STATE_PREDICTION = "final_state_prediction"
    ENSEMBLE_PREDICTION = "ensemble_prediction"


@dataclass
class ThetaConfig:
    vanilla_head: nn.Module
    balance_weight: float = 1.0

    def __post_init__(self) -> None:
        if not (self.balance_weight >= 0 and torch.isfinite(torch.tensor(self.balance_weight))):
            raise ConfigurationError("balance_weight must be finite and non-negative")


@dataclass(frozen=True)
class OnlineConfig:
    N: int = MAX_STEPS
    loss: L.MetricLoss = L.MetricLoss(L.LossKind.DIST)
    label_weight: float = 1.0
    target: OnlineTarget = OnlineTarget.FINAL_STATE_PREDICTION

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", OnlineTarget(self.target))
        _check_steps(self.N, allow_more=False)


def pooled(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).mean(-1) if x.ndim > 2 else x


def vanilla_predict(x_s: torch.Tensor, cfg: ThetaConfig) -> torch.Tensor:
    """Deployment path of the theta variant: pool, then the student's own head."""
    return cfg.vanilla_head(pooled(x_s))


def theta_loss(batch: FlowBatch, encoder: Encoder, schedule: NoiseSchedule, loss: L.MetricLoss,
               N: int, transform: ShapeTransform | None, cfg: ThetaConfig, *,
               pd: PairDecoupleConfig | None = None, generator: torch.Generator | None = None,
               weight: float = 1.0) -> torch.Tensor:
    if batch.y is None:
        raise ConfigurationError("theta_loss needs ground-truth labels")
    flow_loss, traj = serial_loss(batch, encoder, schedule, loss, N, transform,
                                  pd=pd, generator=generator, weight=weight)
    logits = vanilla_predict(batch.x_s, cfg)
    # the flow output acts as a fixed progressive teacher for the head
    flow_target = apply_transform(transform, traj.final_state).detach()
    head_loss = loss(logits, flow_target, batch.y)
    return head_loss + cfg.balance_weight * L.cross_entropy(logits, batch.y) + flow_loss


def online_loss(x_s: torch.Tensor, y: torch.Tensor, encoder: Encoder, schedule: NoiseSchedule,
                loss: L.MetricLoss, N: int, transform: ShapeTransform | None = None, *,
                target: OnlineTarget | str = OnlineTarget.FINAL_STATE_PREDICTION,
                label_weight: float = 1.0, weight: float = 1.0) -> torch.Tensor:
    """Online objective: every step's prediction chases the flow's own completed sample."""
    if y is None:
        raise ConfigurationError("online_loss needs ground-truth labels")
    _check_steps(N, allow_more=False)
    traj = rollout(x_s, encoder, schedule, time_grid(N), transform)
    if OnlineTarget(target) is OnlineTarget.FINAL_STATE_PREDICTION:
        self_target = apply_transform(transform, traj.final_state)
    else:
        self_target = traj.ensemble
    self_target = self_target.detach()
    total = 0.0
    for pred in traj.per_step_predictions:
        total = total + loss(pred, self_target, y) + label_weight * L.cross_entropy(pred, y)
    return total * (weight / N)
