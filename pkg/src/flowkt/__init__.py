"""Knowledge transfer with flow matching: serial flow losses, meta-encoders and metric losses."""

from .encoders import (Arch, EncoderSpec, MetaEncoder, NormKind, ShapeTransform, ShapeTransformSpec,
                       TransformMode, build_encoder, build_transform)
from .errors import (CheckpointVersionError, ConfigurationError, DatasetMissingError, DivergenceError,
                     DomainError, FlowKTError, NumericalFailure, ShapeError)
from .flow import (MAX_STEPS, FlowBatch, FlowTrajectory, Mode, PairDecoupleConfig, euler_step, interpolate,
                   pair_decouple, predict_target, sample, serial_loss, time_grid, velocity_target)
from .losses import LossKind, MetricLoss, compute
from .schedules import (DerivativeMode, FDScheme, NoiseSchedule, ScheduleKind, boundary_report, evaluate,
                        make_schedule)
from .variants import OnlineConfig, OnlineTarget, ThetaConfig, online_loss, theta_loss, vanilla_predict

__version__ = "0.1.0"

__all__ = [
    "Arch", "EncoderSpec", "MetaEncoder", "NormKind", "ShapeTransform", "ShapeTransformSpec", "TransformMode",
    "build_encoder", "build_transform",
    "CheckpointVersionError", "ConfigurationError", "DatasetMissingError", "DivergenceError", "DomainError",
    "FlowKTError", "NumericalFailure", "ShapeError",
    "MAX_STEPS", "FlowBatch", "FlowTrajectory", "Mode", "PairDecoupleConfig", "euler_step", "interpolate",
    "pair_decouple", "predict_target", "sample", "serial_loss", "time_grid", "velocity_target",
    "LossKind", "MetricLoss", "compute",
    "DerivativeMode", "FDScheme", "NoiseSchedule", "ScheduleKind", "boundary_report", "evaluate", "make_schedule",
    "OnlineConfig", "OnlineTarget", "ThetaConfig", "online_loss", "theta_loss", "vanilla_predict",
]
