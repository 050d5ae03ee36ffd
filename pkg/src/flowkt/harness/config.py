"""Experiment configuration: YAML file + ``--set dotted.key=value`` overrides."""

from __future__ import annotations

import copy
import enum
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..encoders import EncoderSpec
from ..errors import ConfigurationError
from ..flow import MAX_STEPS
from ..losses import LossKind, MetricLoss
from ..schedules import NoiseSchedule, ScheduleKind
from ..variants import OnlineTarget

SEED_ENV = "FLOWKT_SEED"


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``5e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


class Method(str, enum.Enum):
    FMKT = "fmkt"
    FMKT_THETA = "fmkt_theta"
    OFMKT = "ofmkt"
    VANILLA_KD_BASELINE = "vanilla_kd_baseline"
    CE_BASELINE = "ce_baseline"

    @property
    def uses_flow(self) -> bool:
        return self in (Method.FMKT, Method.FMKT_THETA, Method.OFMKT)

    @property
    def uses_teacher(self) -> bool:
        return self in (Method.FMKT, Method.FMKT_THETA, Method.VANILLA_KD_BASELINE)


class DatasetName(str, enum.Enum):
    SYNTHETIC_GAUSSIANS = "synthetic_gaussians"
    TWO_SPIRALS = "two_spirals"
    TINY_IMAGES = "tiny_images"


@dataclass
class DatasetConfig:
    name: DatasetName = DatasetName.SYNTHETIC_GAUSSIANS
    n_classes: int = 4
    dim: int = 8
    separation: float = 3.0
    noise: float = 1.0
    clusters_per_class: int = 1
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 2000
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        self.name = DatasetName(self.name)
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError("dataset split sizes must be positive")
        if self.clusters_per_class < 1:
            raise ConfigurationError("clusters_per_class must be positive")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.name is DatasetName.TINY_IMAGES and not self.path:
            raise ConfigurationError("tiny_images needs dataset.path to an .npz archive")


@dataclass
class NetSpec:
    kind: str = "mlp"
    width: int = 32
    blocks: list[int] = field(default_factory=lambda: [2, 2, 2])

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ConfigurationError(f"network kind must be mlp or cnn, got {self.kind!r}")
        self.blocks = [int(b) for b in self.blocks]
        if len(self.blocks) != 3 or any(b < 0 for b in self.blocks):
            raise ConfigurationError("blocks must list three non-negative stage depths")
        if self.width < 1:
            raise ConfigurationError("width must be positive")

    @property
    def depth(self) -> int:
        return sum(self.blocks)


@dataclass
class LRSchedule:
    milestones: list[int] = field(default_factory=list)
    factor: float = 0.1


@dataclass
class ExperimentConfig:
    method: Method = Method.FMKT
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    teacher_arch: NetSpec = field(default_factory=lambda: NetSpec(width=64, blocks=[2, 2, 2]))
    student_arch: NetSpec = field(default_factory=lambda: NetSpec(width=16, blocks=[0, 1, 1]))
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    loss: MetricLoss = field(default_factory=lambda: MetricLoss(LossKind.DIST))
    N: int = MAX_STEPS
    K_eval: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: LRSchedule = field(default_factory=LRSchedule)
    warmup_epochs: int | None = None
    seed: int = 0
    dirac_ratio: float | None = None
    distill_stages: list[int] = field(default_factory=lambda: [0, 0, 0])
    loss_weight: float = 1.0
    theta_balance: float = 1.0
    online_target: OnlineTarget = OnlineTarget.FINAL_STATE_PREDICTION
    kd_weight: float = 1.0
    teacher_epochs: int = 30
    teacher_learning_rate: float = 0.05
    allow_more_steps: bool = False
    log_wall_time: bool = False

    def __post_init__(self):
        self.method = Method(self.method)
        self.online_target = OnlineTarget(self.online_target)
        self.K_eval = sorted({int(k) for k in self.K_eval})
        self.distill_stages = [int(bool(s)) for s in self.distill_stages]
        if not self.K_eval or self.K_eval[0] < 1:
            raise ConfigurationError("K_eval must contain positive integers")
        if len(self.distill_stages) != 3:
            raise ConfigurationError("distill_stages is a three-entry mask [n3, n2, n1]")
        if self.N < 1 or (self.N > MAX_STEPS and not self.allow_more_steps):
            raise ConfigurationError(f"N must lie in [1, {MAX_STEPS}] unless allow_more_steps")
        if self.epochs < 1 or self.batch_size < 1 or self.teacher_epochs < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.feature_based and self.method in (Method.FMKT_THETA, Method.OFMKT):
            raise ConfigurationError(f"{self.method.value} is logit-based; distill_stages must be [0, 0, 0]")
        if self.feature_based and self.loss.kind not in (LossKind.PKD, LossKind.SQUARED_ERROR):
            raise ConfigurationError("feature-based transfer needs loss.kind pkd or squared_error")
        if self.dirac_ratio is not None and not (0 <= self.dirac_ratio <= 1):
            raise ConfigurationError("dirac_ratio must lie in [0, 1]")
        if self.warmup_epochs is not None and self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be non-negative")

    @property
    def feature_based(self) -> bool:
        return any(self.distill_stages)

    @property
    def effective_warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        if self.method.uses_flow and self.schedule.kind is not ScheduleKind.RECTIFIED_FLOW:
            return 3
        return 0

    @property
    def effective_dirac_ratio(self) -> float:
        if self.dirac_ratio is not None:
            return self.dirac_ratio
        return 0.25 if self.feature_based else 1.0

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {
    "dataset": DatasetConfig,
    "teacher_arch": NetSpec,
    "student_arch": NetSpec,
    "schedule": NoiseSchedule,
    "encoder": EncoderSpec,
    "loss": MetricLoss,
    "lr_schedule": LRSchedule,
}


def _build(cls, data: Any, where: str):
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) under {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {where}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = copy.deepcopy(data or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    try:
        return ExperimentConfig(**data)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc


def apply_override(data: dict[str, Any], assignment: str) -> None:
    """Apply ``dotted.key=value`` in place; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigurationError(f"bad override key {key!r}")
    try:
        value = _yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse override value {raw!r}") from exc
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r} descends into a scalar")
    node[parts[-1]] = value


def load_config(path: str | Path | None, overrides: list[str] | None = None,
                env: dict[str, str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = _yaml(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a mapping")
    for assignment in overrides or []:
        apply_override(data, assignment)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from exc
    return config_from_dict(data)
