"""Teacher pretraining, distillation under every method, and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import torch
from torch import nn

from .. import losses as L
from ..encoders import (Arch, MetaEncoder, ShapeTransform, ShapeTransformSpec, TransformMode, build_encoder,
                        build_transform)
from ..errors import DivergenceError, NumericalFailure, ShapeError
from ..flow import FlowBatch, FlowTrajectory, Mode, PairDecoupleConfig, sample, serial_loss
from ..variants import ThetaConfig, online_loss, theta_loss, vanilla_predict
from .checkpoint import Checkpoint, pack
from .config import ExperimentConfig, Method, config_from_dict
from .data import Dataset, Split, make_dataset
from .models import StagedNet, build_net

log = logging.getLogger(__name__)

EVAL_BATCH = 1024
# seed offsets keep the independent RNG streams of one run apart
_TEACHER_SEED, _STUDENT_SEED, _FLOW_SEED, _LOADER_SEED, _PD_SEED = 11, 23, 37, 41, 53


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1_accuracy: float
    per_K_accuracy: dict[int, float] = field(default_factory=dict)
    per_K_loss: dict[int, float] = field(default_factory=dict)
    wall_time_seconds: float = 0.0
    # K whose flow accuracy is reported as top1; None when the student head is deployed
    deployed_k: int | None = None


class FlowModule(nn.Module):
    def __init__(self, encoder: MetaEncoder, transform: ShapeTransform):
        super().__init__()
        self.encoder = encoder
        self.transform = transform


class StudentSystem(nn.Module):
    """Student network plus whatever flow modules its method attaches."""

    def __init__(self, cfg: ExperimentConfig, input_shape, n_classes: int,
                 teacher_feature_shapes: list[list[int]] | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.student: StagedNet = build_net(cfg.student_arch, input_shape, n_classes, cfg.seed + _STUDENT_SEED)
        self.flows = nn.ModuleDict()
        self.teacher_feature_shapes = teacher_feature_shapes
        if not cfg.method.uses_flow:
            return
        with torch.no_grad():
            feats = [f.shape[1:] for f in self.student.features(torch.zeros((2,) + tuple(input_shape)))]
        seed = cfg.seed + _FLOW_SEED
        if cfg.feature_based:
            # feature-space MLP encoders use a single [Linear-ReLU-Linear] block
            feature_spec = (dataclasses.replace(cfg.encoder, depth=1) if cfg.encoder.arch is Arch.MLP
                            else cfg.encoder)
            if teacher_feature_shapes is None:
                raise ShapeError("feature-based transfer needs the teacher's stage shapes")
            for stage, on in enumerate(cfg.distill_stages):
                if not on:
                    continue
                s_shape, t_shape = tuple(feats[stage]), tuple(teacher_feature_shapes[stage])
                if s_shape[1:] != t_shape[1:]:
                    raise ShapeError(f"stage {stage}: student {s_shape} vs teacher {t_shape} spatial mismatch")
                mode = TransformMode.IDENTITY if s_shape == t_shape else TransformMode.CONV_PROJECTION
                tf = ShapeTransformSpec(mode, None if mode is TransformMode.IDENTITY else t_shape[0])
                self.flows[f"stage{stage}"] = FlowModule(
                    build_encoder(feature_spec, s_shape, seed + stage),
                    build_transform(tf, s_shape, seed + 100 + stage),
                )
        else:
            s_shape = tuple(feats[-1])
            self.flows["logit"] = FlowModule(
                build_encoder(cfg.encoder, s_shape, seed),
                build_transform(ShapeTransformSpec(TransformMode.POOL_LINEAR, n_classes), s_shape, seed + 100),
            )

    @property
    def logit_flow(self) -> FlowModule | None:
        return self.flows["logit"] if "logit" in self.flows else None

    @property
    def deploys_flow(self) -> bool:
        """True when the deployed prediction is the flow ensemble (K-dependent)."""
        return self.logit_flow is not None and self.cfg.method in (Method.FMKT, Method.OFMKT)

    def theta(self) -> ThetaConfig:
        return ThetaConfig(self.student.head, self.cfg.theta_balance)

    def flow_trajectory(self, x: torch.Tensor, K: int) -> FlowTrajectory:
        flow = self.logit_flow
        if flow is None:
            raise ShapeError(f"{self.cfg.method.value} has no logit-space flow to sample")
        feat = self.student.features(x)[-1]
        return sample(feat, flow.encoder, self.cfg.schedule, K, flow.transform)

    def flow_logits(self, x: torch.Tensor, K: int) -> torch.Tensor:
        return self.flow_trajectory(x, K).ensemble

    def predict(self, x: torch.Tensor, K: int) -> torch.Tensor:
        if self.deploys_flow:
            return self.flow_logits(x, K)
        if self.cfg.method is Method.FMKT_THETA:
            return vanilla_predict(self.student.features(x)[-1], self.theta())
        return self.student(x)

    def encoder_calls(self) -> int:
        return sum(f.encoder.forward_calls for f in self.flows.values())

    def loss(self, x, y, teacher: StagedNet | None, pd_gen: torch.Generator | None):
        """Training objective; returns ``(loss, logits used for train accuracy)``."""
        cfg, method = self.cfg, self.cfg.method
        s_feats = self.student.features(x)
        if method is Method.CE_BASELINE:
            logits = self.student.head(StagedNet.pool(s_feats[-1]))
            return L.cross_entropy(logits, y), logits
        with torch.no_grad():
            t_feats = teacher.features(x) if teacher is not None and method.uses_teacher else None
            t_logits = teacher.head(StagedNet.pool(t_feats[-1])) if t_feats is not None else None
        if method is Method.VANILLA_KD_BASELINE:
            logits = self.student.head(StagedNet.pool(s_feats[-1]))
            kd = cfg.loss if cfg.loss.kind is L.LossKind.VANILLA_KD else L.MetricLoss(L.LossKind.VANILLA_KD)
            return L.cross_entropy(logits, y) + cfg.kd_weight * kd(logits, t_logits, y), logits
        pd = PairDecoupleConfig(cfg.effective_dirac_ratio, cfg.seed + _PD_SEED)
        if method is Method.OFMKT:
            flow = self.logit_flow
            loss = online_loss(s_feats[-1], y, flow.encoder, cfg.schedule, cfg.loss, cfg.N, flow.transform,
                               target=cfg.online_target, weight=cfg.loss_weight)
            return loss, None
        if method is Method.FMKT_THETA:
            flow = self.logit_flow
            batch = FlowBatch(s_feats[-1], t_logits, y, Mode.LOGIT_BASED)
            loss = theta_loss(batch, flow.encoder, cfg.schedule, cfg.loss, cfg.N, flow.transform, self.theta(),
                              pd=pd, generator=pd_gen, weight=cfg.loss_weight)
            return loss, None
        if not cfg.feature_based:
            flow = self.logit_flow
            batch = FlowBatch(s_feats[-1], t_logits, y, Mode.LOGIT_BASED)
            loss, traj = serial_loss(batch, flow.encoder, cfg.schedule, cfg.loss, cfg.N, flow.transform,
                                     pd=pd, generator=pd_gen, weight=cfg.loss_weight,
                                     allow_more_steps=cfg.allow_more_steps)
            return loss, traj.ensemble
        logits = self.student.head(StagedNet.pool(s_feats[-1]))
        total = L.cross_entropy(logits, y)
        for name, flow in self.flows.items():
            stage = int(name.removeprefix("stage"))
            batch = FlowBatch(s_feats[stage], t_feats[stage], None, Mode.FEATURE_BASED)
            fl, _ = serial_loss(batch, flow.encoder, cfg.schedule, cfg.loss, cfg.N, flow.transform,
                                pd=pd, generator=pd_gen, weight=cfg.loss_weight,
                                allow_more_steps=cfg.allow_more_steps)
            total = total + fl
        return total, logits


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _lr_at(cfg: ExperimentConfig, base: float, epoch: int, it: int, iters: int, warmup: int) -> float:
    lr = base * cfg.lr_schedule.factor ** sum(1 for m in cfg.lr_schedule.milestones if epoch >= m)
    if warmup > 0 and epoch < warmup:
        lr *= (epoch * iters + it + 1) / (warmup * iters)
    return lr


def _sgd(params, cfg: ExperimentConfig, lr: float):
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@torch.no_grad()
def _accuracy(fn, split: Split) -> tuple[float, float]:
    correct, ce = 0, 0.0
    for i in range(0, len(split), EVAL_BATCH):
        x, y = split.x[i:i + EVAL_BATCH], split.y[i:i + EVAL_BATCH]
        logits = fn(x)
        correct += int((logits.argmax(-1) == y).sum())
        ce += float(nn.functional.cross_entropy(logits, y, reduction="sum"))
    return correct / len(split), ce / len(split)


def _check_finite(loss: torch.Tensor, epoch: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{what}: non-finite loss at epoch {epoch}", epoch=epoch)


def train_teacher(cfg: ExperimentConfig, data: Dataset | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Cross-entropy pretraining of the teacher network."""
    data = data or make_dataset(cfg.dataset)
    torch.manual_seed(cfg.seed)
    net = build_net(cfg.teacher_arch, data.input_shape, data.n_classes, cfg.seed + _TEACHER_SEED)
    gen = torch.Generator().manual_seed(cfg.seed + _LOADER_SEED)
    opt = _sgd(net.parameters(), cfg, cfg.teacher_learning_rate)
    iters = math.ceil(len(data.train) / cfg.batch_size)
    records = []
    start = time.perf_counter()
    for epoch in range(cfg.teacher_epochs):
        net.train()
        total, count = 0.0, 0
        for it, idx in enumerate(_batches(len(data.train), cfg.batch_size, gen)):
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, cfg.teacher_learning_rate, epoch, it, iters, 0)
            loss = L.cross_entropy(net(data.train.x[idx]), data.train.y[idx])
            _check_finite(loss, epoch, "teacher")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        net.eval()
        acc, _ = _accuracy(net, data.val)
        records.append(MetricsRecord(epoch, "val", total / count, acc, wall_time_seconds=time.perf_counter() - start))
    test_acc, test_ce = _accuracy(net, data.test)
    records.append(MetricsRecord(cfg.teacher_epochs - 1, "test", test_ce, test_acc,
                                 wall_time_seconds=time.perf_counter() - start))
    ckpt = Checkpoint(cfg.to_dict(), pack("teacher", net), kind="teacher", epoch=cfg.teacher_epochs - 1,
                      rng_state=bytes(gen.get_state().numpy().tobytes()),
                      metadata={"test_top1": test_acc, "val_top1": records[-2].top1_accuracy,
                                "input_shape": list(data.input_shape), "n_classes": data.n_classes})
    return ckpt, records


def load_teacher(ckpt: Checkpoint, data: Dataset) -> StagedNet:
    if ckpt.kind != "teacher":
        raise ShapeError(f"expected a teacher checkpoint, got kind={ckpt.kind!r}")
    tcfg = config_from_dict(ckpt.config)
    if tuple(ckpt.metadata.get("input_shape", data.input_shape)) != data.input_shape or \
            ckpt.metadata.get("n_classes", data.n_classes) != data.n_classes:
        raise ShapeError("teacher checkpoint does not match the dataset's input shape or class count")
    net = build_net(tcfg.teacher_arch, data.input_shape, data.n_classes)
    net.load_state_dict(ckpt.subset("teacher"))
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _teacher_shapes(teacher: StagedNet | None, input_shape) -> list[list[int]] | None:
    if teacher is None:
        return None
    with torch.no_grad():
        return [list(f.shape[1:]) for f in teacher.features(torch.zeros((2,) + tuple(input_shape)))]


def evaluate_system(system: StudentSystem, split: Split, K_values, epoch: int, name: str,
                    train_loss: float = float("nan"), wall: float = 0.0) -> MetricsRecord:
    system.eval()
    per_k, per_k_loss = {}, {}
    if system.logit_flow is not None:
        for K in K_values:
            per_k[K], per_k_loss[K] = _accuracy(lambda x, K=K: system.flow_logits(x, K), split)
    if system.deploys_flow:
        kmax = max(K_values)
        top1, loss = per_k[kmax], per_k_loss[kmax]
    else:
        top1, loss = _accuracy(lambda x: system.predict(x, 1), split)
    deployed = max(K_values) if system.deploys_flow else None
    return MetricsRecord(epoch, name, loss, top1, per_k, per_k_loss, wall, deployed)


def distill(cfg: ExperimentConfig, teacher_ckpt: Checkpoint | None = None,
            data: Dataset | None = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Train a student under ``cfg.method``; returns the best checkpoint and all records."""
    data = data or make_dataset(cfg.dataset)
    torch.manual_seed(cfg.seed)
    teacher = None
    if cfg.method.uses_teacher:
        if teacher_ckpt is None:
            teacher_ckpt, _ = train_teacher(cfg, data)
        teacher = load_teacher(teacher_ckpt, data)
    shapes = _teacher_shapes(teacher, data.input_shape) if cfg.feature_based else None
    system = StudentSystem(cfg, data.input_shape, data.n_classes, shapes)
    gen = torch.Generator().manual_seed(cfg.seed + _LOADER_SEED)
    pd_gen = torch.Generator().manual_seed(cfg.seed + _PD_SEED)
    opt = _sgd(system.parameters(), cfg, cfg.learning_rate)
    iters = math.ceil(len(data.train) / cfg.batch_size)
    warmup = cfg.effective_warmup
    records: list[MetricsRecord] = []
    best_score, best_state, best_epoch = -1.0, None, 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        system.train()
        total, count, correct, seen = 0.0, 0, 0, 0
        for it, idx in enumerate(_batches(len(data.train), cfg.batch_size, gen)):
            for g in opt.param_groups:
                g["lr"] = _lr_at(cfg, cfg.learning_rate, epoch, it, iters, warmup)
            x, y = data.train.x[idx], data.train.y[idx]
            try:
                loss, logits = system.loss(x, y, teacher, pd_gen)
            except NumericalFailure as exc:
                raise DivergenceError(f"{cfg.method.value}: {exc} at epoch {epoch}", epoch=epoch) from exc
            _check_finite(loss, epoch, cfg.method.value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
            if logits is not None:
                correct += int((logits.detach().argmax(-1) == y).sum())
                seen += len(idx)
        elapsed = time.perf_counter() - start
        records.append(MetricsRecord(epoch, "train", total / count, correct / seen if seen else float("nan"),
                                     wall_time_seconds=elapsed))
        rec = evaluate_system(system, data.val, cfg.K_eval, epoch, "val", wall=time.perf_counter() - start)
        records.append(rec)
        if rec.top1_accuracy > best_score:
            best_score, best_epoch = rec.top1_accuracy, epoch
            best_state = {k: v.detach().clone() for k, v in system.state_dict().items()}
        log.info("epoch %d loss %.4f val %.4f", epoch, total / count, rec.top1_accuracy)
    system.load_state_dict(best_state)
    records.append(evaluate_system(system, data.test, cfg.K_eval, best_epoch, "test",
                                   wall=time.perf_counter() - start))
    ckpt = Checkpoint(cfg.to_dict(), pack("system", system), kind="student", epoch=best_epoch,
                      rng_state=bytes(gen.get_state().numpy().tobytes()),
                      metadata={"teacher_feature_shapes": shapes, "val_top1": best_score,
                                "input_shape": list(data.input_shape), "n_classes": data.n_classes})
    return ckpt, records


def restore_system(ckpt: Checkpoint) -> StudentSystem:
    cfg = config_from_dict(ckpt.config)
    system = StudentSystem(cfg, tuple(ckpt.metadata["input_shape"]), ckpt.metadata["n_classes"],
                           ckpt.metadata.get("teacher_feature_shapes"))
    system.load_state_dict(ckpt.subset("system"))
    system.eval()
    return system


def evaluate(ckpt: Checkpoint, split: str = "test", K: int | None = None,
             data: Dataset | None = None) -> MetricsRecord:
    """Frozen-weight evaluation of a student checkpoint at ``K`` sampling steps.

    Methods whose deployed prediction does not run the flow (baselines and
    the theta variant) ignore ``K`` and never call the meta-encoder.
    """
    system = restore_system(ckpt)
    cfg = system.cfg
    data = data or make_dataset(cfg.dataset)
    part = data.split(split)
    K = K or max(cfg.K_eval)
    if system.deploys_flow:
        top1, loss = _accuracy(lambda x: system.flow_logits(x, K), part)
        return MetricsRecord(ckpt.epoch, split, loss, top1, {K: top1}, {K: loss}, deployed_k=K)
    top1, loss = _accuracy(lambda x: system.predict(x, K), part)
    return MetricsRecord(ckpt.epoch, split, loss, top1)
