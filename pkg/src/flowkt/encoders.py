"""Velocity estimators (meta-encoders), time embedding and shape transforms.

Every encoder maps ``(z, t) -> velocity`` with ``velocity.shape == z.shape``.
The scalar time is embedded by a learned affine map and *added* to the state
before the network body. Batch-statistics normalisation is deliberately not
representable: the same weights see states from every time step, and batch
statistics mix those distributions.
"""

from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import ConfigurationError, ShapeError


class Arch(str, enum.Enum):
    MLP = "mlp"
    CNN = "cnn"
    ATTENTION = "attention"


class NormKind(str, enum.Enum):
    GROUP_NORM = "group_norm"
    LAYER_NORM = "layer_norm"
    NONE = "none"


class TransformMode(str, enum.Enum):
    IDENTITY = "identity"
    CONV_PROJECTION = "conv_projection"
    POOL_LINEAR = "pool_linear"


_DEFAULT_NORM = {Arch.MLP: NormKind.NONE, Arch.CNN: NormKind.GROUP_NORM, Arch.ATTENTION: NormKind.LAYER_NORM}
_BATCH_NORMS = {"batch_norm", "batchnorm", "bn", "sync_batch_norm"}


def _coerce_norm(norm) -> NormKind:
    if isinstance(norm, str) and norm.lower() in _BATCH_NORMS:
        raise ConfigurationError(
            "batch-statistics normalisation is not allowed in a meta-encoder; "
            "use group_norm, layer_norm or none"
        )
    try:
        return NormKind(norm)
    except ValueError as exc:
        raise ConfigurationError(f"unknown norm {norm!r}") from exc


@dataclass(frozen=True)
class EncoderSpec:
    arch: Arch = Arch.MLP
    depth: int = 2
    width: int = 64
    heads: int = 4
    norm: NormKind | None = None

    def __post_init__(self) -> None:
        try:
            arch = Arch(self.arch)
        except ValueError as exc:
            raise ConfigurationError(f"unknown encoder arch {self.arch!r}") from exc
        object.__setattr__(self, "arch", arch)
        norm = _DEFAULT_NORM[arch] if self.norm is None else _coerce_norm(self.norm)
        object.__setattr__(self, "norm", norm)
        if self.depth < 1 or self.width < 1 or self.heads < 1:
            raise ConfigurationError("depth, width and heads must be positive")
        if arch is Arch.ATTENTION:
            if self.width % self.heads:
                raise ConfigurationError("attention width must be divisible by heads")
            if norm is NormKind.GROUP_NORM:
                raise ConfigurationError("attention encoder supports layer_norm or none")


@dataclass(frozen=True)
class ShapeTransformSpec:
    mode: TransformMode = TransformMode.IDENTITY
    output_dim: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TransformMode(self.mode))
        if self.mode is not TransformMode.IDENTITY and (self.output_dim is None or self.output_dim < 1):
            raise ConfigurationError(f"{self.mode.value} needs a positive output_dim")


@contextlib.contextmanager
def seeded(seed: int | None):
    """Run parameter construction under a fixed torch seed without leaking RNG state."""
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def group_count(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def _norm_layer(kind: NormKind, channels: int) -> nn.Module:
    if kind is NormKind.GROUP_NORM:
        return nn.GroupNorm(group_count(channels), channels)
    if kind is NormKind.LAYER_NORM:
        # channel-wise layer norm for tensors laid out as (N, C, *)
        return nn.GroupNorm(1, channels)
    return nn.Identity()


class TimeEmbedding(nn.Module):
    """Learned affine embedding of a per-sample scalar time into ``channels``.

    The bias starts at zero so ``t = 0`` embeds to the zero vector at init.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.linear = nn.Linear(1, channels)
        nn.init.zeros_(self.linear.bias)

    def forward(self, t: torch.Tensor, ndim: int) -> torch.Tensor:
        e = self.linear(t.reshape(-1, 1).to(self.linear.weight.dtype))
        return e.reshape(e.shape + (1,) * (ndim - 2))


def time_embed(t, dim: int, embedding: TimeEmbedding | None = None, ndim: int = 2) -> torch.Tensor:
    """Functional wrapper: embed per-sample times with ``embedding`` (fresh if ``None``)."""
    embedding = embedding if embedding is not None else TimeEmbedding(dim)
    t = torch.as_tensor(t, dtype=embedding.linear.weight.dtype)
    return embedding(t.reshape(-1), ndim)


class _MLPBody(nn.Module):
    def __init__(self, features: int, spec: EncoderSpec):
        super().__init__()
        blocks = []
        for _ in range(spec.depth):
            blocks += [nn.Linear(features, spec.width), _norm_layer(spec.norm, spec.width),
                       nn.ReLU(), nn.Linear(spec.width, features)]
        self.net = nn.Sequential(*blocks)

    def forward(self, x):
        shape = x.shape
        return self.net(x.reshape(shape[0], -1)).reshape(shape)


class _CNNBody(nn.Module):
    def __init__(self, channels: int, spec: EncoderSpec):
        super().__init__()
        blocks = []
        for _ in range(spec.depth):
            blocks += [
                nn.SiLU(),
                nn.Conv2d(channels, spec.width, 3, padding=1),
                _norm_layer(spec.norm, spec.width),
                nn.SiLU(),
                nn.Conv2d(spec.width, channels, 1),
            ]
        self.net = nn.Sequential(*blocks)

    def forward(self, x):
        return self.net(x)


class _AttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, norm: NormKind):
        super().__init__()
        ln = (lambda: nn.LayerNorm(width)) if norm is NormKind.LAYER_NORM else nn.Identity
        self.norm1, self.norm2 = ln(), ln()
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.ReLU(), nn.Linear(width, width))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _AttentionBody(nn.Module):
    """Full self-attention over the spatial tokens of one sample."""

    def __init__(self, channels: int, tokens: int, spec: EncoderSpec):
        super().__init__()
        self.proj_in = nn.Linear(channels, spec.width)
        self.pos = nn.Parameter(torch.zeros(1, tokens, spec.width))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(_AttentionBlock(spec.width, spec.heads, spec.norm) for _ in range(spec.depth))
        self.proj_out = nn.Linear(spec.width, channels)

    def forward(self, x):
        b, c, h, w = x.shape
        tok = self.proj_in(x.flatten(2).transpose(1, 2)) + self.pos
        for block in self.blocks:
            tok = block(tok)
        return self.proj_out(tok).transpose(1, 2).reshape(b, c, h, w)


class MetaEncoder(nn.Module):
    """``g(z, t) = body(z + embed(t))``; counts forward passes in ``forward_calls``."""

    instances = 0

    def __init__(self, spec: EncoderSpec, input_shape: Sequence[int]):
        super().__init__()
        MetaEncoder.instances += 1
        self.spec = spec
        self.input_shape = tuple(int(s) for s in input_shape)
        channels = self.input_shape[0]
        if spec.arch is Arch.MLP:
            self.body = _MLPBody(math.prod(self.input_shape), spec)
        elif len(self.input_shape) != 3:
            raise ShapeError(f"{spec.arch.value} encoder needs a (C, H, W) input, got {self.input_shape}")
        elif spec.arch is Arch.CNN:
            self.body = _CNNBody(channels, spec)
        else:
            self.body = _AttentionBody(channels, self.input_shape[1] * self.input_shape[2], spec)
        self.time_embed = TimeEmbedding(channels)
        self.forward_calls = 0

    def forward(self, z: torch.Tensor, t) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.input_shape:
            raise ShapeError(f"encoder built for {self.input_shape}, got {tuple(z.shape[1:])}")
        self.forward_calls += 1
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        return self.body(z + self.time_embed(t, z.ndim))


def build_encoder(spec: EncoderSpec, input_shape: Sequence[int], seed: int | None = None) -> MetaEncoder:
    with seeded(seed):
        return MetaEncoder(spec, input_shape)


class ShapeTransform(nn.Module):
    """The map ``T`` from flow states to the comparison space."""

    def __init__(self, spec: ShapeTransformSpec, input_shape: Sequence[int]):
        super().__init__()
        self.spec = spec
        self.input_shape = tuple(int(s) for s in input_shape)
        channels = self.input_shape[0]
        spatial = len(self.input_shape) > 1
        if spec.mode is TransformMode.IDENTITY:
            self.op = nn.Identity()
        elif spec.mode is TransformMode.CONV_PROJECTION:
            self.op = nn.Conv2d(channels, spec.output_dim, 1) if spatial else nn.Linear(channels, spec.output_dim)
        else:
            self.op = nn.Linear(channels, spec.output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"transform built for {self.input_shape}, got {tuple(x.shape[1:])}")
        if self.spec.mode is TransformMode.POOL_LINEAR and x.ndim > 2:
            x = x.flatten(2).mean(-1)
        return self.op(x)


def build_transform(spec: ShapeTransformSpec, input_shape: Sequence[int], seed: int | None = None) -> ShapeTransform:
    with seeded(seed):
        return ShapeTransform(spec, input_shape)


def apply_transform(transform: ShapeTransform | None, x: torch.Tensor) -> torch.Tensor:
    return x if transform is None else transform(x)


def has_batch_statistics(module: nn.Module) -> bool:
    """True if any submodule normalises with batch statistics."""
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules())
