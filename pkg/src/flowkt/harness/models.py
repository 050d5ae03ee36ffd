"""Small three-stage teacher/student networks.

Each network is ``stem -> stage1 -> stage2 -> stage3 -> pool -> head``.
For CNNs every stage after the first opens with a stride-2 downsampling
convolution; stage outputs are the features a flow module attaches to, i.e.
they sit right before the next downsampling layer. The last stage output is
the pre-pooling feature used by logit-based transfer.
"""

from __future__ import annotations

import torch
from torch import nn

from ..encoders import group_count, seeded
from .config import NetSpec


class _ResidualLinear(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc = nn.Linear(width, width)

    def forward(self, x):
        return x + torch.relu(self.fc(x))


class _ResidualConv(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(group_count(channels), channels)

    def forward(self, x):
        return x + torch.relu(self.norm(self.conv(x)))


class StagedNet(nn.Module):
    def __init__(self, spec: NetSpec, input_shape: tuple[int, ...], n_classes: int):
        super().__init__()
        self.spec = spec
        w = spec.width
        if spec.kind == "mlp":
            features = 1
            for s in input_shape:
                features *= s
            self.stem = nn.Sequential(nn.Flatten(), nn.Linear(features, w), nn.ReLU())
            self.stages = nn.ModuleList(
                nn.Sequential(*[_ResidualLinear(w) for _ in range(n)]) for n in spec.blocks
            )
            self.widths = [w, w, w]
        else:
            widths = [w, 2 * w, 4 * w]
            self.stem = nn.Sequential(nn.Conv2d(input_shape[0], w, 3, padding=1), nn.ReLU())
            stages = []
            prev = w
            for i, (n, c) in enumerate(zip(spec.blocks, widths)):
                layers: list[nn.Module] = []
                if i > 0:
                    layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), nn.ReLU()]
                layers += [_ResidualConv(c) for _ in range(n)]
                stages.append(nn.Sequential(*layers))
                prev = c
            self.stages = nn.ModuleList(stages)
            self.widths = widths
        self.head = nn.Linear(self.widths[-1], n_classes)

    @staticmethod
    def pool(x: torch.Tensor) -> torch.Tensor:
        return x.flatten(2).mean(-1) if x.ndim > 2 else x

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = self.stem(x)
        out = []
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.pool(self.features(x)[-1]))


def build_net(spec: NetSpec, input_shape, n_classes: int, seed: int | None = None) -> StagedNet:
    with seeded(seed):
        return StagedNet(spec, tuple(input_shape), n_classes)
