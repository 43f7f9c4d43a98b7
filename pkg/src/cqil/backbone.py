"""Compact residual encoder shared by the contrastive branch and CQI."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn

ConvFactory = Callable[..., nn.Module]


def plain_conv(in_ch, out_ch, kernel_size, stride=1, padding=0):
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, conv: ConvFactory):
        super().__init__()
        self.conv1 = conv(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = conv(out_ch, out_ch, 3, stride=1, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            # 1x1 projections stay plain convolutions
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Stem + one basic block per stage + global average pool.

    ``widths`` defaults to 64-128-256-512, giving a 512-d feature vector.
    """

    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512), conv: ConvFactory = plain_conv,
                 in_channels: int = 3):
        super().__init__()
        widths = tuple(widths)
        self.stem = nn.Sequential(conv(in_channels, widths[0], 3, stride=1, padding=1),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU(inplace=True))
        blocks, prev = [], widths[0]
        for i, w in enumerate(widths):
            blocks.append(BasicBlock(prev, w, 1 if i == 0 else 2, conv))
            prev = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = widths[-1]

    def forward(self, x):
        return torch.flatten(self.pool(self.blocks(self.stem(x))), 1)


class MLP(nn.Module):
    """Linear - BatchNorm - ReLU - Linear."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, batchnorm: bool = True):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden),
                                 nn.BatchNorm1d(hidden) if batchnorm else nn.Identity(),
                                 nn.ReLU(inplace=True),
                                 nn.Linear(hidden, out_dim))
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)
