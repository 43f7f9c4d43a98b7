"""Separate quality network: CDC backbone, gradient reversal and quality discriminator."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import MLP, ResidualEncoder


def cdc_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, theta=0.7,
             stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Central difference convolution.

    y(p0) = sum_n w(pn) x(p0 + pn) - theta * x(p0) * sum_n w(pn) + b

    The second term is a 1x1 convolution with the spatially summed kernel,
    evaluated at the centre tap of every output window.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) input, got {tuple(x.shape)}")
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("kernel must be square with an odd side")
    if x.shape[-1] + 2 * padding < kw or x.shape[-2] + 2 * padding < kh:
        raise ValueError("input smaller than kernel")
    out = F.conv2d(x, weight, None, stride=stride, padding=padding)
    if not (isinstance(theta, (int, float)) and theta == 0):
        # align the centre tap: shift by (padding - k // 2) on every side
        centre = F.pad(x, [padding - kh // 2] * 4)
        diff = F.conv2d(centre, weight.sum(dim=(2, 3), keepdim=True), None, stride=stride)
        out = out - theta * diff
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class CDCConv2d(nn.Conv2d):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False, theta=0.7):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=padding, bias=bias)
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        self.theta = theta

    def forward(self, x):
        return cdc_conv(x, self.weight, self.bias, self.theta, self.stride[0], self.padding[0])

    def extra_repr(self):
        return super().extra_repr() + f", theta={self.theta}"


def cdc_factory(theta: float = 0.7):
    def make(in_ch, out_ch, kernel_size, stride=1, padding=0):
        if kernel_size == 1:
            return nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        return CDCConv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding, theta=theta)
    return make


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_grl, None


def grl(features: torch.Tensor, lambda_grl: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; scales the backward gradient by -lambda_grl."""
    return _GradReverse.apply(features, float(lambda_grl))


def adversarial_loss(disc_logits: torch.Tensor, quality_labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the discriminator against the quality labels."""
    if disc_logits.dim() != 2:
        raise ValueError("discriminator logits must be (batch, N)")
    n = disc_logits.shape[1]
    if quality_labels.numel() and (quality_labels.min() < 0 or quality_labels.max() >= n):
        raise ValueError(f"quality labels must lie in [0, {n - 1}]")
    return F.cross_entropy(disc_logits, quality_labels)


class QualityDiscriminator(MLP):
    def __init__(self, in_dim: int, hidden: int = 256, n_quality: int = 2):
        super().__init__(in_dim, hidden, n_quality, batchnorm=False)


class CQINetwork(nn.Module):
    """CDC residual backbone with an auxiliary live/attack head."""

    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512), theta: float = 0.7):
        super().__init__()
        self.backbone = ResidualEncoder(widths, conv=cdc_factory(theta))
        self.aux_head = nn.Linear(self.backbone.out_dim, 2)
        self.out_dim = self.backbone.out_dim

    def forward(self, x):
        feats = self.backbone(x)
        return feats, self.aux_head(feats)


def cqi_forward(x: torch.Tensor, cqi: CQINetwork) -> tuple[torch.Tensor, torch.Tensor]:
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
    return cqi(x)
