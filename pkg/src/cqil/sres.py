"""Restoration network for the image-quality-variable module."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .degrade import DegradeParams, degrade_batch

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class SRNetwork(nn.Module):
    """Three-stage conv restoration (9x9/64, 1x1/32, 5x5/3) with a global skip.

    The reconstruction layer starts at zero, so an untrained net is the identity.
    """

    def __init__(self, channels: int = 3, features: int = 64, mapping: int = 32, image_size: int | None = None):
        super().__init__()
        self.image_size = image_size
        self.extract = nn.Conv2d(channels, features, 9, padding=4, padding_mode="replicate")
        self.mapping = nn.Conv2d(features, mapping, 1)
        self.reconstruct = nn.Conv2d(mapping, channels, 5, padding=2, padding_mode="replicate")
        self.act = nn.ReLU(inplace=True)
        nn.init.zeros_(self.reconstruct.weight)
        nn.init.zeros_(self.reconstruct.bias)

    def forward(self, x):
        r = self.act(self.extract(x))
        r = self.act(self.mapping(r))
        return x + self.reconstruct(r)


def _check_shape(net: SRNetwork, image: torch.Tensor):
    if image.dim() != 4 or image.shape[1] != net.extract.in_channels:
        raise ValueError(f"expected (N, {net.extract.in_channels}, H, W) input, got {tuple(image.shape)}")
    if net.image_size is not None and tuple(image.shape[-2:]) != (net.image_size, net.image_size):
        raise ValueError(f"SR network configured for {net.image_size}x{net.image_size}, got {tuple(image.shape[-2:])}")


def sr_forward(net: SRNetwork, image: torch.Tensor) -> torch.Tensor:
    """Restore a batch; output has the input's shape and is clipped to [0, 1]."""
    squeeze = image.dim() == 3
    if squeeze:
        image = image[None]
    _check_shape(net, image)
    out = net(image).clamp(0.0, 1.0)
    return out[0] if squeeze else out


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error, (1/n) * sum (pred - target)^2."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def train_sr(net: SRNetwork, clean: torch.Tensor, degrade_params: DegradeParams, epochs: int,
             lr: float = 1e-3, batch_size: int = 16, seed: int = 0, holdout: float = 0.1,
             history: list | None = None) -> SRNetwork:
    """Fit the restoration net on (degraded, clean) pairs made from ``clean``.

    ``clean`` is an (N, 3, H, W) tensor of high-quality images. A ``holdout``
    fraction is kept aside for the held-out MSE that gets logged each epoch
    (appended to ``history`` as dicts when given).
    """
    if clean.shape[0] == 0:
        raise ValueError("empty high-quality set")
    if epochs <= 0:
        return net
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    n = clean.shape[0]
    n_hold = int(math.floor(holdout * n)) if n > 1 else 0
    perm = torch.randperm(n, generator=gen)
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    noisy = degrade_batch(clean, degrade_params, generator=gen)
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    def held_out():
        if n_hold == 0:
            return float("nan")
        with torch.no_grad():
            return mse_loss(sr_forward(net, noisy[hold_idx]), clean[hold_idx]).item()

    for epoch in range(epochs):
        net.train()
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = mse_loss(net(noisy[idx]), clean[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite SR loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        net.eval()
        rec = {"epoch": epoch, "train_mse": total / max(count, 1), "heldout_mse": held_out()}
        log.info("sr epoch %d train_mse %.6f heldout_mse %.6f", epoch, rec["train_mse"], rec["heldout_mse"])
        if history is not None:
            history.append(rec)
    return net


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
