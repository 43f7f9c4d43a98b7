"""Contrastive branch: online/target networks, quality-pair loss and EMA target update."""

from __future__ import annotations

import copy
from typing import Iterable, Sequence

import torch
import torch.nn as nn

from .backbone import MLP, ResidualEncoder


class OnlineNetwork(nn.Module):
    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512), hidden: int = 256, proj_dim: int = 128):
        super().__init__()
        self.encoder = ResidualEncoder(widths)
        self.projector = MLP(self.encoder.out_dim, hidden, proj_dim)
        self.predictor = MLP(proj_dim, hidden, proj_dim)

    def forward(self, x):
        """Returns (encoder features, prediction)."""
        h = self.encoder(x)
        return h, self.predictor(self.projector(h))


class TargetNetwork(nn.Module):
    """Encoder + projector updated only by moving average of the online weights."""

    def __init__(self, online: OnlineNetwork):
        super().__init__()
        self.encoder = copy.deepcopy(online.encoder)
        self.projector = copy.deepcopy(online.projector)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.projector(self.encoder(x))

    def online_counterparts(self, online: OnlineNetwork) -> nn.ModuleList:
        return nn.ModuleList([online.encoder, online.projector])


def contrastive_term(q_pred: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """2 - 2 cos(q, z), averaged over the batch when inputs are 2-D.

    ``z_target`` is detached: no gradient reaches the target network.
    """
    if q_pred.shape != z_target.shape:
        raise ValueError(f"dimension mismatch: {tuple(q_pred.shape)} vs {tuple(z_target.shape)}")
    z_target = z_target.detach()
    qn = q_pred.norm(dim=-1)
    zn = z_target.norm(dim=-1)
    if bool((qn == 0).any()) or bool((zn == 0).any()):
        raise ValueError("zero-norm vector in contrastive term")
    cos = (q_pred * z_target).sum(dim=-1) / (qn * zn)
    return (2.0 - 2.0 * cos).mean()


def symmetrized_loss(enhanced: torch.Tensor, original: torch.Tensor, online: OnlineNetwork,
                     target: TargetNetwork, return_features: bool = False):
    """Quality-pair loss: SR output through the online net against the original
    through the target net, plus the swapped term.

    With ``return_features`` also returns the online encoder features of both
    members so callers can reuse them.
    """
    if enhanced.shape != original.shape:
        raise ValueError("pair members differ in shape")
    n = enhanced.shape[0]
    h, q = online(torch.cat([enhanced, original], dim=0))
    with torch.no_grad():
        z = target(torch.cat([original, enhanced], dim=0))
    loss = contrastive_term(q[:n], z[:n]) + contrastive_term(q[n:], z[n:])
    if return_features:
        return loss, h[:n], h[n:]
    return loss


def _pairs(target, online) -> Iterable[tuple[torch.Tensor, torch.Tensor]]:
    if isinstance(target, TargetNetwork) and isinstance(online, OnlineNetwork):
        online = target.online_counterparts(online)
    t = list(target.parameters()) if isinstance(target, nn.Module) else list(target)
    o = list(online.parameters()) if isinstance(online, nn.Module) else list(online)
    if len(t) != len(o):
        raise ValueError(f"parameter count mismatch: {len(t)} vs {len(o)}")
    for a, b in zip(t, o):
        if a.shape != b.shape:
            raise ValueError(f"parameter shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return list(zip(t, o))


@torch.no_grad()
def ema_update(target, online, tau: float) -> None:
    """In place: xi <- tau * xi + (1 - tau) * theta, for every parameter.

    Accepts modules or parameter sequences. Batch-norm buffers of a target
    network are copied from the online counterpart.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    for xi, theta in _pairs(target, online):
        xi.mul_(tau).add_(theta.detach(), alpha=1.0 - tau)
    if isinstance(target, TargetNetwork) and isinstance(online, OnlineNetwork):
        src = target.online_counterparts(online)
        for tb, ob in zip(nn.ModuleList([target.encoder, target.projector]).buffers(), src.buffers()):
            tb.copy_(ob)
