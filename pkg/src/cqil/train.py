"""CQIL training loop, prediction and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import pickle
import warnings
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .contrast import OnlineNetwork, TargetNetwork, ema_update, symmetrized_loss
from .corpus import ProtocolSplits, SampleRecord, load_image
from .degrade import DegradeParams, QualityPair, degrade_batch, interpolation_pair
from .backbone import MLP
from .metrics import ScoredSet, apcer_bpcer_acer, auc, select_threshold
from .sqn import CQINetwork, QualityDiscriminator, adversarial_loss, grl
from .sres import SRNetwork, mse_loss, sr_forward

log = logging.getLogger(__name__)

VARIANTS = ("resnet_baseline", "model1", "model2", "model3", "model4")
PAPER_LAMBDAS = (2.0, 1.5, 0.5, 1.5, 0.5)
LOSS_NAMES = ("cls", "contra", "adv", "cdc", "mse")
MODE_SCHEDULES = {"intra": (10, 1), "inter": (300, 50)}
CHECKPOINT_FORMAT = "cqil-checkpoint"
CHECKPOINT_VERSION = 1

# noise-free mild blur: the SR output stays close to the clean image, so the
# discriminator has to work from blur level alone
DEFAULT_IQV_TIERS = (
    DegradeParams(scale_factor=1, gauss_kernel=3, gauss_sigma=0.5, noise_std=0.0),
    DegradeParams(scale_factor=1, gauss_kernel=3, gauss_sigma=0.65, noise_std=0.0),
)


class NonFiniteLossError(FloatingPointError):
    pass


class CorruptCheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambdas: tuple = PAPER_LAMBDAS
    lr: float = 2e-4
    batch_size: int = 6
    epochs: int = 10
    lr_decay: float = 0.2
    lr_decay_every: int = 1
    tau: float = 0.99
    seed: int = 0
    mode: str = "intra"
    model_variant: str = "model4"
    image_size: int = 64
    widths: tuple = (64, 128, 256, 512)
    proj_hidden: int = 256
    proj_dim: int = 128
    cls_hidden: int = 256
    theta: float = 0.7
    lambda_grl: float = 1.0
    grl_warmup: bool = False
    cqi_input: str = "enhanced"
    sr_mode: str = "frozen"
    iqv_tiers: tuple = DEFAULT_IQV_TIERS

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.widths = tuple(int(x) for x in self.widths)
        self.iqv_tiers = tuple(t if isinstance(t, DegradeParams) else DegradeParams(**t) for t in self.iqv_tiers)
        self.validate()

    def validate(self):
        if len(self.lambdas) != 5 or any(x < 0 for x in self.lambdas):
            raise ValueError("lambdas must be five non-negative weights")
        if self.lr < 0 or self.batch_size < 2 or self.epochs < 0:
            raise ValueError("lr >= 0, batch_size >= 2 and epochs >= 0 required")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("lr_decay in (0, 1] and lr_decay_every >= 1 required")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.mode not in MODE_SCHEDULES:
            raise ValueError(f"mode must be one of {sorted(MODE_SCHEDULES)}")
        if self.model_variant not in VARIANTS:
            raise ValueError(f"model_variant must be one of {VARIANTS}")
        if self.cqi_input not in ("enhanced", "original"):
            raise ValueError("cqi_input must be 'enhanced' or 'original'")
        if self.sr_mode not in ("frozen", "joint"):
            raise ValueError("sr_mode must be 'frozen' or 'joint'")
        if not 0 <= self.theta <= 1 or self.lambda_grl < 0:
            raise ValueError("theta in [0, 1] and lambda_grl >= 0 required")
        if not self.iqv_tiers:
            raise ValueError("iqv_tiers must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "mode" in d:
            epochs, every = MODE_SCHEDULES[d["mode"]]
            d.setdefault("epochs", epochs)
            d.setdefault("lr_decay_every", every)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["widths"] = list(self.widths)
        d["iqv_tiers"] = [t.to_dict() for t in self.iqv_tiers]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    @property
    def uses_contrast(self) -> bool:
        return self.model_variant != "resnet_baseline"

    @property
    def uses_sqn(self) -> bool:
        return self.model_variant in ("model2", "model3", "model4")

    @property
    def uses_iqv(self) -> bool:
        return self.model_variant in ("model3", "model4")

    @property
    def cqi_view(self) -> str:
        """Which pair member feeds CQI's liveness path."""
        if self.model_variant == "model3":
            return "original"
        return self.cqi_input


def total_loss(components: Sequence, lambdas: Sequence[float]):
    """Weighted sum of (cls, contra, adv, cdc, mse) with weights lambda_1..lambda_5."""
    if len(components) != 5 or len(lambdas) != 5:
        raise ValueError("need five loss components and five weights")
    values = [float(c.detach()) if torch.is_tensor(c) else float(c) for c in components]
    bad = [n for n, v in zip(LOSS_NAMES, values) if not math.isfinite(v)]
    if bad:
        detail = ", ".join(f"{n}={v}" for n, v in zip(LOSS_NAMES, values))
        raise NonFiniteLossError(f"non-finite loss component(s) {bad}: {detail}")
    total = 0.0
    for lam, c in zip(lambdas, components):
        total = total + lam * c
    return total


class CQILModel(nn.Module):
    """All trainable pieces of one ablation variant."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.online = OnlineNetwork(config.widths, config.proj_hidden, config.proj_dim)
        self.target = TargetNetwork(self.online) if config.uses_contrast else None
        self.sr = SRNetwork(image_size=config.image_size) if config.uses_iqv else None
        self.cqi = CQINetwork(config.widths, config.theta) if config.uses_sqn else None
        self.disc = QualityDiscriminator(self.cqi.out_dim, config.proj_hidden) if config.uses_sqn else None
        feat_dim = self.online.encoder.out_dim + (self.cqi.out_dim if self.cqi is not None else 0)
        self.classifier = MLP(feat_dim, config.cls_hidden, 2)

    def trainable_parameters(self):
        skip = set()
        if self.target is not None:
            skip |= {id(p) for p in self.target.parameters()}
        if self.sr is not None and self.config.sr_mode == "frozen":
            skip |= {id(p) for p in self.sr.parameters()}
        if not self.config.uses_contrast:
            skip |= {id(p) for p in self.online.projector.parameters()}
            skip |= {id(p) for p in self.online.predictor.parameters()}
        return [p for p in self.parameters() if id(p) not in skip]

    def train(self, mode: bool = True):
        super().train(mode)
        if self.sr is not None and self.config.sr_mode == "frozen":
            self.sr.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Classifier input at inference: [CQI(.) || online encoder(x)]."""
        h = self.online.encoder(x)
        if self.cqi is None:
            return h
        cqi_in = x
        if self.sr is not None and self.config.cqi_view == "enhanced":
            cqi_in = sr_forward(self.sr, x)
        c, _ = self.cqi(cqi_in)
        return torch.cat([c, h], dim=1)

    def forward(self, x):
        return self.classifier(self.features(x))


@dataclass
class ModelState:
    config: TrainConfig
    model: CQILModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0
    step: int = 0
    steps_per_epoch: int = 0
    best_epoch: int | None = None


def init_state(config: TrainConfig, sr_net: SRNetwork | None = None) -> ModelState:
    torch.manual_seed(config.seed)
    model = CQILModel(config)
    if sr_net is not None and model.sr is not None:
        model.sr.load_state_dict(sr_net.state_dict())
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    return ModelState(config, model, opt, gen)


def set_lr(state: ModelState, lr: float):
    for g in state.optimizer.param_groups:
        g["lr"] = lr


def grl_lambda(state: ModelState) -> float:
    cfg = state.config
    if not cfg.grl_warmup or state.steps_per_epoch <= 0:
        return cfg.lambda_grl
    p = min(1.0, state.step / state.steps_per_epoch)
    return cfg.lambda_grl * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)


def degrade_views(x: torch.Tensor, tiers: Sequence[DegradeParams], generator: torch.Generator) -> torch.Tensor:
    """Each row degraded with a tier drawn uniformly from ``tiers``."""
    choice = torch.randint(len(tiers), (x.shape[0],), generator=generator)
    out = x.clone()
    for t, params in enumerate(tiers):
        idx = (choice == t).nonzero(as_tuple=True)[0]
        if len(idx):
            out[idx] = degrade_batch(x[idx], params, generator).to(x.dtype)
    return out


def build_pair(x: torch.Tensor, state: ModelState) -> tuple[QualityPair, torch.Tensor, torch.Tensor]:
    """Quality pair, the sample view fed to the classifier, and the SR loss."""
    cfg, model = state.config, state.model
    zero = torch.zeros((), dtype=x.dtype)
    if cfg.uses_iqv:
        lq = degrade_views(x, cfg.iqv_tiers, state.generator)
        joint = cfg.sr_mode == "joint"
        with torch.set_grad_enabled(joint and torch.is_grad_enabled()):
            restored = model.sr(lq)
            l_mse = mse_loss(restored, x)
            enhanced = restored.clamp(0.0, 1.0)
        if not joint:
            l_mse = l_mse.detach()
        return QualityPair(enhanced, lq), lq, l_mse
    enhanced, original = interpolation_pair(x)
    return QualityPair(enhanced, original), x, zero


def train_step(x: torch.Tensor, y: torch.Tensor, state: ModelState) -> dict:
    """One optimiser step on a batch; returns the loss breakdown."""
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    cfg, model = state.config, state.model
    model.train()
    n = x.shape[0]
    zero = torch.zeros((), dtype=x.dtype)
    l_contra = l_adv = l_cdc = l_mse = zero
    view = x

    if cfg.uses_contrast:
        pair, view, l_mse = build_pair(x, state)
        l_contra, h_enh, h_orig = symmetrized_loss(pair.enhanced, pair.original, model.online, model.target,
                                                   return_features=True)
        h = h_orig if cfg.uses_iqv else model.online.encoder(x)
    else:
        h = model.online.encoder(x)

    feat = h
    acc = {}
    if cfg.uses_sqn:
        xs, qlab = pair.stacked()
        c_all, aux_all = model.cqi(xs)
        disc_logits = model.disc(grl(c_all, grl_lambda(state)))
        l_adv = adversarial_loss(disc_logits, qlab)
        if cfg.uses_iqv:
            sl = slice(0, n) if cfg.cqi_view == "enhanced" else slice(n, 2 * n)
            c, aux = c_all[sl], aux_all[sl]
        else:
            c, aux = model.cqi(view)
        l_cdc = F.cross_entropy(aux, y)
        feat = torch.cat([c, h], dim=1)
        with torch.no_grad():
            acc = {"disc_acc": (disc_logits.argmax(1) == qlab).double().mean().item(),
                   "aux_acc": (aux.argmax(1) == y).double().mean().item()}

    l_cls = F.cross_entropy(model.classifier(feat), y)
    components = (l_cls, l_contra, l_adv, l_cdc, l_mse)
    loss = total_loss(components, cfg.lambdas)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    if model.target is not None:
        ema_update(model.target, model.online, cfg.tau)
    state.step += 1
    out = {name: float(c.detach()) for name, c in zip(LOSS_NAMES, components)}
    out["total"] = float(loss.detach())
    out.update(acc)
    return out


@torch.no_grad()
def predict(images: torch.Tensor, state: ModelState, batch_size: int = 256) -> np.ndarray:
    """Liveness probability in [0, 1] for each image of an (N, 3, H, W) batch."""
    model = state.model
    if images.dim() == 3:
        images = images[None]
    size = state.config.image_size
    if images.dim() != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (size, size):
        raise ValueError(f"expected (N, 3, {size}, {size}) images, got {tuple(images.shape)}")
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = model(images[start:start + batch_size])
        out.append(torch.softmax(logits.double(), dim=1)[:, 1])
    model.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros(0)


@torch.no_grad()
def quality_probe(images: torch.Tensor, labels: torch.Tensor, state: ModelState, seed: int = 12345) -> dict:
    """Discriminator accuracy on quality labels and CQI auxiliary liveness accuracy.

    Pairs are built exactly as in training but from a private generator, with
    every network in eval mode.
    """
    cfg, model = state.config, state.model
    if not cfg.uses_sqn:
        raise ValueError(f"variant {cfg.model_variant} has no quality discriminator")
    model.eval()
    saved = state.generator
    state.generator = torch.Generator().manual_seed(seed)
    try:
        pair, view, _ = build_pair(images, state)
    finally:
        state.generator = saved
    n = images.shape[0]
    xs, qlab = pair.stacked()
    c_all, aux_all = model.cqi(xs)
    disc_acc = (model.disc(c_all).argmax(1) == qlab).double().mean().item()
    if cfg.uses_iqv:
        aux = aux_all[:n] if cfg.cqi_view == "enhanced" else aux_all[n:]
    else:
        aux = model.cqi(view)[1]
    aux_acc = (aux.argmax(1) == labels).double().mean().item()
    return {"disc_acc": disc_acc, "aux_acc": aux_acc}


# ------------------------------------------------------------------ data

def load_tensors(records: Sequence[SampleRecord], root) -> tuple[torch.Tensor, torch.Tensor]:
    root = Path(root)
    if not records:
        raise ValueError("no records to load")
    imgs = np.stack([load_image(root / r.image_path) for r in records])
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor([r.label for r in records], dtype=torch.long)
    return x, y


def evaluate_split(x: torch.Tensor, y: torch.Tensor, state: ModelState) -> ScoredSet:
    return ScoredSet(predict(x, state), y.numpy())


def run_epoch(x: torch.Tensor, y: torch.Tensor, state: ModelState) -> dict:
    cfg = state.config
    set_lr(state, cfg.lr_at(state.epoch))
    perm = torch.randperm(x.shape[0], generator=state.generator)
    bs = cfg.batch_size
    state.steps_per_epoch = max(1, x.shape[0] // bs)
    sums: dict[str, float] = {}
    steps = 0
    for start in range(0, len(perm), bs):
        idx = perm[start:start + bs]
        if len(idx) < 2:
            continue  # batch norm needs two rows
        losses = train_step(x[idx], y[idx], state)
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + v
        steps += 1
    state.epoch += 1
    return {k: v / max(steps, 1) for k, v in sums.items()}


EPOCH_FIELDS = ["epoch", "lr", "total", *LOSS_NAMES, "disc_acc", "aux_acc", "dev_apcer", "dev_bpcer", "dev_acer", "dev_auc"]


def fit(config: TrainConfig, splits: ProtocolSplits, root, sr_net: SRNetwork | None = None,
        run_dir=None, data=None) -> tuple[ModelState, list[dict]]:
    """Train for ``config.epochs`` epochs, keeping the best dev-ACER weights.

    ``data`` may supply preloaded ``{"train": (x, y), "dev": (x, y)}`` tensors.
    With ``run_dir`` the config, an ``epochs.csv`` log and ``last.ckpt`` /
    ``best.ckpt`` are written there.
    """
    splits.validate()
    if data is None:
        data = {name: load_tensors(getattr(splits, name), root) for name in ("train", "dev")}
    (xtr, ytr), (xdv, ydv) = data["train"], data["dev"]
    state = init_state(config, sr_net)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    history: list[dict] = []
    best_acer, best_weights = math.inf, copy.deepcopy(state.model.state_dict())
    state.best_epoch = 0
    for _ in range(config.epochs):
        lr = config.lr_at(state.epoch)
        losses = run_epoch(xtr, ytr, state)
        dev = evaluate_split(xdv, ydv, state)
        thr = select_threshold(dev)
        a, b, c = apcer_bpcer_acer(dev, thr)
        rec = {"epoch": state.epoch, "lr": lr, **losses, "dev_apcer": a, "dev_bpcer": b, "dev_acer": c,
               "dev_auc": auc(dev)}
        history.append(rec)
        log.info("epoch %d lr %.3g total %.4f dev_acer %.4f", state.epoch, lr, rec.get("total", float("nan")), c)
        if c < best_acer:
            best_acer, best_weights = c, copy.deepcopy(state.model.state_dict())
            state.best_epoch = state.epoch
            if run_dir is not None:
                save_checkpoint(state, run_dir / "best.ckpt")
        if run_dir is not None:
            save_checkpoint(state, run_dir / "last.ckpt")
            _write_epochs(history, run_dir / "epochs.csv")

    if run_dir is not None:
        if config.epochs == 0:
            save_checkpoint(state, run_dir / "best.ckpt")
            save_checkpoint(state, run_dir / "last.ckpt")
        _write_epochs(history, run_dir / "epochs.csv")
    state.model.load_state_dict(best_weights)
    return state, history


def _write_epochs(history: list[dict], path: Path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=EPOCH_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for rec in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in rec.items()})


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: ModelState, path) -> None:
    """One file: metadata header plus named parameter arrays, optimiser and RNG state."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": {"config_digest": state.config.digest(), "seed": state.config.seed, "epoch": state.epoch,
                 "step": state.step, "best_epoch": state.best_epoch, "tool_version": __version__},
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "generator": state.generator.get_state(),
        "steps_per_epoch": state.steps_per_epoch,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _read_payload(path, kind: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError, OSError) as e:
        raise CorruptCheckpointError(f"{path}: corrupt or truncated checkpoint ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != kind:
        raise CorruptCheckpointError(f"{path}: not a {kind} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(
            f"{path}: checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    return payload


def load_checkpoint(path, config: TrainConfig | None = None) -> ModelState:
    """Restore a ModelState. A config whose digest differs only triggers a warning."""
    payload = _read_payload(path, CHECKPOINT_FORMAT)
    stored = TrainConfig.from_dict(payload["config"])
    if config is not None and config.digest() != payload["meta"]["config_digest"]:
        warnings.warn(f"{path}: config digest differs from the checkpoint's; using the stored config",
                      RuntimeWarning, stacklevel=2)
    state = init_state(stored)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.generator.set_state(payload["generator"])
    meta = payload["meta"]
    state.epoch, state.step, state.best_epoch = meta["epoch"], meta["step"], meta["best_epoch"]
    state.steps_per_epoch = payload.get("steps_per_epoch", 0)
    return state


SR_FORMAT = "cqil-sr-checkpoint"


def save_sr_checkpoint(net: SRNetwork, path, meta: dict) -> None:
    payload = {"format": SR_FORMAT, "version": CHECKPOINT_VERSION,
               "meta": {**meta, "image_size": net.image_size, "tool_version": __version__},
               "model": net.state_dict()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_sr_checkpoint(path) -> tuple[SRNetwork, dict]:
    payload = _read_payload(path, SR_FORMAT)
    net = SRNetwork(image_size=payload["meta"].get("image_size"))
    net.load_state_dict(payload["model"])
    net.eval()
    return net, payload["meta"]
