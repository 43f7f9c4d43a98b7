"""Image degradation and quality-pair construction.

Images outside the networks are float arrays in [0, 1] with layout (H, W, 3) or
(H, W). Inside training they are (N, 3, H, W) tensors; both paths share the
same blur/resample kernel so corpus tiers and training-time degradations agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


def sigma_for_kernel(kernel: int) -> float:
    return 0.3 * ((kernel - 1) / 2 - 1) + 0.8


@dataclass(frozen=True)
class DegradeParams:
    scale_factor: int = 2
    gauss_kernel: int = 3
    gauss_sigma: float | None = None
    noise_std: float = 0.01

    def __post_init__(self):
        if self.gauss_kernel < 1 or self.gauss_kernel % 2 == 0:
            raise ValueError(f"gaussian kernel must be a positive odd integer, got {self.gauss_kernel}")
        if self.scale_factor < 1:
            raise ValueError(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.gauss_sigma is not None and self.gauss_sigma <= 0:
            raise ValueError("gauss_sigma must be > 0")

    @property
    def sigma(self) -> float:
        return self.gauss_sigma if self.gauss_sigma is not None else sigma_for_kernel(self.gauss_kernel)

    @property
    def is_identity(self) -> bool:
        return self.scale_factor == 1 and self.gauss_kernel == 1 and self.noise_std == 0

    def to_dict(self) -> dict:
        return {"scale_factor": self.scale_factor, "gauss_kernel": self.gauss_kernel,
                "gauss_sigma": self.gauss_sigma, "noise_std": self.noise_std}


IDENTITY = DegradeParams(scale_factor=1, gauss_kernel=1, noise_std=0.0)


def gaussian_kernel1d(kernel: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(kernel, dtype=dtype) - (kernel - 1) / 2
    w = torch.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def blur_batch(x: torch.Tensor, kernel: int, sigma: float) -> torch.Tensor:
    """Separable gaussian blur of an (N, C, H, W) tensor with reflect padding."""
    if kernel == 1:
        return x
    c = x.shape[1]
    w = gaussian_kernel1d(kernel, sigma, dtype=x.dtype).to(x.device)
    pad = kernel // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, w.view(1, 1, 1, -1).expand(c, 1, 1, kernel), groups=c)
    x = F.conv2d(x, w.view(1, 1, -1, 1).expand(c, 1, kernel, 1), groups=c)
    return x


def down_up_batch(x: torch.Tensor, scale: int, mode: str = "bilinear") -> torch.Tensor:
    if scale == 1:
        return x
    h, w = x.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"scale_factor {scale} does not divide image size {h}x{w}")
    kw = {} if mode == "nearest" else {"align_corners": False}
    small = F.interpolate(x, size=(h // scale, w // scale), mode=mode, **kw)
    return F.interpolate(small, size=(h, w), mode=mode, **kw)


def degrade_batch(x: torch.Tensor, params: DegradeParams, generator: torch.Generator | None = None) -> torch.Tensor:
    """Blur, down-up resample and add clipped sensor noise; shape-preserving."""
    if x.numel() == 0:
        raise ValueError("cannot degrade an empty image")
    if params.is_identity:
        return x
    out = blur_batch(x, params.gauss_kernel, params.sigma)
    out = down_up_batch(out, params.scale_factor)
    if params.noise_std > 0:
        noise = torch.randn(out.shape, generator=generator, dtype=out.dtype, device=out.device)
        out = out + params.noise_std * noise
    return out.clamp(0.0, 1.0)


def _as_nchw(image: np.ndarray) -> torch.Tensor:
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot degrade an empty image")
    if arr.ndim == 2:
        return torch.from_numpy(arr)[None, None]
    if arr.ndim == 3:
        return torch.from_numpy(arr).permute(2, 0, 1)[None]
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {arr.shape}")


def _from_nchw(t: torch.Tensor, like: np.ndarray) -> np.ndarray:
    t = t[0]
    out = t[0].numpy() if like.ndim == 2 else t.permute(1, 2, 0).numpy()
    return out.astype(like.dtype if np.issubdtype(like.dtype, np.floating) else np.float64)


def degrade(image: np.ndarray, params: DegradeParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Degrade one (H, W[, C]) image in [0, 1]; noise is drawn from ``rng``."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("cannot degrade an empty image")
    if params.is_identity:
        return image.copy()
    t = _as_nchw(image)
    t = blur_batch(t, params.gauss_kernel, params.sigma)
    t = down_up_batch(t, params.scale_factor)
    out = _from_nchw(t, image).astype(np.float64)
    if params.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + params.noise_std * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0).astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64)


def gaussian_blur(image: np.ndarray, kernel: int, sigma: float | None = None) -> np.ndarray:
    """Pure gaussian blur (no resampling, no noise), used by the cross-quality suite."""
    params = DegradeParams(scale_factor=1, gauss_kernel=kernel, gauss_sigma=sigma, noise_std=0.0)
    return degrade(image, params)


def interpolation_pair(x: torch.Tensor, scale: int = 2) -> tuple[torch.Tensor, torch.Tensor]:
    """Two quality variants of a batch via bicubic and nearest down-up resampling.

    Stand-in for the restoration pair when no SR module is in play.
    """
    h, w = x.shape[-2:]
    small = F.interpolate(x, size=(h // scale, w // scale), mode="area")
    cubic = F.interpolate(small, size=(h, w), mode="bicubic", align_corners=False).clamp(0.0, 1.0)
    nearest = F.interpolate(small, size=(h, w), mode="nearest")
    return cubic, nearest


@dataclass
class QualityPair:
    enhanced: torch.Tensor
    original: torch.Tensor
    liveness: torch.Tensor | int | None = None
    quality_labels: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.enhanced.shape != self.original.shape:
            raise ValueError(f"pair members differ in shape: {tuple(self.enhanced.shape)} vs {tuple(self.original.shape)}")

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenate both members along the batch axis with their quality labels."""
        n = self.enhanced.shape[0]
        x = torch.cat([self.enhanced, self.original], dim=0)
        y = torch.cat([torch.full((n,), self.quality_labels[0], dtype=torch.long),
                       torch.full((n,), self.quality_labels[1], dtype=torch.long)])
        return x, y


def make_pair(images: torch.Tensor, sr_net, liveness=None, track_grad: bool = False) -> QualityPair:
    """Build an (SR output, original) pair for a batch of (N, 3, H, W) images.

    The SR output carries quality label 0 and the untouched input label 1,
    independent of content. Row order is preserved.
    """
    from .sres import sr_forward

    if images.dim() == 3:
        images = images[None]
    if track_grad:
        enhanced = sr_forward(sr_net, images)
    else:
        with torch.no_grad():
            enhanced = sr_forward(sr_net, images)
    return QualityPair(enhanced=enhanced, original=images, liveness=liveness)


def suite_dir_name(kernel: int, scale: int = 1) -> str:
    return f"gauss{kernel}x{kernel}" + (f"_s{scale}" if scale > 1 else "")


def gaussian_degrade_suite(records: Sequence, kernel_sizes: Iterable[int], root, out_dir,
                           calibration: float | None = None, scale: int = 1) -> dict[int, list]:
    """Write one blurred copy of every record's image per kernel size.

    Returns ``{kernel: [records]}`` where each new record points at the blurred
    image and carries the re-scored quality; a ``manifest.csv`` is written next
    to each set. Kernel 1 at scale 1 copies bytes verbatim. ``scale`` > 1 adds a
    down-up resample after the blur. Scores use ``calibration``, else the value
    stored with the corpus at ``root``.
    """
    from pathlib import Path
    import shutil

    from .corpus import (QUALITY_CALIBRATION, SampleRecord, load_image, read_corpus_meta, save_image, score_quality,
                         write_manifest)

    kernel_sizes = list(kernel_sizes)
    for k in kernel_sizes:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"gaussian kernel must be a positive odd integer, got {k}")
    if scale < 1:
        raise ValueError("scale must be >= 1")
    root, out_dir = Path(root), Path(out_dir)
    if calibration is None:
        calibration = float(read_corpus_meta(root).get("quality_calibration", QUALITY_CALIBRATION))
    result: dict[int, list] = {}
    for k in kernel_sizes:
        params = DegradeParams(scale_factor=scale, gauss_kernel=k, noise_std=0.0)
        derived = []
        sub = out_dir / suite_dir_name(k, scale)
        for rec in records:
            src = root / rec.image_path
            dst = sub / rec.image_path
            dst.parent.mkdir(parents=True, exist_ok=True)
            if params.is_identity:
                shutil.copyfile(src, dst)
            else:
                save_image(dst, degrade(load_image(src), params))
            derived.append(SampleRecord(
                image_path=rec.image_path, subject_id=rec.subject_id, liveness=rec.liveness,
                attack_category=rec.attack_category, quality_score=score_quality(load_image(dst), calibration),
                split=rec.split))
        write_manifest(derived, sub / "manifest.csv", with_split=any(r.split != "unassigned" for r in derived))
        result[k] = derived
    return result
