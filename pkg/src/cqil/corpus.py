"""Synthetic surveillance face anti-spoofing corpus, quality proxy and protocol splits.

Texture model (all images are float RGB in [0, 1] before 8-bit quantisation):

* every crop: a grey background gradient with spatially correlated clutter
  (gaussian-filtered noise, std 0.09, correlation 1 px), white clutter
  N(0, 0.025) and a few random bars, and an elliptical face with Lambertian-like shading
  ``0.35 + 0.65 * max(n . l, 0)`` times a per-subject skin colour;
* ``live``: fine stochastic grain, N(0, 0.035) luminance plus N(0, 0.01) chroma;
* ``print``: shading range compressed by 0.7, 25% desaturation toward a warm
  paper tone and a halftone lattice ``1 + 0.18 cos(2 pi x / 3) cos(2 pi y / 3)``;
* ``replay``: additive moire banding ``0.08 sin(2 pi (x cos a + y sin a) / P)``
  with P in [5, 8], plus a cool colour cast;
* ``mask_*``: shading quantised to 5 levels (region flattening), weak material
  grain N(0, 0.008) and a family-specific ring at the face boundary
  (resin: glossy bright ring, silicone: reddish soft ring, plaster: whitened
  matte face with a thin dark ring, headgear: thick dark hood band).
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .degrade import IDENTITY, DegradeParams, degrade

LIVE, ATTACK = "live", "attack"
MASK_FAMILIES = ("mask_resin", "mask_silicone", "mask_plaster", "mask_headgear")
CATEGORIES = ("none",) + MASK_FAMILIES + ("print", "replay")
MANIFEST_FIELDS = ["path", "subject_id", "liveness", "attack_category", "quality_score"]
SPLIT_FIELDS = MANIFEST_FIELDS + ["split"]
PROTOCOLS = ("P1", "P2.1", "P2.2", "P2.3", "P2.4", "P3")
# leave-one-mask-out: P2.1 headgear, P2.2 plaster, P2.3 silicone, P2.4 resin
HELD_OUT_MASK = {"P2.1": "mask_headgear", "P2.2": "mask_plaster", "P2.3": "mask_silicone", "P2.4": "mask_resin"}
P3_BANDS = {"train": (0.4, 1.0), "dev": (0.3, 0.4), "test": (0.0, 0.3)}
TARGET_MEDIAN_SCORE = 0.7

# median Laplacian variance of clean default-corpus crops / ln(1 / 0.3)
QUALITY_CALIBRATION = 0.0228

# clean, mild blur, blur + 2x down-up; scores land roughly in the P3 train/dev/test bands
DEFAULT_TIERS = (
    IDENTITY,
    DegradeParams(scale_factor=1, gauss_kernel=3, gauss_sigma=0.5, noise_std=0.01),
    DegradeParams(scale_factor=2, gauss_kernel=3, noise_std=0.01),
)


class ProtocolError(ValueError):
    """A protocol cannot be built from the given manifest."""


@dataclass
class SampleRecord:
    image_path: str
    subject_id: int
    liveness: str
    attack_category: str
    quality_score: float
    split: str = "unassigned"

    def __post_init__(self):
        self.subject_id = int(self.subject_id)
        self.quality_score = float(self.quality_score)
        if self.subject_id < 0:
            raise ValueError("subject_id must be >= 0")
        if self.liveness not in (LIVE, ATTACK):
            raise ValueError(f"unknown liveness {self.liveness!r}")
        if self.attack_category not in CATEGORIES:
            raise ValueError(f"unknown attack category {self.attack_category!r}")
        if (self.liveness == LIVE) != (self.attack_category == "none"):
            raise ValueError("liveness 'live' must pair with attack_category 'none'")
        if not 0.0 <= self.quality_score <= 1.0:
            raise ValueError(f"quality_score {self.quality_score} outside [0, 1]")
        if self.split not in ("train", "dev", "test", "unassigned"):
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def label(self) -> int:
        return 1 if self.liveness == LIVE else 0

    @property
    def group(self) -> str:
        """All quality tiers of one rendered crop share a group key."""
        return re.sub(r"_t\d+(\.\w+)$", "", self.image_path)

    @property
    def tier(self) -> int:
        m = re.search(r"_t(\d+)\.\w+$", self.image_path)
        return int(m.group(1)) if m else 0


@dataclass
class CorpusSpec:
    n_subjects: int = 8
    images_per_subject_per_category: int = 2
    image_size: tuple[int, int] = (64, 64)
    quality_tiers: Sequence[DegradeParams] = DEFAULT_TIERS
    rng_seed: int = 0
    categories: Sequence[str] = ("live",) + MASK_FAMILIES + ("print", "replay")
    live_multiplier: int = 1

    def validate(self):
        if self.n_subjects < 4:
            raise ValueError("n_subjects must be >= 4")
        if self.images_per_subject_per_category < 1:
            raise ValueError("images_per_subject_per_category must be >= 1")
        h, w = self.image_size
        if h != w or h < 8 or h & (h - 1):
            raise ValueError(f"image_size must be square with a power-of-two side, got {self.image_size}")
        if self.live_multiplier < 1:
            raise ValueError("live_multiplier must be >= 1")
        if not self.quality_tiers:
            raise ValueError("quality_tiers must be non-empty")
        for c in self.categories:
            if c != "live" and c not in CATEGORIES[1:]:
                raise ValueError(f"unknown category {c!r}")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate categories")

    def to_dict(self) -> dict:
        return {"n_subjects": self.n_subjects,
                "images_per_subject_per_category": self.images_per_subject_per_category,
                "image_size": list(self.image_size),
                "quality_tiers": [t.to_dict() for t in self.quality_tiers],
                "rng_seed": self.rng_seed,
                "categories": list(self.categories),
                "live_multiplier": self.live_multiplier}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "quality_tiers" in d:
            d["quality_tiers"] = tuple(DegradeParams(**t) for t in d["quality_tiers"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "categories" in d:
            d["categories"] = tuple(d["categories"])
        return cls(**d)


# ---------------------------------------------------------------- rendering

def _subject_params(seed: int, subject: int) -> dict:
    rng = np.random.default_rng([seed, subject, 7919])
    base = np.array([0.78, 0.58, 0.47]) * rng.uniform(0.7, 1.1)
    skin = np.clip(base + rng.normal(0, 0.04, 3), 0.2, 0.95)
    return {
        "skin": skin,
        "rx": rng.uniform(0.26, 0.32),
        "ry": rng.uniform(0.34, 0.40),
        "light": rng.uniform(-0.8, 0.8),
        "bg": rng.uniform(0.25, 0.6),
    }


def _correlated_field(rng: np.random.Generator, n: int, std: float, corr: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to ``std`` (periodic boundary)."""
    white = rng.standard_normal((n, n))
    f = np.fft.fftfreq(n)
    gain = np.exp(-2.0 * (np.pi * corr) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * gain))
    return std * field / field.std()


def _render(category: str, subj: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    n = size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = (xx + 0.5) / n
    v = (yy + 0.5) / n

    # background: gradient, clutter and a few bars
    bg = subj["bg"] + 0.15 * (u - 0.5) * rng.uniform(-1, 1) + 0.15 * (v - 0.5) * rng.uniform(-1, 1)
    bg = bg + _correlated_field(rng, n, 0.09, 1.0) + rng.normal(0, 0.025, (n, n))
    for _ in range(3):
        if rng.random() < 0.5:
            c = rng.uniform(0, 1)
            bg = bg + rng.uniform(-0.15, 0.15) * (np.abs(u - c) < rng.uniform(0.01, 0.05))
        else:
            c = rng.uniform(0, 1)
            bg = bg + rng.uniform(-0.15, 0.15) * (np.abs(v - c) < rng.uniform(0.01, 0.05))
    img = np.repeat(bg[..., None], 3, axis=2)

    cx = 0.5 + rng.normal(0, 0.03)
    cy = 0.5 + rng.normal(0, 0.03)
    rx = subj["rx"] * rng.uniform(0.95, 1.05)
    ry = subj["ry"] * rng.uniform(0.95, 1.05)
    ex, ey = (u - cx) / rx, (v - cy) / ry
    r2 = ex ** 2 + ey ** 2
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    la = subj["light"] + rng.normal(0, 0.15)
    lx, ly, lz = math.sin(la) * 0.6, -0.3, 0.75
    ln = math.sqrt(lx * lx + ly * ly + lz * lz)
    shade = 0.35 + 0.65 * np.clip((ex * lx + ey * ly + nz * lz) / ln, 0.0, None)
    ring = np.clip(1.0 - np.abs(np.sqrt(r2) - 1.0) / 0.12, 0.0, 1.0)
    skin = subj["skin"]

    if category == "live":
        face = shade[..., None] * skin
        face = face + rng.normal(0, 0.035, (n, n))[..., None] + rng.normal(0, 0.01, (n, n, 3))
    elif category == "print":
        s = 0.5 + 0.7 * (shade - 0.5)
        paper = np.array([0.9, 0.85, 0.7])
        tone = 0.75 * skin + 0.25 * paper
        phase = rng.uniform(0, 3, 2)
        dots = 1.0 + 0.18 * np.cos(2 * np.pi * (xx + phase[0]) / 3.0) * np.cos(2 * np.pi * (yy + phase[1]) / 3.0)
        face = (s * dots)[..., None] * tone
    elif category == "replay":
        a = rng.uniform(0, np.pi)
        period = rng.uniform(5.0, 8.0)
        moire = 0.08 * np.sin(2 * np.pi * (xx * math.cos(a) + yy * math.sin(a)) / period + rng.uniform(0, 2 * np.pi))
        face = shade[..., None] * skin * np.array([0.92, 0.97, 1.08]) + moire[..., None]
    else:
        flat = np.round(shade * 5.0) / 5.0
        face = flat[..., None] * skin + rng.normal(0, 0.008, (n, n))[..., None]
        if category == "mask_resin":
            face = face + 0.22 * ring[..., None] * (ey < 0.3)[..., None]
        elif category == "mask_silicone":
            face = face + 0.14 * ring[..., None] * np.array([1.0, -0.3, -0.3])
        elif category == "mask_plaster":
            face = 0.7 * face + 0.3 * flat[..., None] * np.array([0.95, 0.93, 0.9])
            face = face - 0.25 * (np.abs(np.sqrt(r2) - 1.0) < 0.05)[..., None]
        elif category == "mask_headgear":
            hood = (r2 > 0.72) & (r2 < 1.0)
            face = np.where(hood[..., None], face * 0.35, face)

    edge = np.clip((1.0 - r2) / 0.08, 0.0, 1.0)[..., None]
    img = img * (1 - edge) + face * edge
    if category == "mask_headgear":
        outer = (r2 >= 1.0) & (r2 < 1.3)
        img = np.where(outer[..., None], img * 0.4, img)
    return np.clip(img, 0.0, 1.0)


def render_sample(seed: int, subject: int, category: str, index: int, size: int) -> np.ndarray:
    """Clean (tier 0) crop, a pure function of its coordinates."""
    cat_idx = ("live",) + CATEGORIES[1:]
    rng = np.random.default_rng([seed, subject, cat_idx.index(category), index])
    return _render(category, _subject_params(seed, subject), size, rng)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(image), mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# ------------------------------------------------------------------ quality

def _gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot score an empty image")
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            return arr[..., 0]
        return arr[..., :3] @ np.array([0.299, 0.587, 0.114])
    if arr.ndim == 2:
        return arr
    raise ValueError(f"not an image: shape {arr.shape}")


def laplacian_variance(image: np.ndarray) -> float:
    g = _gray(image)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise ValueError("image smaller than the 3x3 Laplacian")
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(lap.var())


def score_quality(image: np.ndarray, calibration: float = QUALITY_CALIBRATION) -> float:
    """Sharpness proxy in [0, 1]: ``1 - exp(-var(Laplacian) / calibration)``."""
    v = laplacian_variance(image)
    return float(-np.expm1(-v / calibration))


def calibrate(variances: Iterable[float], target: float = TARGET_MEDIAN_SCORE) -> float:
    """Constant that maps the median variance to ``target``."""
    med = float(np.median(list(variances)))
    if med <= 0:
        raise ValueError("median Laplacian variance is zero; cannot calibrate")
    return med / -math.log(1.0 - target)


# ------------------------------------------------------------------ corpus

def _liveness(category: str) -> tuple[str, str]:
    return (LIVE, "none") if category == "live" else (ATTACK, category)


def generate_corpus(spec: CorpusSpec, out_dir, calibration: float | None = None) -> list[SampleRecord]:
    """Render, degrade, score and write the corpus; returns the manifest rows.

    Writes ``images/``, ``manifest.csv`` and ``corpus.json`` (spec plus the
    quality calibration constant) under ``out_dir``.
    """
    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e

    size = spec.image_size[0]
    cat_idx = ("live",) + CATEGORIES[1:]
    rendered = []
    for s in range(spec.n_subjects):
        for cat in spec.categories:
            count = spec.images_per_subject_per_category * (spec.live_multiplier if cat == "live" else 1)
            for i in range(count):
                clean = render_sample(spec.rng_seed, s, cat, i, size)
                tiers = []
                for t, params in enumerate(spec.quality_tiers):
                    rng = np.random.default_rng([spec.rng_seed, s, cat_idx.index(cat), i, t, 104729])
                    img = degrade(clean, params, rng)
                    tiers.append(quantize(img).astype(np.float64) / 255.0)
                rendered.append((s, cat, i, tiers))

    if calibration is None:
        calibration = calibrate(laplacian_variance(r[3][0]) for r in rendered)

    records = []
    for s, cat, i, tiers in rendered:
        liveness, attack = _liveness(cat)
        for t, img in enumerate(tiers):
            rel = f"images/s{s:03d}/{cat}_{i:02d}_t{t}.png"
            save_image(out_dir / rel, img)
            records.append(SampleRecord(rel, s, liveness, attack, score_quality(img, calibration)))

    write_manifest(records, out_dir / "manifest.csv")
    meta = {"spec": spec.to_dict(), "quality_calibration": calibration, "n_records": len(records)}
    (out_dir / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return records


def manifest_text(records: Sequence[SampleRecord], with_split: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPLIT_FIELDS if with_split else MANIFEST_FIELDS)
    for r in records:
        row = [r.image_path, r.subject_id, r.liveness, r.attack_category, f"{r.quality_score:.6f}"]
        if with_split:
            row.append(r.split)
        w.writerow(row)
    return buf.getvalue()


def write_manifest(records: Sequence[SampleRecord], path, with_split: bool = False):
    Path(path).write_bytes(manifest_text(records, with_split).encode("utf-8"))


def read_manifest(path) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if rows and not set(MANIFEST_FIELDS) <= set(rows[0]):
        raise ValueError(f"{path}: manifest header must contain {MANIFEST_FIELDS}")
    return [SampleRecord(r["path"], int(r["subject_id"]), r["liveness"], r["attack_category"],
                         float(r["quality_score"]), r.get("split") or "unassigned") for r in rows]


def read_corpus_meta(root) -> dict:
    p = Path(root) / "corpus.json"
    return json.loads(p.read_text()) if p.exists() else {}


# ------------------------------------------------------------------ protocols

@dataclass
class ProtocolSplits:
    protocol_id: str
    train: list[SampleRecord] = field(default_factory=list)
    dev: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)

    def subsets(self) -> dict[str, list[SampleRecord]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}

    def violations(self) -> list[str]:
        """Human-readable list of broken protocol invariants (empty when valid)."""
        out = []
        subsets = self.subsets()
        for name, recs in subsets.items():
            if not recs:
                out.append(f"{name} is empty")
        paths = {n: {r.image_path for r in recs} for n, recs in subsets.items()}
        for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
            if paths[a] & paths[b]:
                out.append(f"{a} and {b} share {len(paths[a] & paths[b])} records")
        pid = self.protocol_id
        if pid == "P1":
            subj = {n: {r.subject_id for r in recs} for n, recs in subsets.items()}
            for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
                if subj[a] & subj[b]:
                    out.append(f"P1: {a} and {b} share subjects {sorted(subj[a] & subj[b])}")
        elif pid in HELD_OUT_MASK:
            held = HELD_OUT_MASK[pid]
            for name in ("train", "dev"):
                if any(r.attack_category == held for r in subsets[name]):
                    out.append(f"{pid}: held-out {held} appears in {name}")
            if any(r.attack_category not in ("none", held) for r in self.test):
                out.append(f"{pid}: test contains attacks other than {held}")
            for name, recs in subsets.items():
                if not any(r.liveness == LIVE for r in recs):
                    out.append(f"{pid}: no live samples in {name}")
        elif pid == "P3":
            for name, (lo, hi) in P3_BANDS.items():
                bad = [r for r in subsets[name] if not _in_band(r.quality_score, name)]
                if bad:
                    out.append(f"P3: {len(bad)} {name} records outside [{lo}, {hi}{']' if name == 'train' else ')'}")
        else:
            out.append(f"unknown protocol {pid!r}")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ProtocolError("; ".join(problems))


def _in_band(score: float, band: str) -> bool:
    lo, hi = P3_BANDS[band]
    if band == "train":
        return lo <= score <= hi
    return lo <= score < hi


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _cut(items: list, fractions: Sequence[float], what: str) -> list[list]:
    """Split ``items`` into consecutive chunks by fraction, at least one item each."""
    k = len(fractions)
    if len(items) < k:
        raise ProtocolError(f"{what}: need at least {k} units to split, have {len(items)}")
    sizes = [max(1, _round_half_up(f * len(items))) for f in fractions[:-1]]
    while sum(sizes) > len(items) - 1:
        i = int(np.argmax(sizes))
        sizes[i] -= 1
    sizes.append(len(items) - sum(sizes))
    out, start = [], 0
    for s in sizes:
        out.append(items[start:start + s])
        start += s
    return out


def _with_split(records: Iterable[SampleRecord], split: str) -> list[SampleRecord]:
    return [SampleRecord(r.image_path, r.subject_id, r.liveness, r.attack_category, r.quality_score, split)
            for r in records]


def _grouped(records: Iterable[SampleRecord]) -> dict[str, list[SampleRecord]]:
    groups: dict[str, list[SampleRecord]] = {}
    for r in records:
        groups.setdefault(r.group, []).append(r)
    return groups


def build_protocol_splits(records: Sequence[SampleRecord], protocol_id: str, seed: int = 0) -> ProtocolSplits:
    """Assign manifest rows to train/dev/test following one evaluation protocol.

    P1 splits subjects 40/10/50, P2.x holds one mask family out for test and
    keeps print/replay out entirely, P3 assigns rows by quality-score band.
    """
    if protocol_id not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol_id!r}; expected one of {PROTOCOLS}")
    if not records:
        raise ProtocolError("empty manifest")
    rng = np.random.default_rng(seed)

    if protocol_id == "P1":
        subjects = sorted({r.subject_id for r in records})
        if seed:
            subjects = list(rng.permutation(subjects))
        tr, dv, te = (set(x) for x in _cut(subjects, (0.4, 0.1, 0.5), "P1 subjects"))
        splits = ProtocolSplits("P1",
                                _with_split([r for r in records if r.subject_id in tr], "train"),
                                _with_split([r for r in records if r.subject_id in dv], "dev"),
                                _with_split([r for r in records if r.subject_id in te], "test"))

    elif protocol_id in HELD_OUT_MASK:
        held = HELD_OUT_MASK[protocol_id]
        groups = _grouped(records)
        keys = sorted(groups)
        live = [k for k in keys if groups[k][0].liveness == LIVE]
        train, dev, test = [], [], []
        order = list(rng.permutation(len(live))) if seed else range(len(live))
        lt, ld, le = _cut([live[i] for i in order], (0.6, 0.15, 0.25), f"{protocol_id} live")
        train += lt
        dev += ld
        test += le
        held_keys = [k for k in keys if groups[k][0].attack_category == held]
        if not held_keys:
            raise ProtocolError(f"{protocol_id}: held-out family {held} has no samples")
        test += held_keys
        for fam in MASK_FAMILIES:
            if fam == held:
                continue
            fam_keys = [k for k in keys if groups[k][0].attack_category == fam]
            if not fam_keys:
                raise ProtocolError(f"{protocol_id}: training family {fam} has no samples")
            order = list(rng.permutation(len(fam_keys))) if seed else range(len(fam_keys))
            ft, fd = _cut([fam_keys[i] for i in order], (0.75, 0.25), f"{protocol_id} {fam}")
            train += ft
            dev += fd
        key_order = {k: i for i, k in enumerate(keys)}
        pick = lambda ks, name: _with_split(  # noqa: E731
            [r for k in sorted(ks, key=key_order.get) for r in groups[k]], name)
        splits = ProtocolSplits(protocol_id, pick(train, "train"), pick(dev, "dev"), pick(test, "test"))

    else:
        by_band = {b: [r for r in records if _in_band(r.quality_score, b)] for b in P3_BANDS}
        for band, recs in by_band.items():
            if not recs:
                lo, hi = P3_BANDS[band]
                raise ProtocolError(f"P3: score band {band} [{lo}, {hi}{']' if band == 'train' else ')'} is empty")
        splits = ProtocolSplits("P3", *(_with_split(by_band[b], b) for b in ("train", "dev", "test")))

    splits.validate()
    return splits


def write_splits(splits: ProtocolSplits, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, recs in splits.subsets().items():
        p = out_dir / f"{name}.csv"
        write_manifest(recs, p, with_split=True)
        paths[name] = p
    return paths


def read_splits(split_dir, protocol_id: str) -> ProtocolSplits:
    split_dir = Path(split_dir)
    return ProtocolSplits(protocol_id, *(read_manifest(split_dir / f"{n}.csv") for n in ("train", "dev", "test")))
