"""Synthetic live/attack face corpus with controllable cue strength.

Each live image is a smooth blob "face" over a low-frequency background.
Attacks reuse a live base (identity-consistent pairing) and add a cue
scaled by ``alpha``:

    physical: full-frame screen-moire grid ("replay") or raster lines with
              contrast flattening ("print")
    digital : a localized high-frequency checkerboard patch blended in with
              a soft cosine window ("swap" = large patch, "edit" = small)

At alpha=0 attacks are pixel-identical to their base; the cue designs give
the two attack families genuinely different signals.  All pixels live on
the 8-bit grid in [0, 1], so a write/load round-trip is bit-exact.

Storage: binary PPM (P6, 8-bit) plus a CSV manifest ``id,path,label,family``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, LoaderError, SplitError
from .tensor import Rng

LIVE, PHYSICAL_ATTACK, DIGITAL_ATTACK = "live", "physical_attack", "digital_attack"
LABELS = (LIVE, PHYSICAL_ATTACK, DIGITAL_ATTACK)

PHYSICAL_FAMILIES = ("replay", "print")
DIGITAL_FAMILIES = ("swap", "edit")

__all__ = [
    "Sample", "SynthConfig", "generate", "write_corpus", "load_manifest", "split",
    "write_ppm", "read_ppm", "LABELS", "LIVE", "PHYSICAL_ATTACK", "DIGITAL_ATTACK",
]


@dataclass
class Sample:
    id: str
    image: np.ndarray          # [H, W, 3] float64 in [0, 1], on the 8-bit grid
    label: str
    family: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise InputError(f"unknown label '{self.label}'")
        if self.label == LIVE and self.family is not None:
            raise InputError("live samples carry no attack family")
        if self.label != LIVE and not self.family:
            raise InputError("attack samples must carry a family")

    @property
    def bona_fide(self) -> bool:
        return self.label == LIVE


@dataclass
class SynthConfig:
    n_live: int = 600
    n_physical: int = 300
    n_digital: int = 300
    image_size: int = 32
    alpha: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if min(self.n_live, self.n_physical, self.n_digital) < 0:
            raise InputError("class counts must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _smooth_background(size: int, rng: Rng) -> np.ndarray:
    coarse = rng.uniform(0.42, 0.58, (4, 4, 3))
    # bilinear upsample of the coarse grid
    xs = np.linspace(0, 3, size)
    x0 = np.floor(xs).astype(int).clip(0, 2)
    fx = xs - x0
    rows = coarse[x0] * (1 - fx)[:, None, None] + coarse[x0 + 1] * fx[:, None, None]
    cols = rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x0 + 1] * fx[None, :, None]
    return cols


def _gaussian_bump(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    return np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2.0 * sigma * sigma))


def _live_base(size: int, rng: Rng) -> np.ndarray:
    img = _smooth_background(size, rng)
    cy = size / 2 + rng.uniform(-0.04, 0.04) * size
    cx = size / 2 + rng.uniform(-0.04, 0.04) * size
    face = _gaussian_bump(size, cy, cx, sigma=rng.uniform(0.22, 0.26) * size)
    tint = np.array([0.30, 0.24, 0.20]) * rng.uniform(0.9, 1.1)
    img = img + face[:, :, None] * tint
    eye_dx = rng.uniform(0.13, 0.16) * size
    eye_y = cy - rng.uniform(0.06, 0.08) * size
    for dx in (-eye_dx, eye_dx):
        eye = _gaussian_bump(size, eye_y, cx + dx, sigma=size / 18.0)
        img = img - 0.25 * eye[:, :, None]
    return _quantize(img)


def _flatten_toward_mean(base: np.ndarray, strength: float) -> np.ndarray:
    # contrast loss from re-display/re-print of the scene
    return strength * (base.mean(axis=(0, 1), keepdims=True) - base)


def _moire_cue(size: int, base: np.ndarray, rng: Rng) -> np.ndarray:
    # replay: oriented interference grating (4-8 px period, visible within a
    # patch) + mild contrast flattening from screen re-display
    period = rng.uniform(4.0, 8.0)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size]
    wave = np.sin(2 * np.pi * (np.cos(theta) * xs + np.sin(theta) * ys) / period + phase)
    return 0.50 * wave[:, :, None] * np.ones(3) + _flatten_toward_mean(base, 0.3)


def _print_cue(size: int, base: np.ndarray, rng: Rng) -> np.ndarray:
    # print: horizontal raster lines + strong flattening toward the page mean
    period = rng.uniform(5.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    ys = np.arange(size)
    raster = 0.50 * np.sin(2 * np.pi * ys / period + phase)[:, None, None] * np.ones((1, size, 3))
    return raster + _flatten_toward_mean(base, 0.5)


def _checker_cue(size: int, rng: Rng, family: str) -> np.ndarray:
    # local manipulation: high-frequency checkerboard + luminance seam, both
    # faded in by a soft cosine window ("swap" replaces a larger region)
    half = max(1, int(round((0.40 if family == "swap" else 0.26) * size)))
    half = min(half, size // 2 - 1)
    cy = int(rng.integers(half, size - half))
    cx = int(rng.integers(half, size - half))
    # 2px cells survive 2x block-mean resampling when grid-aligned
    cell = 2
    ys, xs = np.mgrid[0:size, 0:size]
    checker = np.where(((ys // cell) + (xs // cell)) % 2 == 0, 1.0, -1.0)
    wy = np.clip(1.0 - np.abs(ys - cy) / half, 0.0, 1.0)
    wx = np.clip(1.0 - np.abs(xs - cx) / half, 0.0, 1.0)
    window = (0.5 - 0.5 * np.cos(np.pi * wy)) * (0.5 - 0.5 * np.cos(np.pi * wx))
    return (0.85 * checker * window + 0.30 * window)[:, :, None] * np.ones(3)


def generate(config: SynthConfig) -> list[Sample]:
    """Deterministic corpus: lives first, then physical, then digital attacks.

    Attack i reuses live base (i mod n_live); cue draws do not depend on
    alpha, so regenerating with a different alpha changes only cue strength.
    """
    rng = Rng(config.seed)
    size = config.image_size
    base_rng = rng.child("bases")
    n_bases = max(config.n_live, 1)
    bases = [_live_base(size, base_rng.child(str(i))) for i in range(n_bases)]

    samples: list[Sample] = []
    for i in range(config.n_live):
        samples.append(Sample(id=f"live_{i:05d}", image=bases[i], label=LIVE))

    prng = rng.child("physical")
    for i in range(config.n_physical):
        r = prng.child(str(i))
        base = bases[i % n_bases]
        family = PHYSICAL_FAMILIES[int(r.integers(0, len(PHYSICAL_FAMILIES)))]
        cue = _moire_cue(size, base, r) if family == "replay" else _print_cue(size, base, r)
        img = _quantize(base + config.alpha * cue)
        samples.append(Sample(id=f"phys_{i:05d}", image=img, label=PHYSICAL_ATTACK, family=family))

    drng = rng.child("digital")
    for i in range(config.n_digital):
        r = drng.child(str(i))
        base = bases[i % n_bases]
        family = DIGITAL_FAMILIES[int(r.integers(0, len(DIGITAL_FAMILIES)))]
        cue = _checker_cue(size, r, family)
        img = _quantize(base + config.alpha * cue)
        samples.append(Sample(id=f"digi_{i:05d}", image=img, label=DIGITAL_ATTACK, family=family))
    return samples


# -- PPM + manifest I/O ------------------------------------------------------------


def write_ppm(image: np.ndarray, path) -> None:
    h, w, c = image.shape
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise LoaderError(f"{path}: not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise LoaderError(f"{path}: unsupported maxval {maxval}")
    if len(data) - pos < h * w * 3:
        raise LoaderError(f"{path}: truncated pixel payload")
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_corpus(samples: list[Sample], out_dir) -> Path:
    """Write images + manifest.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "path", "label", "family"])
        for s in samples:
            rel = f"images/{s.id}.ppm"
            write_ppm(s.image, out_dir / rel)
            writer.writerow([s.id, rel, s.label, s.family or ""])
    return manifest


def load_manifest(path) -> list[Sample]:
    """Load samples in manifest order; errors name the offending row."""
    path = Path(path)
    if not path.exists():
        raise LoaderError(f"manifest not found: {path}")
    samples: list[Sample] = []
    expected_shape = None
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["id", "path", "label", "family"]:
            raise LoaderError(f"{path}: manifest header must be id,path,label,family")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"]
            if label not in LABELS:
                raise LoaderError(f"{path} row {lineno}: bad label token '{label}'")
            img_path = path.parent / row["path"]
            if not img_path.exists():
                raise LoaderError(f"{path} row {lineno}: image file missing: {img_path}")
            image = read_ppm(img_path)
            if expected_shape is None:
                expected_shape = image.shape
            elif image.shape != expected_shape:
                raise LoaderError(
                    f"{path} row {lineno}: image shape {image.shape} != {expected_shape}")
            samples.append(Sample(id=row["id"], image=image, label=label, family=row["family"] or None))
    return samples


def split(samples: list[Sample], train_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Stratified-by-label disjoint split, deterministic for a given seed.

    Every class must have >= 2 samples; each side receives at least one
    sample per class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = Rng(seed)
    by_label: dict[str, list[int]] = {}
    for idx, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(idx)
    train_idx: list[int] = []
    eval_idx: list[int] = []
    for label in LABELS:
        idxs = by_label.get(label)
        if idxs is None:
            continue
        if len(idxs) < 2:
            raise SplitError(f"class '{label}' has {len(idxs)} sample(s); need >= 2 to split")
        perm = rng.child(label).permutation(len(idxs))
        n_train = int(round(train_fraction * len(idxs)))
        n_train = min(max(n_train, 1), len(idxs) - 1)
        chosen = [idxs[p] for p in perm]
        train_idx.extend(chosen[:n_train])
        eval_idx.extend(chosen[n_train:])
    train_idx.sort()
    eval_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in eval_idx]
