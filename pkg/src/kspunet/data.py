"""Synthetic multi-annotator segmentation data and its on-disk format.

A dataset directory holds ``manifest.json`` plus binary PGM files:
``img_{id}.pgm`` (8-bit grayscale) and ``img_{id}_mask{g}.pgm`` (0 or 255).
Images live in memory as float64 in [0, 1] (value / 255), masks as uint8 0/1.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError, InvalidConfig

FORMAT_VERSION = 1
NOISE_SIGMA = 0.05
MAX_ANNOTATOR_OFFSET = 0.08


@dataclass
class SegSample:
    id: str
    image: np.ndarray
    masks: list[np.ndarray]

    def __post_init__(self):
        if self.image.ndim != 2 or not self.masks:
            raise DatasetError(f"sample {self.id}: need a 2-D image and at least one mask")
        for g, m in enumerate(self.masks):
            if m.shape != self.image.shape:
                raise DatasetError(f"sample {self.id}: mask {g} is {m.shape}, image is {self.image.shape}")


@dataclass
class Dataset:
    samples: list[SegSample]
    image_size: int
    annotators: int
    seed: int = 0
    generator: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


# ---------------------------------------------------------------------------
# generation


def _smooth_periodic(rng, n_freq, theta):
    amp = rng.normal(size=n_freq) / np.arange(1, n_freq + 1)
    phase = rng.uniform(0, 2 * np.pi, size=n_freq)
    f = np.arange(1, n_freq + 1)
    return (amp[:, None] * np.cos(f[:, None] * theta[None] + phase[:, None])).sum(axis=0)


def _radius_fn(rng, base_radius):
    """Superellipse radius profile with a low-order Fourier wobble, as a function of angle."""
    p = rng.uniform(1.6, 4.0)
    aspect = rng.uniform(0.7, 1.0)
    tilt = rng.uniform(0, 2 * np.pi)
    coef = rng.normal(scale=0.06, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)

    def r(theta):
        t = theta - tilt
        c, s = np.abs(np.cos(t)), np.abs(np.sin(t)) / aspect
        superellipse = (c**p + s**p) ** (-1.0 / p)
        wobble = sum(coef[i] * np.cos((i + 2) * t + phase[i]) for i in range(3))
        return base_radius * superellipse * (1 + wobble)

    return r


def _annotator_offset(rng):
    """Smooth radial offset field with max |offset| <= MAX_ANNOTATOR_OFFSET."""
    grid = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    n_freq = 3
    amp = rng.normal(size=n_freq + 1)
    phase = rng.uniform(0, 2 * np.pi, size=n_freq)
    target = rng.uniform(0.03, MAX_ANNOTATOR_OFFSET)

    def raw(theta):
        return amp[0] + sum(amp[i + 1] * np.cos((i + 1) * theta + phase[i]) for i in range(n_freq))

    scale = target / np.abs(raw(grid)).max()
    return lambda theta: scale * raw(theta)


def _render_sample(idx: int, size: int, annotators: int, seed_seq: np.random.SeedSequence) -> SegSample:
    rng = np.random.default_rng(seed_seq)
    base_radius = rng.uniform(0.12, 0.22) * size
    margin = 1.6 * base_radius
    cy, cx = rng.uniform(margin, size - margin, size=2)
    r = _radius_fn(rng, base_radius)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.hypot(xx - cx, yy - cy)
    theta = np.arctan2(yy - cy, xx - cx)
    boundary = r(theta)

    texture = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=3.0, mode="wrap")
    texture = 0.08 * texture / (texture.std() + 1e-12)
    inside = 1 / (1 + np.exp(-(boundary - dist) / 0.7))
    contrast = rng.uniform(0.3, 0.5)
    img = 0.3 + texture + contrast * inside + rng.normal(scale=NOISE_SIGMA, size=(size, size))
    img = np.round(np.clip(img, 0, 1) * 255) / 255

    masks = []
    for _ in range(annotators):
        off = _annotator_offset(rng)
        m = (dist <= boundary * (1 + off(theta))).astype(np.uint8)
        masks.append(m)
    return SegSample(id=f"{idx:05d}", image=img, masks=masks)


def generate_synthetic(n_samples: int, image_size: int = 64, annotators: int = 4, seed: int = 0,
                       workers: int = 1) -> Dataset:
    """Random blobs with ``annotators`` perturbed masks each; fully determined by ``seed``."""
    if n_samples < 1:
        raise InvalidConfig("n_samples must be >= 1")
    if image_size < 16:
        raise InvalidConfig("image_size must be >= 16")
    if annotators < 1:
        raise InvalidConfig("annotators must be >= 1")
    children = np.random.SeedSequence(seed).spawn(n_samples)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(lambda a: _render_sample(a[0], image_size, annotators, a[1]),
                                enumerate(children)))
    return Dataset(samples, image_size, annotators, seed,
                   {"noise_sigma": NOISE_SIGMA, "max_annotator_offset": MAX_ANNOTATOR_OFFSET})


# ---------------------------------------------------------------------------
# PGM and directory I/O


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


_PGM_HEADER = re.compile(rb"\AP5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror or exc}") from exc
    m = _PGM_HEADER.match(raw)
    if not m:
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DatasetError(f"{path}: maxval {maxval}, only 8-bit files are supported")
    data = raw[m.end() :]
    if len(data) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _image_bytes(img: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(img) * 255)
    return np.clip(q, 0, 255).astype(np.uint8)


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        write_pgm(d / f"img_{s.id}.pgm", _image_bytes(s.image))
        for g, m in enumerate(s.masks):
            write_pgm(d / f"img_{s.id}_mask{g}.pgm", (np.asarray(m) > 0).astype(np.uint8) * 255)
    manifest = {
        "version": FORMAT_VERSION,
        "image_size": dataset.image_size,
        "annotators": dataset.annotators,
        "seed": dataset.seed,
        "samples": [s.id for s in dataset],
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_mask(path: Path) -> np.ndarray:
    raw = read_pgm(path)
    if not np.isin(raw, (0, 255)).all():
        raise DatasetError(f"{path}: mask values must be 0 or 255")
    return (raw > 0).astype(np.uint8)


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"{mpath}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    required = ("version", "image_size", "annotators", "seed", "samples")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DatasetError(f"{mpath}: missing keys {missing}")
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: unsupported version {manifest['version']}")
    size, g_count = int(manifest["image_size"]), int(manifest["annotators"])
    samples = []
    for sid in manifest["samples"]:
        ipath = d / f"img_{sid}.pgm"
        img = read_pgm(ipath)
        if img.shape != (size, size):
            raise DatasetError(f"{ipath}: size {img.shape} differs from manifest image_size {size}")
        masks = []
        for g in range(g_count):
            mp = d / f"img_{sid}_mask{g}.pgm"
            if not mp.exists():
                raise DatasetError(f"{mp}: missing mask file")
            masks.append(_load_mask(mp))
        samples.append(SegSample(str(sid), img / 255.0, masks))
    return Dataset(samples, size, g_count, int(manifest["seed"]))


_IMAGE_NAME = re.compile(r"^img_(.+)\.pgm$")
_MASK_NAME = re.compile(r"^img_(.+)_mask(\d+)\.pgm$")


def import_external(directory: str | Path) -> Dataset:
    """Load image/mask PGM pairs following the dataset naming convention, without a manifest.

    Every image needs at least one mask and all files of a sample must share
    its size. Images are rescaled by 1/255.
    """
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{d}: not a directory")
    masks: dict[str, dict[int, Path]] = {}
    images: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if mm := _MASK_NAME.match(p.name):
            masks.setdefault(mm.group(1), {})[int(mm.group(2))] = p
        elif mi := _IMAGE_NAME.match(p.name):
            images[mi.group(1)] = p
    if not images:
        raise DatasetError(f"{d}: no img_*.pgm files found")
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise DatasetError(f"{d}: masks without an image for ids {orphans}")
    samples = []
    for sid in sorted(images):
        ipath = images[sid]
        img = read_pgm(ipath)
        if sid not in masks:
            raise DatasetError(f"{ipath}: no mask files")
        sample_masks = []
        for g in sorted(masks[sid]):
            mp = masks[sid][g]
            m = _load_mask(mp)
            if m.shape != img.shape:
                raise DatasetError(f"{mp} is {m.shape[1]}x{m.shape[0]} but {ipath} is {img.shape[1]}x{img.shape[0]}")
            sample_masks.append(m)
        samples.append(SegSample(sid, img / 255.0, sample_masks))
    sizes = {s.image.shape for s in samples}
    if len(sizes) != 1 or next(iter(sizes))[0] != next(iter(sizes))[1]:
        raise DatasetError(f"{d}: images must be square and share one size, found {sorted(sizes)}")
    return Dataset(samples, samples[0].image.shape[0], max(len(s.masks) for s in samples), 0)
