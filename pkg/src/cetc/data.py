"""Dataset sources, deterministic splits, and image preprocessing.

Two sources are supported: an on-disk image folder with ``positive`` /
``negative`` class subdirectories, and a self-contained synthetic
generator producing two linearly separable classes (a bright centered
disk on noise vs. plain noise).  Splits are stratified per class and
fully determined by the dataset seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

__all__ = [
    "SyntheticSource",
    "ImageFolderSource",
    "SplitSpec",
    "DatasetSpec",
    "Dataset",
    "SplitIndices",
    "split_dataset",
    "preprocess",
    "resize_shortest_side",
    "PreprocessConfig",
]

POSITIVE, NEGATIVE = 1, 0
_CLASS_DIRS = {"positive": POSITIVE, "negative": NEGATIVE}
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class SyntheticSource:
    seed: int = 0
    n_per_class: int = 32
    image_size: int = 32


@dataclass
class ImageFolderSource:
    path: str
    on_bad_image: str = "error"  # or "skip"


@dataclass
class SplitSpec:
    """Either the 8:1:1 three-way split or 8:2 with an external test folder."""

    kind: str = "ratio_8_1_1"
    test_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("ratio_8_1_1", "ratio_8_2"):
            raise ValueError(f"unknown split kind {self.kind!r}")

    @property
    def fractions(self) -> tuple[float, ...]:
        return (0.8, 0.1, 0.1) if self.kind == "ratio_8_1_1" else (0.8, 0.2)


@dataclass
class DatasetSpec:
    source: SyntheticSource | ImageFolderSource
    split: SplitSpec = field(default_factory=SplitSpec)
    seed: int = 0


class Dataset:
    """In-memory list of (image, label); images are (H, W, 3) float in [0, 1]."""

    def __init__(self, images: list[np.ndarray], labels: np.ndarray):
        if len(images) != len(labels):
            raise ValueError("images and labels must have equal length")
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @staticmethod
    def synthetic(src: SyntheticSource) -> "Dataset":
        rng = np.random.default_rng(src.seed)
        s = src.image_size
        yy, xx = np.mgrid[0:s, 0:s]
        disk = ((yy - (s - 1) / 2) ** 2 + (xx - (s - 1) / 2) ** 2
                <= (s / 4) ** 2).astype(np.float64)
        images, labels = [], []
        for label in (NEGATIVE, POSITIVE):
            for _ in range(src.n_per_class):
                img = 0.35 + 0.05 * rng.standard_normal((s, s, 3))
                if label == POSITIVE:
                    img += 0.4 * disk[:, :, None]
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(label)
        return Dataset(images, np.asarray(labels))

    @staticmethod
    def from_folder(src: ImageFolderSource) -> "Dataset":
        from PIL import Image  # imported lazily: synthetic runs need no Pillow

        root = Path(src.path)
        if not root.is_dir():
            raise FileNotFoundError(f"image folder {root} does not exist")
        images, labels = [], []
        for sub, label in sorted(_CLASS_DIRS.items()):
            class_dir = root / sub
            if not class_dir.is_dir():
                raise FileNotFoundError(f"missing class directory {class_dir}")
            for p in sorted(class_dir.iterdir()):
                if p.suffix.lower() not in _IMAGE_SUFFIXES:
                    continue
                try:
                    with Image.open(p) as im:
                        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                except OSError as exc:
                    if src.on_bad_image == "skip":
                        log.warning("skipping unreadable image %s: %s", p, exc)
                        continue
                    raise
                if arr.size == 0:
                    if src.on_bad_image == "skip":
                        log.warning("skipping empty image %s", p)
                        continue
                    raise ValueError(f"empty image {p}")
                images.append(arr)
                labels.append(label)
        if not images:
            raise ValueError(f"no images found under {root}")
        return Dataset(images, np.asarray(labels))

    @staticmethod
    def load(spec: DatasetSpec) -> "Dataset":
        if isinstance(spec.source, SyntheticSource):
            return Dataset.synthetic(spec.source)
        return Dataset.from_folder(spec.source)


@dataclass
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray  # empty for 8:2 splits (test is external)


def _allocate(counts: np.ndarray, fractions: tuple[float, ...]) -> np.ndarray:
    """Per-class example counts for each split fraction.

    Floors the global target per split, then fills the deficit class by
    class in order of largest fractional remainder, so the totals equal
    floor(f*n) for every non-final split and the remainder goes to the
    last one.
    """
    n_total = counts.sum()
    alloc = np.zeros((len(fractions), len(counts)), dtype=np.int64)
    remaining = counts.copy()
    for si, f in enumerate(fractions[:-1]):
        target = int(np.floor(f * n_total))
        exact = f * counts
        base = np.floor(exact).astype(np.int64)
        base = np.minimum(base, remaining)
        deficit = target - base.sum()
        order = np.argsort(-(exact - np.floor(exact)), kind="stable")
        for ci in order:
            if deficit <= 0:
                break
            if remaining[ci] - base[ci] > 0:
                base[ci] += 1
                deficit -= 1
        alloc[si] = base
        remaining -= base
    alloc[-1] = remaining
    return alloc


def split_dataset(labels: np.ndarray, spec: DatasetSpec) -> SplitIndices:
    """Disjoint, covering, per-class stratified split indices."""
    labels = np.asarray(labels)
    n = len(labels)
    fractions = spec.split.fractions
    if n < 10:
        raise ValueError(f"ratio splits need at least 10 examples, got {n}")
    classes = np.unique(labels)
    rng = np.random.default_rng(spec.seed)
    min_needed = len(fractions)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    counts = np.array([(labels == c).sum() for c in classes])
    if spec.split.kind == "ratio_8_1_1" and counts.min() < 3:
        raise ValueError(
            f"every class needs >= 3 examples for an 8:1:1 split, got counts {counts.tolist()}"
        )
    if counts.min() < min_needed:
        raise ValueError(f"class too small to cover all splits: counts {counts.tolist()}")
    alloc = _allocate(counts, fractions)
    for ci, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        start = 0
        for si in range(len(fractions)):
            take = alloc[si, ci]
            parts[si].append(idx[start:start + take])
            start += take
    splits = [np.sort(np.concatenate(p)) for p in parts]
    if len(fractions) == 2:
        splits.append(np.array([], dtype=np.int64))
    return SplitIndices(train=splits[0], val=splits[1], test=splits[2])


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    crop: int = 224
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    hflip_prob: float = 0.5
    direct_resize: bool = False  # skip the crop and squash straight to (crop, crop)


def resize_shortest_side(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize so the shortest side equals ``target`` (floor rule)."""
    h, w = img.shape[:2]
    if h <= w:
        new_h, new_w = target, (w * target) // h
    else:
        new_h, new_w = (h * target) // w, target
    return _bilinear(img, new_h, new_w)


def _bilinear(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (new_h, new_w) == (h, w):
        return img
    # Half-pixel-centre sampling grid.
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(img: np.ndarray, train_mode: bool, cfg: PreprocessConfig,
               rng: Optional[np.random.Generator] = None,
               force_flip: Optional[bool] = None) -> np.ndarray:
    """(H, W, 3) float image -> normalized (3, crop, crop) training slice.

    Resizes the shortest side to ``cfg.crop`` then center-crops (or
    squashes directly when ``direct_resize``); flips horizontally with
    probability ``hflip_prob`` in train mode only.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has an empty side: shape {img.shape}")
    c = cfg.crop
    if cfg.direct_resize:
        img = _bilinear(img, c, c)
    else:
        img = resize_shortest_side(img, c)
        h, w = img.shape[:2]
        top, left = (h - c) // 2, (w - c) // 2
        img = img[top:top + c, left:left + c]
    flip = force_flip
    if flip is None:
        flip = bool(train_mode and rng is not None and rng.random() < cfg.hflip_prob)
    if flip:
        img = img[:, ::-1, :]
    out = np.transpose(img, (2, 0, 1)).astype(np.float64, copy=True)
    mean = np.asarray(cfg.mean).reshape(3, 1, 1)
    std = np.asarray(cfg.std).reshape(3, 1, 1)
    return (out - mean) / std
