"""Dataset manifests, image preprocessing and stratified split planning."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, DataError
from .rng import make_rng

logger = logging.getLogger(__name__)


class BackgroundWarning(UserWarning):
    """Background removal found no usable foreground and left the image as is."""


@dataclass
class ManifestEntry:
    image_path: str
    label: str


@dataclass
class DatasetManifest:
    entries: list
    root: Path = field(default_factory=Path)

    @property
    def class_names(self) -> list:
        return sorted({e.label for e in self.entries})

    @property
    def counts(self) -> dict:
        c = Counter(e.label for e in self.entries)
        return {name: c[name] for name in self.class_names}

    @property
    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.class_names)}
        return np.array([index[e.label] for e in self.entries], dtype=np.int64)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> DatasetManifest:
    """Read a ``path,label`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = []
    seen = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise DataError(f"{path}:1: header must be 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            img, label = row[0].strip(), row[1].strip()
            if not img:
                raise DataError(f"{path}:{lineno}: empty path")
            if not label:
                raise DataError(f"{path}:{lineno}: empty label")
            if img in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {img!r} (first seen on line {seen[img]})")
            seen[img] = lineno
            entries.append(ManifestEntry(img, label))
    return DatasetManifest(entries, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for e in manifest.entries:
            w.writerow([e.image_path, e.label])


# -- preprocessing -----------------------------------------------------------


@dataclass
class ImageRecord:
    pixels: np.ndarray
    source: str
    label: int = -1


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels[..., 0] * 0.299 + pixels[..., 1] * 0.587 + pixels[..., 2] * 0.114


def remove_background(pixels: np.ndarray, luminance_threshold: float = 0.1) -> np.ndarray:
    """Black out everything outside the largest bright connected component.

    The component is found on the thresholded luminance mask with
    8-connectivity and its interior holes are kept.  When no component covers
    at least 1% of the image, the input is returned unchanged and a
    :class:`BackgroundWarning` is issued.
    """
    if not 0.0 < luminance_threshold < 1.0:
        raise ValueError("luminance_threshold must be in (0, 1)")
    mask = luminance(pixels) > luminance_threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n:
        sizes = np.bincount(labels.ravel())[1:]
        best = int(sizes.argmax()) + 1
        if sizes[best - 1] >= 0.01 * mask.size:
            keep = ndimage.binary_fill_holes(labels == best)
            return np.where(keep[..., None], pixels, 0).astype(pixels.dtype)
    warnings.warn("no foreground component covers 1% of the image; left unchanged", BackgroundWarning)
    return pixels


def _to_rgb(img: Image.Image) -> np.ndarray:
    if img.mode in ("RGBA", "LA", "P", "PA") or "transparency" in img.info:
        rgba = np.asarray(img.convert("RGBA"), dtype=np.float64)
        return rgba[..., :3] * (rgba[..., 3:4] / 255.0)
    if img.mode in ("L", "I", "I;16", "F", "1"):
        g = np.asarray(img.convert("L"), dtype=np.float64)
        return np.repeat(g[..., None], 3, axis=2)
    return np.asarray(img.convert("RGB"), dtype=np.float64)


def letterbox(rgb: np.ndarray, size: tuple) -> np.ndarray:
    """Aspect-preserving bilinear resize onto a black ``size`` (H, W) canvas."""
    th, tw = size
    h, w = rgb.shape[:2]
    if (h, w) == (th, tw):
        return rgb
    scale = min(th / h, tw / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    chans = [np.asarray(Image.fromarray(rgb[..., c].astype(np.float32), mode="F")
                        .resize((nw, nh), Image.BILINEAR)) for c in range(3)]
    resized = np.stack(chans, axis=-1)
    canvas = np.zeros((th, tw, 3), dtype=np.float64)
    top, left = (th - nh) // 2, (tw - nw) // 2
    canvas[top:top + nh, left:left + nw] = resized
    return canvas


def preprocess(source, size=(224, 224), mask_background: bool = False,
               luminance_threshold: float = 0.1, label: int = -1) -> ImageRecord:
    """Decode an image file into a float32 ``H x W x 3`` array in [0, 1].

    Grayscale is replicated to three channels and alpha is composited over
    black.  Optional background masking runs before the letterbox resize.
    """
    try:
        with Image.open(source) as img:
            img.load()
            rgb = _to_rgb(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {source}: {exc}") from None
    rgb = rgb / 255.0
    if mask_background:
        rgb = remove_background(rgb, luminance_threshold)
    out = np.clip(letterbox(rgb, tuple(size)), 0.0, 1.0).astype(np.float32)
    return ImageRecord(out, str(source), label)


@dataclass
class ImageSet:
    images: np.ndarray
    labels: np.ndarray
    class_names: list

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], self.class_names)


def load_images(manifest: DatasetManifest, size=(224, 224), mask_background: bool = False) -> ImageSet:
    labels = manifest.labels
    arr = np.stack([preprocess(manifest.resolve(e), size, mask_background).pixels for e in manifest.entries])
    return ImageSet(arr, labels, manifest.class_names)


# -- splits ------------------------------------------------------------------


@dataclass
class SplitPlan:
    mode: str
    seed: int
    n: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    val: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    k: int = 0

    def fold_indices(self, f: int) -> tuple:
        """(training indices, held-out indices) for fold ``f``."""
        ids = np.asarray(self.folds)
        return np.flatnonzero(ids != f).tolist(), np.flatnonzero(ids == f).tolist()

    def to_json(self) -> str:
        d = {"mode": self.mode, "seed": self.seed, "n": self.n}
        if self.mode == "holdout":
            d.update(train=self.train, test=self.test, val=self.val)
        else:
            d.update(k=self.k, folds=self.folds)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        return cls(**json.loads(text))


def _labels_of(obj) -> np.ndarray:
    if isinstance(obj, DatasetManifest):
        return obj.labels
    if isinstance(obj, ImageSet):
        return obj.labels
    return np.asarray(obj)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(data, test_fraction: float = 0.1, seed: int = 0, val_fraction: float = 0.0) -> SplitPlan:
    """Per-class shuffled holdout split.

    Each class of size ``n`` contributes ``round(n * test_fraction)`` items
    (half rounds up) to the test set, at least one when ``n >= 2``.  A
    validation carve-out of the remainder follows the same rule.
    """
    labels = _labels_of(data)
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    train, test, val = [], [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[make_rng(seed, "split", int(c)).permutation(len(idx))]
        nt = _take_count(len(idx), test_fraction)
        test.extend(idx[:nt].tolist())
        rest = idx[nt:]
        nv = _take_count(len(rest), val_fraction) if val_fraction > 0 else 0
        val.extend(rest[:nv].tolist())
        train.extend(rest[nv:].tolist())
    return SplitPlan("holdout", seed, len(labels), sorted(train), sorted(test), sorted(val))


def _take_count(n: int, fraction: float) -> int:
    k = _round_half_up(n * fraction)
    if n >= 2:
        k = min(max(k, 1), n - 1)
    else:
        k = 0
    return k


def make_folds(data, k: int = 5, seed: int = 0, class_names: Optional[list] = None) -> SplitPlan:
    """Stratified k-fold assignment by round-robin over each shuffled class.

    Every class must have at least ``k`` members.  The round-robin start
    rotates between classes so global fold sizes stay balanced too.
    """
    labels = _labels_of(data)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if class_names is None and isinstance(data, (DatasetManifest, ImageSet)):
        class_names = data.class_names
    folds = np.full(len(labels), -1, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            name = class_names[c] if class_names is not None else c
            raise ConfigError(f"class {name!r} has {len(idx)} members, fewer than k={k}")
        idx = idx[make_rng(seed, "folds", int(c)).permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    return SplitPlan("kfold", seed, len(labels), folds=folds.tolist(), k=k)
