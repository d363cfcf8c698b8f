"""Directory-per-class datasets: scanning, splitting, decoding, batching,
and a synthetic color-class generator for desk-scale runs.

Layout is ``root/<class_name>/*.{png,jpg,jpeg,ppm}``. Class indices follow
the lexicographic order of the (merged) class names.
"""
from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .tensor import FLOAT, make_rng

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".ppm")
# guards floor(ratio * n) against ratios like 0.8 that are not exact in binary
_RATIO_SLACK = 1e-9


@dataclass
class DatasetIndex:
    root: str
    classes: list[str]
    entries: list[tuple[str, int]]

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, k in self.entries:
            counts[k] += 1
        return counts


@dataclass
class SplitManifest:
    seed: int
    ratio: float
    classes: list[str]
    train: list[str]
    test: list[str]
    merge_map: dict[str, str] = field(default_factory=dict)
    stratified: bool = True
    counts: dict = field(default_factory=dict)

    def label_of(self, relpath: str) -> int:
        source = Path(relpath).parts[0]
        name = self.merge_map.get(source, source)
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"{relpath}: class {name!r} is not in the manifest") from None

    def labels(self, split: str) -> np.ndarray:
        return np.array([self.label_of(p) for p in getattr(self, split)], dtype=np.int64)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratio": self.ratio,
            "stratified": self.stratified,
            "classes": self.classes,
            "merge_map": self.merge_map,
            "counts": self.counts,
            "train": self.train,
            "test": self.test,
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        try:
            doc = json.loads(text)
            return cls(seed=int(doc["seed"]), ratio=float(doc["ratio"]),
                       classes=list(doc["classes"]), train=list(doc["train"]),
                       test=list(doc["test"]), merge_map=dict(doc.get("merge_map", {})),
                       stratified=bool(doc.get("stratified", True)),
                       counts=dict(doc.get("counts", {})))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed split manifest: {exc}") from None

    @classmethod
    def load(cls, path) -> "SplitManifest":
        try:
            with open(path) as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from None


def load_merge_map(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read merge map {path}: {exc}") from None
    if not isinstance(doc, dict) or not all(isinstance(k, str) and isinstance(v, str)
                                            for k, v in doc.items()):
        raise DataError(f"merge map {path} must be a JSON object of source -> target names")
    return doc


def scan(root, merge_map: dict[str, str] | None = None) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    merge_map = dict(merge_map or {})
    sources = sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    unknown = sorted(set(merge_map) - set(sources))
    if unknown:
        raise DataError(f"merge map names unknown source classes: {unknown}")
    files = {}
    for src in sources:
        names = sorted(f.name for f in (root / src).iterdir()
                       if f.is_file() and f.suffix.lower() in IMAGE_EXTS)
        if not names:
            raise DataError(f"class directory {root / src} contains no images")
        files[src] = names
    classes = sorted({merge_map.get(s, s) for s in sources})
    if len(classes) < 2:
        raise DataError(f"need at least 2 classes under {root}, found {classes}")
    entries = []
    for src in sources:
        k = classes.index(merge_map.get(src, src))
        entries.extend((f"{src}/{name}", k) for name in files[src])
    entries.sort()
    return DatasetIndex(str(root), classes, entries)


def _n_train(ratio, n):
    return int(math.floor(ratio * n + _RATIO_SLACK))


def scan_and_split(root, ratio: float = 0.8, seed: int = 0,
                   merge_map: dict[str, str] | None = None, stratified: bool = True):
    """Scan ``root`` and partition it into train/test with a seeded shuffle.

    Stratified mode shuffles each class separately and sends
    ``floor(ratio * n_class)`` files to train.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    index = scan(root, merge_map)
    train, test = [], []
    if stratified:
        for k in range(len(index.classes)):
            paths = [p for p, c in index.entries if c == k]
            order = make_rng([seed, k]).permutation(len(paths))
            cut = _n_train(ratio, len(paths))
            train.extend(paths[i] for i in order[:cut])
            test.extend(paths[i] for i in order[cut:])
    else:
        paths = [p for p, _ in index.entries]
        order = make_rng([seed]).permutation(len(paths))
        cut = _n_train(ratio, len(paths))
        train = [paths[i] for i in order[:cut]]
        test = [paths[i] for i in order[cut:]]
    train.sort()
    test.sort()
    manifest = SplitManifest(seed, ratio, index.classes, train, test, dict(merge_map or {}),
                             stratified)
    tr, te = manifest.labels("train"), manifest.labels("test")
    manifest.counts = {
        name: {"train": int((tr == k).sum()), "test": int((te == k).sum())}
        for k, name in enumerate(index.classes)
    }
    manifest.counts["total"] = {"train": len(train), "test": len(test)}
    return index, manifest


def _resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    h, w = size
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(img[..., c]))
                        .resize((w, h), Image.Resampling.BILINEAR))
             for c in range(img.shape[2])]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def load_and_preprocess(path, size=None) -> np.ndarray:
    """Decode to RGB, scale by 1/255 and bilinear-resize to ``size`` (H, W) if needed."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    img = rgb.astype(FLOAT) / FLOAT(255)
    if size is not None and tuple(size) != img.shape[:2]:
        img = _resize_bilinear(img, tuple(size))
    return img.astype(FLOAT, copy=False)


def load_split(root, manifest: SplitManifest, split: str, size, skip_bad: bool = False):
    """Decode one side of a manifest into ``(images, integer labels, kept paths)``.

    With ``skip_bad`` undecodable files are dropped (and listed in the
    returned paths' complement); otherwise the first one raises DataError.
    """
    paths = getattr(manifest, split)
    if not paths:
        raise DataError(f"{split} split is empty")
    images, labels, kept = [], [], []
    for rel in paths:
        try:
            images.append(load_and_preprocess(os.path.join(root, rel), size))
        except DataError:
            if not skip_bad:
                raise
            continue
        labels.append(manifest.label_of(rel))
        kept.append(rel)
    if not images:
        raise DataError(f"no decodable images in the {split} split")
    return np.stack(images), np.array(labels, dtype=np.int64), kept


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of ``range(n)`` keyed by ``(seed, epoch)``."""
    return make_rng([seed, epoch]).permutation(n)


def batch_iter(images, labels, batch_size: int, seed: int, epoch: int):
    """Yield shuffled batches covering every sample exactly once, partial tail included."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    n = len(images)
    if n == 0:
        raise DataError("cannot batch an empty split")
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(images[idx], labels[idx], idx)


def class_hues(classes: int, hue_offset: float = 0.0) -> np.ndarray:
    return (hue_offset + np.arange(classes) / classes) % 1.0


def synth_images(classes: int, per_class: int, size=(32, 32), seed: int = 0,
                 hue_offset: float = 0.0, noise: float = 0.04, saturation=(0.6, 0.9),
                 value=(0.6, 0.9)):
    """In-memory synthetic set: one dominant hue per class plus Gaussian noise.

    Returns uint8 images ``(K*n, H, W, 3)`` and integer labels. Per image,
    the hue is jittered slightly and saturation/value vary, so classes are
    separable by mean color but not pixel-identical.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigError(f"need at least 1 image per class, got {per_class}")
    h, w = size
    hues = class_hues(classes, hue_offset)
    spacing = 1.0 / classes
    out = np.empty((classes * per_class, h, w, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for k, hue in enumerate(hues):
        rng = make_rng([seed, k])
        for i in range(per_class):
            jitter = rng.normal(0.0, spacing / 40)
            sat = rng.uniform(*saturation)
            val = rng.uniform(*value)
            base = np.array(colorsys.hsv_to_rgb((hue + jitter) % 1.0, sat, val))
            img = base + rng.normal(0.0, noise, size=(h, w, 3))
            out[k * per_class + i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return out, labels


def synth_generate(root, classes: int = 5, per_class: int = 40, size=(32, 32), seed: int = 0,
                   hue_offset: float = 0.0, noise: float = 0.04) -> list[str]:
    """Write a synthetic ``root/class_<k>/img_<i>.ppm`` tree; returns the class names."""
    images, _ = synth_images(classes, per_class, size, seed, hue_offset, noise)
    root = Path(root)
    names = [f"class_{k}" for k in range(classes)]
    try:
        for k, name in enumerate(names):
            d = root / name
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                Image.fromarray(images[k * per_class + i]).save(d / f"img_{i:04d}.ppm")
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset under {root}: {exc}") from None
    return names
