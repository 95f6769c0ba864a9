"""Procedural segmentation data, its on-disk layout and training-time
augmentation.

Images are ``3×S×S`` in ``[0, 1]`` on a textured background of class 0 with
overlaid rectangles, discs and stripes. Each class has a texture of its own
orientation and frequency; classes 1 and 2 share a color and differ only in
orientation, so telling them apart needs the neighbourhood of a pixel.
"""

import dataclasses
import json
import logging
import math
import os
from pathlib import Path
from typing import Any

import numpy as np

from . import layers
from .exceptions import ConfigError, FormatError, ShapeError
from .layers import IGNORE_INDEX
from .serialization import read_dgt, write_dgt
from .util import keyed_rng

logger = logging.getLogger(__name__)

PathLike = str | os.PathLike[str]

SPLITS = ("train", "val")
MANIFEST = "manifest.json"
DATASET_FORMAT = "dgcwnet-dataset-1"


@dataclasses.dataclass
class SynthSpec:
    image_size: int = 64
    class_count: int = 4
    shapes_min: int = 2
    shapes_max: int = 5
    noise: float = 0.05
    seed: int = 0
    train_size: int = 256
    val_size: int = 64

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8: {self.image_size}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2: {self.class_count}")
        if not 0 <= self.shapes_min <= self.shapes_max:
            raise ConfigError(
                f"Invalid shape count range [{self.shapes_min}, {self.shapes_max}]"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0: {self.noise}")
        if self.train_size < 0 or self.val_size < 0:
            raise ConfigError("Split sizes must be >= 0")

    def split_size(self, split: str) -> int:
        if split == "train":
            return self.train_size
        if split == "val":
            return self.val_size
        raise ConfigError(f"Unknown split {split!r}, expected one of {SPLITS}")

    def to_repr(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class Rect:
    label: int
    top: int
    left: int
    height: int
    width: int

    def mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        return (
            (yy >= self.top)
            & (yy < self.top + self.height)
            & (xx >= self.left)
            & (xx < self.left + self.width)
        )


@dataclasses.dataclass(frozen=True)
class Disc:
    label: int
    cy: float
    cx: float
    radius: float

    def mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        # pixel centers
        return (yy + 0.5 - self.cy) ** 2 + (xx + 0.5 - self.cx) ** 2 <= self.radius**2


@dataclasses.dataclass(frozen=True)
class Stripe:
    """Band of ``width`` pixels around the line at ``offset`` along ``angle``"""

    label: int
    offset: float
    width: float
    angle: float

    def mask(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        along = (xx + 0.5) * math.cos(self.angle) + (yy + 0.5) * math.sin(self.angle)
        return np.abs(along - self.offset) < self.width / 2


Shape = Rect | Disc | Stripe


def class_color(label: int) -> np.ndarray:
    if label == 0:
        return np.array([0.30, 0.30, 0.35])
    if label in (1, 2):
        return np.array([0.80, 0.45, 0.20])
    phase = label * 0.618034
    return 0.5 + 0.35 * np.cos(2 * np.pi * (phase + np.array([0.0, 1 / 3, 2 / 3])))


def class_texture(label: int, size: int) -> np.ndarray:
    """``3×size×size`` texture of one class"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = (label % 4) * np.pi / 4 if label else np.pi / 8
    if label == 2:
        angle = np.pi / 2
    freq = 3.0 + 2.0 * (label % 3)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) / size)
    shade = 0.7 + 0.3 * wave
    return class_color(label)[:, None, None] * shade[None]


def sample_shapes(spec: SynthSpec, rng: np.random.Generator) -> list[Shape]:
    s = spec.image_size
    count = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    shapes: list[Shape] = []
    for _ in range(count):
        label = int(rng.integers(1, spec.class_count))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            height = int(rng.integers(s // 8, s // 2 + 1))
            width = int(rng.integers(s // 8, s // 2 + 1))
            top = int(rng.integers(0, s - height + 1))
            left = int(rng.integers(0, s - width + 1))
            shapes.append(Rect(label, top, left, height, width))
        elif kind == 1:
            radius = float(rng.uniform(s / 10, s / 4))
            cy, cx = (float(v) for v in rng.uniform(0, s, size=2))
            shapes.append(Disc(label, cy, cx, radius))
        else:
            angle = float(rng.uniform(0, np.pi))
            offset = float(rng.uniform(0, s))
            width = float(rng.uniform(s / 16, s / 6))
            shapes.append(Stripe(label, offset, width, angle))
    return shapes


def render(
    spec: SynthSpec, shapes: list[Shape], rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``shapes`` in order, later shapes on top

    :param spec: Image size, class count and noise level
    :param shapes: Shapes to draw
    :param rng: Noise source; required when ``spec.noise`` is positive
    :return: ``3×S×S`` f32 image and ``S×S`` int64 labels
    """
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    labels = np.zeros((s, s), dtype=np.int64)
    for shape in shapes:
        if not 0 <= shape.label < spec.class_count:
            raise ConfigError(f"Shape label {shape.label} outside the class range")
        labels[shape.mask(yy, xx)] = shape.label

    image = np.zeros((3, s, s))
    for label in np.unique(labels):
        image += class_texture(int(label), s) * (labels == label)[None]
    if spec.noise > 0:
        if rng is None:
            raise ConfigError("Rendering with noise needs a generator")
        image += rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def gen_synthetic(
    spec: SynthSpec, split: str, index: int
) -> tuple[np.ndarray, np.ndarray]:
    """One image/label pair, a pure function of ``(spec.seed, split, index)``"""
    spec.split_size(split)
    rng = keyed_rng(spec.seed, f"synth:{split}", index)
    return render(spec, sample_shapes(spec, rng), rng)


@dataclasses.dataclass
class SegBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.labels.shape != (
            self.images.shape[0],
            *self.images.shape[2:],
        ):
            raise ShapeError(
                f"Images {self.images.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.labels == IGNORE_INDEX

    def take(self, indices: np.ndarray | list[int]) -> "SegBatch":
        return SegBatch(self.images[indices], self.labels[indices])

    @classmethod
    def concat(cls, batches: list["SegBatch"]) -> "SegBatch":
        return cls(
            np.concatenate([b.images for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


def image_path(data_dir: PathLike, split: str, index: int) -> Path:
    return Path(data_dir) / f"img_{split}_{index}.dgt"


def label_path(data_dir: PathLike, split: str, index: int) -> Path:
    return Path(data_dir) / f"lbl_{split}_{index}.dgt"


def write_dataset(spec: SynthSpec, data_dir: PathLike) -> Path:
    """Generate every split into ``data_dir`` with a JSON manifest

    :return: The manifest path
    """
    target = Path(data_dir)
    target.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in SPLITS:
        size = spec.split_size(split)
        for index in range(size):
            image, labels = gen_synthetic(spec, split, index)
            write_dgt(image_path(target, split, index), image)
            write_dgt(label_path(target, split, index), labels.astype(np.float32))
        counts[split] = size
        logger.info(f"Wrote {size} {split} pairs to {target}")
    manifest = {"format": DATASET_FORMAT, "spec": spec.to_repr(), "counts": counts}
    path = target / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(data_dir: PathLike) -> dict[str, Any]:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"No dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path} is not a {DATASET_FORMAT} manifest")
    return manifest


def load_split(data_dir: PathLike, split: str) -> SegBatch:
    """All pairs of ``split``; ``trainval`` joins train and val"""
    if split == "trainval":
        return SegBatch.concat([load_split(data_dir, s) for s in SPLITS])
    manifest = read_manifest(data_dir)
    if split not in manifest["counts"]:
        raise ConfigError(f"Dataset at {data_dir} has no {split!r} split")
    count = int(manifest["counts"][split])
    images, labels = [], []
    for index in range(count):
        images.append(read_dgt(image_path(data_dir, split, index)))
        raw = read_dgt(label_path(data_dir, split, index))
        labels.append(np.rint(raw).astype(np.int64))
    size = int(manifest["spec"]["image_size"])
    if not count:
        return SegBatch(np.zeros((0, 3, size, size)), np.zeros((0, size, size), int))
    logger.debug(f"Loaded {count} {split} pairs from {data_dir}")
    return SegBatch(np.stack(images), np.stack(labels))


@dataclasses.dataclass
class AugmentSpec:
    crop: int = 64
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self) -> None:
        if self.crop < 1:
            raise ConfigError(f"crop must be positive: {self.crop}")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(
                f"Invalid scale range [{self.scale_min}, {self.scale_max}]"
            )
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1]: {self.flip_prob}")


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``C×H×W`` array, align-corners off"""
    h, w = image.shape[-2:]
    if (out_h, out_w) == (h, w):
        return image
    mh = layers.bilinear_matrix(out_h, h)
    mw = layers.bilinear_matrix(out_w, w)
    return ((mh @ image) @ mw.T).astype(image.dtype)


def hflip(image: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return image[..., ::-1].copy(), labels[..., ::-1].copy()


def augment(
    image: np.ndarray,
    labels: np.ndarray,
    spec: AugmentSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random scale, horizontal flip and crop with ignore padding

    Draws scale, flip and the two crop offsets in that order, whatever the
    outcome, so a generator key always maps to the same transform.
    """
    scale = float(rng.uniform(spec.scale_min, spec.scale_max))
    flip = bool(rng.uniform() < spec.flip_prob)
    u_top, u_left = (float(v) for v in rng.uniform(size=2))

    h, w = labels.shape
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    image = resize_image(image, sh, sw)
    labels = layers.resize_nearest(labels, sh, sw)
    if flip:
        image, labels = hflip(image, labels)

    ph, pw = max(sh, spec.crop), max(sw, spec.crop)
    if (ph, pw) != (sh, sw):
        image = np.pad(image, ((0, 0), (0, ph - sh), (0, pw - sw)))
        labels = np.pad(
            labels,
            ((0, ph - sh), (0, pw - sw)),
            constant_values=spec.ignore_index,
        )
    top = min(int(u_top * (ph - spec.crop + 1)), ph - spec.crop)
    left = min(int(u_left * (pw - spec.crop + 1)), pw - spec.crop)
    return (
        image[:, top : top + spec.crop, left : left + spec.crop],
        labels[top : top + spec.crop, left : left + spec.crop],
    )


def augment_batch(
    batch: SegBatch, spec: AugmentSpec, seed: int, first_index: int
) -> SegBatch:
    """Augment every pair; pair ``k`` uses the stream ``first_index + k``"""
    images, labels = [], []
    for k in range(len(batch)):
        rng = keyed_rng(seed, "augment", first_index + k)
        image, label = augment(batch.images[k], batch.labels[k], spec, rng)
        images.append(image)
        labels.append(label)
    return SegBatch(np.stack(images), np.stack(labels))
