"""Segmentation scores and feature diagnostics.

Accumulators here are mergeable: integer confusion counts and per-class feature
sums combine by addition in any order.
"""

import dataclasses
import logging
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from . import layers
from . import tensor as T
from .exceptions import ConfigError, LabelError, ShapeError
from .layers import IGNORE_INDEX
from .tensor import Tensor

logger = logging.getLogger(__name__)

Net = Callable[[Tensor], Tensor]

MS_SCALES = (0.75, 1.0, 1.25, 1.5)
SIZE_MULTIPLE = 8


@dataclasses.dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions"""

    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k) or k < 2:
            raise ShapeError(
                f"Confusion matrix must be K×K with K >= 2: {self.counts.shape}"
            )
        if np.any(self.counts < 0):
            raise ValueError("Confusion counts must be non-negative")

    @classmethod
    def empty(cls, class_count: int) -> "ConfusionMatrix":
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(
        self,
        predictions: np.ndarray,
        labels: np.ndarray,
        ignore_index: int = IGNORE_INDEX,
    ) -> None:
        """Count the non-ignored pixels of one prediction/label pair"""
        predictions = np.asarray(predictions).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        if predictions.shape != labels.shape:
            raise ShapeError(
                f"{predictions.size} predictions for {labels.size} labels"
            )
        valid = labels != ignore_index
        if not np.any(valid):
            return
        classes = np.arange(self.class_count)
        self.counts = self.counts + confusion_matrix(
            labels[valid], predictions[valid], labels=classes
        ).astype(np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Mean and per-class intersection over union

    Classes absent from both truth and prediction get NaN and are left out of
    the mean.
    """
    inter = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - inter
    per_class = np.full(cm.class_count, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    mean = float(per_class[present].mean()) if np.any(present) else float("nan")
    return mean, per_class


def scaled_size(size: int, scale: float) -> int:
    return max(SIZE_MULTIPLE, int(round(size * scale / SIZE_MULTIPLE)) * SIZE_MULTIPLE)


def ms_flip_infer(
    image: Tensor,
    net: Net,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
) -> Tensor:
    """Sum of logits over rescaled and optionally mirrored copies

    Each copy is resized to ``scale`` times the input (rounded to a multiple of
    8), run through ``net``, resized back and un-mirrored.

    :param image: ``N×3×H×W``
    :param net: Maps an image batch to ``N×K×h×w`` logits at its resolution
    :param scales: Resize factors
    :param flip: Also run left-right mirrored copies
    :return: ``N×K×H×W`` summed logits
    """
    if not scales:
        raise ConfigError("ms_flip_infer needs at least one scale")
    h, w = image.shape[2:]
    total: Tensor | None = None
    with T.no_grad():
        for scale in scales:
            resized = layers.resample_bilinear(
                image, scaled_size(h, scale), scaled_size(w, scale)
            )
            outputs = [net(resized)]
            if flip:
                outputs.append(T.flip(net(T.flip(resized, 3)), 3))
            for logits in outputs:
                logits = layers.resample_bilinear(logits, h, w)
                total = logits if total is None else total + logits
    assert total is not None
    return total


def evaluate(
    net: Net,
    images: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
    batch_size: int = 8,
) -> tuple[ConfusionMatrix, np.ndarray]:
    """Confusion matrix and argmax predictions over a whole split"""
    cm = ConfusionMatrix.empty(class_count)
    predictions = np.zeros(labels.shape, dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        stop = start + batch_size
        logits = ms_flip_infer(Tensor(images[start:stop]), net, scales, flip)
        predictions[start:stop] = logits.data.argmax(axis=1)
        cm.update(predictions[start:stop], labels[start:stop])
    return cm, predictions


@dataclasses.dataclass
class ClassStats:
    class_avg: np.ndarray
    counts: np.ndarray
    variance: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def mean_variance(self) -> float:
        return float(self.variance.mean())


@dataclasses.dataclass
class ClassFeatureSums:
    """Running per-class feature sums and pixel counts"""

    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, class_count: int, channels: int) -> "ClassFeatureSums":
        return cls(
            np.zeros((class_count, channels)), np.zeros(class_count, dtype=np.int64)
        )

    def update(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        ignore_index: int = IGNORE_INDEX,
    ) -> None:
        """Add one ``N×D×h×w`` feature batch; labels are resized to ``h×w``"""
        n, d, h, w = features.shape
        if d != self.sums.shape[1]:
            raise ShapeError(f"Expected {self.sums.shape[1]} channels, got {d}")
        aligned = layers.resize_nearest(np.asarray(labels), h, w).reshape(-1)
        flat = np.asarray(features, dtype=np.float64).transpose(0, 2, 3, 1)
        flat = flat.reshape(-1, d)
        valid = aligned != ignore_index
        if np.any((aligned[valid] < 0) | (aligned[valid] >= len(self.counts))):
            raise LabelError("Labels outside the class range")
        np.add.at(self.sums, aligned[valid], flat[valid])
        self.counts += np.bincount(aligned[valid], minlength=len(self.counts))

    def __add__(self, other: "ClassFeatureSums") -> "ClassFeatureSums":
        return ClassFeatureSums(self.sums + other.sums, self.counts + other.counts)

    def finish(self) -> ClassStats:
        present = self.counts > 0
        if present.sum() < 2:
            raise LabelError(
                "Class-wise variance needs two present classes, "
                f"got {int(present.sum())}"
            )
        avg = np.full(self.sums.shape, np.nan)
        avg[present] = self.sums[present] / self.counts[present, None]
        variance = avg[present].var(axis=0)
        absent = np.flatnonzero(~present).tolist()
        if absent:
            logger.warning(f"Classes {absent} have no pixels and are left out")
        return ClassStats(class_avg=avg, counts=self.counts.copy(), variance=variance)


def class_average_features(
    features: Iterable[np.ndarray],
    labels: Iterable[np.ndarray],
    class_count: int,
    ignore_index: int = IGNORE_INDEX,
) -> ClassStats:
    """Masked per-class mean feature over a dataset and the per-channel population
    variance of those means across present classes

    :param features: ``N×D×h×w`` batches
    :param labels: Matching ``N×H×W`` label batches
    """
    acc: ClassFeatureSums | None = None
    for feats, lbls in zip(features, labels, strict=True):
        feats = np.asarray(feats)
        if acc is None:
            acc = ClassFeatureSums.empty(class_count, feats.shape[1])
        acc.update(feats, lbls, ignore_index)
    if acc is None:
        raise ShapeError("No feature batches given")
    return acc.finish()


def uniform_edges(values: np.ndarray, bins: int = 8) -> np.ndarray:
    """``bins`` equal-width intervals over the observed range"""
    if bins < 1:
        raise ConfigError(f"bins must be positive: {bins}")
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)


def variance_histogram(stats: ClassStats, bin_edges: Sequence[float]) -> np.ndarray:
    """Channel counts per variance interval; intervals are left-closed except the
    last, which is closed. Values outside the edges land in the outer bins, so
    the counts always sum to the channel count."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError(f"Bin edges must be strictly increasing: {edges}")
    clamped = np.clip(stats.variance, edges[0], edges[-1])
    outside = int(np.count_nonzero(clamped != stats.variance))
    if outside:
        logger.warning(
            f"{outside} channel variances fall outside "
            f"{edges[0]:g}..{edges[-1]:g}, counted in the outer bins"
        )
    counts, _ = np.histogram(clamped, bins=edges)
    return counts.astype(np.int64)
