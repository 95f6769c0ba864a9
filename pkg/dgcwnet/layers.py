"""Parameterized building blocks: 1×1 linear maps, dilated convolutions, batch
normalization, pooling, bilinear resampling and the pixel-wise cross entropy.

Feature maps are ``N×C×...`` with the channel axis at position 1.
"""

import dataclasses
import logging
from functools import lru_cache

import numpy as np

from . import tensor as T
from .exceptions import LabelError, ShapeError, raise_if_nonfinite
from .params import Params, ones_init, uniform_init, zeros_init
from .tensor import Tensor

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255


@dataclasses.dataclass
class LinearParams(Params):
    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"Linear weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        raise_if_nonfinite(self.weight.data, "linear weight")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        seed: int,
        name: str,
        zero: bool = False,
    ) -> "LinearParams":
        shape = (out_channels, in_channels)
        if zero:
            weight = zeros_init(shape)
        else:
            weight = uniform_init(shape, in_channels, seed, name)
        return cls(weight=weight, bias=zeros_init((out_channels,)))


@dataclasses.dataclass
class Conv2dParams(Params):
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"Conv weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeError(
                f"Invalid conv geometry: stride {self.stride}, "
                f"padding {self.padding}, dilation {self.dilation}"
            )
        raise_if_nonfinite(self.weight.data, "conv weight")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        seed: int,
        name: str,
        stride: int = 1,
        dilation: int = 1,
    ) -> "Conv2dParams":
        """Same-size padded convolution (at stride 1) with uniform fan-in init"""
        shape = (out_channels, in_channels, kernel, kernel)
        return cls(
            weight=uniform_init(shape, in_channels * kernel * kernel, seed, name),
            bias=zeros_init((out_channels,)),
            stride=stride,
            padding=dilation * (kernel - 1) // 2,
            dilation=dilation,
        )


@dataclasses.dataclass
class BatchNormParams(Params):
    scale: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5

    decays = False

    def __post_init__(self) -> None:
        if np.any(self.running_var.data < 0):
            raise ShapeError("Running variance must be non-negative")

    @classmethod
    def init(
        cls, channels: int, momentum: float = 0.1, eps: float = 1e-5
    ) -> "BatchNormParams":
        return cls(
            scale=ones_init((channels,)),
            shift=zeros_init((channels,)),
            running_mean=zeros_init((channels,), trainable=False),
            running_var=ones_init((channels,), trainable=False),
            momentum=momentum,
            eps=eps,
        )


def linear_1x1(x: Tensor, p: LinearParams) -> Tensor:
    """Per-pixel affine map over the channel axis of an ``N×C×...`` tensor"""
    if x.ndim < 2 or x.shape[1] != p.in_channels:
        raise ShapeError(
            f"linear_1x1 expects {p.in_channels} input channels, got shape {x.shape}"
        )
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    flat = x.data.reshape(n, c, -1)
    w = p.weight.data
    out = (w @ flat + p.bias.data[:, None]).reshape((n, p.out_channels, *spatial))

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_flat = g.reshape(n, p.out_channels, -1)
        gx = (w.T @ g_flat).reshape(x.shape)
        gw = np.einsum("nos,ncs->oc", g_flat, flat)
        gb = g_flat.sum(axis=(0, 2))
        return gx, gw, gb

    return T.record("linear_1x1", out, (x, p.weight, p.bias), _backward)


def _conv_extent(
    size: int, kernel: int, stride: int, padding: int, dilation: int
) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Dilated, strided 2-D cross-correlation"""
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(
            f"conv2d expects N×{p.in_channels}×H×W input, got shape {x.shape}"
        )
    n, c, h, w = x.shape
    o, _, kh, kw = p.weight.shape
    s, pad, d = p.stride, p.padding, p.dilation
    oh = _conv_extent(h, kh, s, pad, d)
    ow = _conv_extent(w, kw, s, pad, d)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    windows = []
    for ki in range(kh):
        for kj in range(kw):
            rows = slice(ki * d, ki * d + s * (oh - 1) + 1, s)
            colsl = slice(kj * d, kj * d + s * (ow - 1) + 1, s)
            cols[:, :, ki, kj] = padded[:, :, rows, colsl]
            windows.append((ki, kj, rows, colsl))
    cols_flat = cols.reshape(n, c * kh * kw, oh * ow)
    weight = p.weight.data.reshape(o, -1)
    out = (weight @ cols_flat + p.bias.data[:, None]).reshape(n, o, oh, ow)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_flat = g.reshape(n, o, oh * ow)
        gw = np.einsum("nol,nkl->ok", g_flat, cols_flat).reshape(p.weight.shape)
        gb = g_flat.sum(axis=(0, 2))
        gcols = (weight.T @ g_flat).reshape(n, c, kh, kw, oh, ow)
        gpad = np.zeros_like(padded)
        for ki, kj, rows, colsl in windows:
            gpad[:, :, rows, colsl] += gcols[:, :, ki, kj]
        gx = gpad[:, :, pad : pad + h, pad : pad + w]
        return gx, gw, gb

    return T.record("conv2d", out, (x, p.weight, p.bias), _backward)


@lru_cache(maxsize=256)
def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Interpolation weights, ``out_size × in_size``, half-pixel centers
    (align-corners off); source coordinates below zero clamp to the first pixel"""
    if out_size < 1 or in_size < 1:
        raise ShapeError(f"Resampling extents must be positive: {out_size}, {in_size}")
    mat = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for dst in range(out_size):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[dst, i0] += 1.0 - frac
        mat[dst, i1] += frac
    mat.flags.writeable = False
    return mat


@lru_cache(maxsize=256)
def pooling_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Adaptive average pooling weights; bin ``i`` spans
    ``[floor(i*in/out), ceil((i+1)*in/out))``"""
    if out_size < 1 or in_size < 1:
        raise ShapeError(f"Pooling extents must be positive: {out_size}, {in_size}")
    mat = np.zeros((out_size, in_size))
    for i in range(out_size):
        lo = (i * in_size) // out_size
        hi = -((-(i + 1) * in_size) // out_size)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    mat.flags.writeable = False
    return mat


def _separable(name: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects an N×C×H×W tensor, got shape {x.shape}")
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = (mh @ x.data) @ mw.T

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (mh.T @ (g @ mw),)

    return T.record(name, out, (x,), _backward)


def resample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes, align-corners off"""
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return x
    return _separable(
        "resample_bilinear", x, bilinear_matrix(out_h, h), bilinear_matrix(out_w, w)
    )


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return x
    return _separable(
        "adaptive_avg_pool", x, pooling_matrix(out_h, h), pooling_matrix(out_w, w)
    )


def pooled_extent(size: int, ratio: int) -> int:
    return max(1, int(round(size / ratio)))


def avg_pool(x: Tensor, ratio: int) -> Tensor:
    """Average pooling with kernel = stride = ``ratio``; extents that do not divide
    evenly pool to the rounded size with adaptive bins"""
    h, w = x.shape[-2:]
    return adaptive_avg_pool(x, pooled_extent(h, ratio), pooled_extent(w, ratio))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N×C×H×W, got shape {x.shape}")
    return T.reduce("mean", x, (2, 3), keepdims=True)


def batchnorm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Batch normalization over every axis but the channel axis

    Training mode normalizes with the batch mean and population variance and
    moves the running statistics by ``momentum``; eval mode uses the running
    statistics.
    """
    if x.ndim < 2 or x.shape[1] != p.scale.shape[0]:
        raise ShapeError(
            f"batchnorm expects {p.scale.shape[0]} channels, got shape {x.shape}"
        )
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)
    bshape = (1, -1) + (1,) * (x.ndim - 2)

    if training:
        mean = T.reduce("mean", x, axes, keepdims=True)
        var = T.reduce("variance", x, axes, keepdims=True)
        m = p.momentum
        p.running_mean = Tensor(
            (1 - m) * p.running_mean.data + m * mean.data.reshape(-1), dtype=x.dtype
        )
        p.running_var = Tensor(
            (1 - m) * p.running_var.data + m * var.data.reshape(-1), dtype=x.dtype
        )
    else:
        mean = Tensor(p.running_mean.data.reshape(bshape), dtype=x.dtype)
        var = Tensor(p.running_var.data.reshape(bshape), dtype=x.dtype)

    std = T.elementwise("sqrt", var + p.eps)
    xhat = (x - mean) / std
    return xhat * T.reshape(p.scale, bshape) + T.reshape(p.shift, bshape)


def _check_labels(labels: np.ndarray, classes: int, ignore_index: int) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= classes))
    if np.any(bad):
        raise LabelError(
            f"{int(bad.sum())} labels outside [0, {classes}) and not {ignore_index}"
        )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    ignore_index: int = IGNORE_INDEX,
    keep: np.ndarray | None = None,
) -> Tensor:
    """Mean negative log-likelihood over the pixels that count

    :param logits: ``N×K×H×W``
    :param labels: ``N×H×W`` integer labels
    :param ignore_index: Label value excluded from the loss
    :param keep: Optional ``N×H×W`` mask further restricting the counted pixels
    :return: Scalar loss, 0 when no pixel counts
    """
    labels = np.asarray(labels).astype(np.int64)
    if logits.ndim < 2 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"Labels {labels.shape} do not match logits {logits.shape}")
    classes = logits.shape[1]
    _check_labels(labels, classes, ignore_index)

    valid = labels != ignore_index
    if keep is not None:
        valid &= np.asarray(keep, dtype=bool)
    count = int(valid.sum())
    safe = np.where(valid, labels, 0)

    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    total = -(picked * valid).sum()
    loss = np.asarray(total / count if count else 0.0, dtype=logits.dtype)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not count:
            return (np.zeros_like(logp),)
        onehot = np.zeros_like(logp)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((np.exp(logp) - onehot) * (valid[:, None] * (g / count)),)

    return T.record("cross_entropy", loss, (logits,), _backward)


def correct_class_probs(
    logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX
) -> np.ndarray:
    """Softmax probability of the labelled class per pixel, NaN where ignored"""
    labels = np.asarray(labels).astype(np.int64)
    _check_labels(labels, logits.shape[1], ignore_index)
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    probs = np.exp(np.take_along_axis(_log_softmax(logits.data), safe[:, None], axis=1))
    return np.where(valid, probs[:, 0], np.nan)


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the two trailing axes of an integer map"""
    h, w = labels.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return labels[..., rows[:, None], cols[None, :]]
