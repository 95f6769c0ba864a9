"""Comparison context modules and the residual context-operator skeleton.

Every module here maps ``N×C×H×W`` features to the same shape.
"""

import dataclasses
import logging
from collections.abc import Callable

from . import layers
from . import tensor as T
from .dgcw import (
    DgcwParams,
    DownsampleMode,
    channel_distance,
    downsample,
    fold,
    normalize_weights,
    pair_map,
    project_pixels,
    weight_values,
)
from .exceptions import ShapeError
from .layers import LinearParams
from .params import Params
from .tensor import Tensor

logger = logging.getLogger(__name__)

PairFn = Callable[[Tensor, Tensor], Tensor]
CombineFn = Callable[[Tensor, Tensor], Tensor]
OutputFn = Callable[[Tensor], Tensor]


@dataclasses.dataclass
class ConvContextParams(Params):
    """DGCW with the channel weighting removed: values go straight into ``g``"""

    wv: LinearParams
    g1: LinearParams
    g2: LinearParams
    downsample_ratio: int = 4
    downsample_mode: DownsampleMode = "avg"

    @classmethod
    def init(
        cls,
        channels: int,
        seed: int,
        name: str = "context",
        hidden: int = 0,
        downsample_ratio: int = 4,
        downsample_mode: DownsampleMode = "avg",
        zero_init_g2: bool = True,
    ) -> "ConvContextParams":
        hidden = hidden or channels
        return cls(
            wv=LinearParams.init(channels, channels, seed, f"{name}.wv"),
            g1=LinearParams.init(channels, hidden, seed, f"{name}.g1"),
            g2=LinearParams.init(
                hidden, channels, seed, f"{name}.g2", zero=zero_init_g2
            ),
            downsample_ratio=downsample_ratio,
            downsample_mode=downsample_mode,
        )


@dataclasses.dataclass
class GapParams(Params):
    proj: LinearParams

    @classmethod
    def init(cls, channels: int, seed: int, name: str = "context") -> "GapParams":
        return cls(proj=LinearParams.init(channels, channels, seed, f"{name}.proj"))


@dataclasses.dataclass
class SeParams(Params):
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(
        cls, channels: int, seed: int, name: str = "context", reduction: int = 4
    ) -> "SeParams":
        squeezed = max(1, channels // reduction)
        return cls(
            fc1=LinearParams.init(channels, squeezed, seed, f"{name}.fc1"),
            fc2=LinearParams.init(squeezed, channels, seed, f"{name}.fc2"),
        )


@dataclasses.dataclass
class NonLocalParams(Params):
    """Embedded-Gaussian self-attention; ``downsample_ratio`` 1 keeps the input
    size, larger ratios attend over a pooled map"""

    theta: LinearParams
    phi: LinearParams
    value: LinearParams
    out: LinearParams
    downsample_ratio: int = 1
    downsample_mode: DownsampleMode = "avg"

    @classmethod
    def init(
        cls,
        channels: int,
        seed: int,
        name: str = "context",
        bottleneck: int = 0,
        downsample_ratio: int = 1,
        downsample_mode: DownsampleMode = "avg",
    ) -> "NonLocalParams":
        inner = bottleneck or max(1, channels // 2)
        return cls(
            theta=LinearParams.init(channels, inner, seed, f"{name}.theta"),
            phi=LinearParams.init(channels, inner, seed, f"{name}.phi"),
            value=LinearParams.init(channels, inner, seed, f"{name}.value"),
            out=LinearParams.init(inner, channels, seed, f"{name}.out"),
            downsample_ratio=downsample_ratio,
            downsample_mode=downsample_mode,
        )


def _check_input(f: Tensor, channels: int, ratio: int = 1) -> None:
    if f.ndim != 4 or f.shape[1] != channels:
        raise ShapeError(f"Expected N×{channels}×H×W features, got shape {f.shape}")
    if f.shape[2] < ratio or f.shape[3] < ratio:
        raise ShapeError(
            f"Spatial extents {f.shape[2:]} are smaller than the ratio {ratio}"
        )


def conv_context(f: Tensor, p: ConvContextParams) -> Tensor:
    """``F + US(P · g(V_i))``, the sum over ``P`` identical partners"""
    _check_input(f, p.wv.in_channels, p.downsample_ratio)
    d = downsample(f, p.downsample_ratio, p.downsample_mode)
    grid = (d.shape[2], d.shape[3])
    v = T.permute(project_pixels(d, p.wv), (0, 2, 1))
    pixels = grid[0] * grid[1]
    return fold(pair_map(v, p.g1, p.g2) * float(pixels), f, grid)


def gap_context(f: Tensor, p: GapParams) -> Tensor:
    _check_input(f, p.proj.in_channels)
    pooled = layers.linear_1x1(layers.global_avg_pool(f), p.proj)
    return f + layers.resample_bilinear(pooled, *f.shape[2:])


def se_context(f: Tensor, p: SeParams) -> Tensor:
    """Squeeze-and-excitation gate multiplied onto the input"""
    _check_input(f, p.fc1.in_channels)
    squeezed = layers.linear_1x1(layers.global_avg_pool(f), p.fc1).relu()
    gate = T.elementwise("sigmoid", layers.linear_1x1(squeezed, p.fc2))
    return f * gate


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Softmax over keys of ``Q·Kᵀ``; rows sum to 1"""
    return T.softmax(q @ T.permute(k, (0, 2, 1)), axis=2)


def nonlocal_context(f: Tensor, p: NonLocalParams) -> Tensor:
    _check_input(f, p.theta.in_channels, p.downsample_ratio)
    d = downsample(f, p.downsample_ratio, p.downsample_mode)
    n, _, h, w = d.shape
    attn = attention_weights(project_pixels(d, p.theta), project_pixels(d, p.phi))
    mixed = attn @ project_pixels(d, p.value)
    grid_map = T.reshape(T.permute(mixed, (0, 2, 1)), (n, p.out.in_channels, h, w))
    update = layers.linear_1x1(grid_map, p.out)
    return f + layers.resample_bilinear(update, *f.shape[2:])


@dataclasses.dataclass
class ContextOperator:
    """``F + h(g(f(W1(F), W2(F)), W3(F)))`` over a possibly downsampled map

    ``f`` combines per-pixel queries and keys (``N×P×C``) into pair weights,
    ``g`` combines those with the values, and ``h`` maps the result to
    per-pixel updates ``N×C×P`` which are upsampled and added back.
    """

    f: PairFn
    g: CombineFn
    h: OutputFn
    w1: LinearParams
    w2: LinearParams
    w3: LinearParams
    downsample_ratio: int = 1
    downsample_mode: DownsampleMode = "avg"

    def __call__(self, x: Tensor) -> Tensor:
        _check_input(x, self.w1.in_channels, self.downsample_ratio)
        d = downsample(x, self.downsample_ratio, self.downsample_mode)
        grid = (d.shape[2], d.shape[3])
        pairs = self.f(project_pixels(d, self.w1), project_pixels(d, self.w2))
        return fold(self.h(self.g(pairs, project_pixels(d, self.w3))), x, grid)


def dgcw_operator(p: DgcwParams) -> ContextOperator:
    """DGCW as a context operator: distance plus normalization pairs the pixels,
    an elementwise product combines, ``g`` and the partner sum finish"""

    def _pairs(q: Tensor, k: Tensor) -> Tensor:
        return normalize_weights(
            channel_distance(q, k), p.norm_kind, p.resolved_epsilon(q.dtype)
        )

    def _output(x: Tensor) -> Tensor:
        return T.reduce("sum", pair_map(x, p.g1, p.g2), 3)

    return ContextOperator(
        f=_pairs,
        g=weight_values,
        h=_output,
        w1=p.wq,
        w2=p.wk,
        w3=p.wv,
        downsample_ratio=p.downsample_ratio,
        downsample_mode=p.downsample_mode,
    )


def nonlocal_operator(p: NonLocalParams) -> ContextOperator:
    def _combine(attn: Tensor, v: Tensor) -> Tensor:
        return T.permute(attn @ v, (0, 2, 1))

    return ContextOperator(
        f=attention_weights,
        g=_combine,
        h=lambda x: layers.linear_1x1(x, p.out),
        w1=p.theta,
        w2=p.phi,
        w3=p.value,
        downsample_ratio=p.downsample_ratio,
        downsample_mode=p.downsample_mode,
    )


def dgcw_as_context_operator(f: Tensor, p: DgcwParams) -> Tensor:
    if f.shape[1] != p.channels:
        raise ShapeError(f"Expected {p.channels} channels, got shape {f.shape}")
    return dgcw_operator(p)(f)
