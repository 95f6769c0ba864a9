"""Distance guided channel weighting.

For every pixel pair ``(i, j)`` of a downsampled feature map the squared
per-channel distance between the query of ``i`` and the key of ``j`` is
normalized over channels into a weight vector. That vector reweights the value of
``i``, a two-layer map ``g`` turns the product into a relation vector, and the
relation vectors summed over ``j`` are upsampled and added to the input.

Two interchangeable implementations exist. ``naive`` materializes the
``N×C×P×P`` distance, weight and relation tensors out of ordinary differentiable
ops. ``fused`` is a single primitive that streams over blocks of partner pixels
``j`` and only ever holds ``N×C×P×B`` intermediates; its backward recomputes each
block instead of storing it.
"""

import dataclasses
import logging
from typing import Literal, get_args

import numpy as np

from . import layers
from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .layers import LinearParams
from .params import Params
from .tensor import Tensor

logger = logging.getLogger(__name__)

NormKind = Literal["dbs", "softmax", "tanh"]
Impl = Literal["naive", "fused"]
DownsampleMode = Literal["avg", "bilinear"]

NORM_KINDS: tuple[str, ...] = get_args(NormKind)
IMPLS: tuple[str, ...] = get_args(Impl)
DOWNSAMPLE_MODES: tuple[str, ...] = get_args(DownsampleMode)

DEFAULT_BLOCK_SIZE = 16


def default_epsilon(dtype: np.dtype) -> float:
    """Denominator offset of the divide-by-sum normalization for a scalar type"""
    return 1e-12 if np.dtype(dtype) == np.float64 else 1e-6


@dataclasses.dataclass
class DgcwParams(Params):
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    g1: LinearParams
    g2: LinearParams
    norm_kind: NormKind = "dbs"
    downsample_ratio: int = 4
    epsilon: float | None = None
    block_size: int = DEFAULT_BLOCK_SIZE
    downsample_mode: DownsampleMode = "avg"

    def __post_init__(self) -> None:
        c = self.wq.in_channels
        for name in ("wq", "wk", "wv"):
            p: LinearParams = getattr(self, name)
            if (p.in_channels, p.out_channels) != (c, c):
                raise ShapeError(
                    f"{name} must map {c} to {c} channels, "
                    f"got {p.in_channels}->{p.out_channels}"
                )
        if self.g1.in_channels != c or self.g2.out_channels != c:
            raise ShapeError(f"g must map {c} channels back to {c}")
        if self.g1.out_channels != self.g2.in_channels:
            raise ShapeError(
                f"g hidden widths disagree: {self.g1.out_channels} "
                f"vs {self.g2.in_channels}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm_kind {self.norm_kind!r}")
        if self.downsample_mode not in DOWNSAMPLE_MODES:
            raise ConfigError(f"Unknown downsample_mode {self.downsample_mode!r}")
        if self.downsample_ratio < 1:
            raise ConfigError(f"downsample_ratio must be >= 1: {self.downsample_ratio}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1: {self.block_size}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive: {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.wq.in_channels

    @property
    def hidden(self) -> int:
        return self.g1.out_channels

    def resolved_epsilon(self, dtype: np.dtype) -> float:
        return self.epsilon if self.epsilon is not None else default_epsilon(dtype)

    @classmethod
    def init(
        cls,
        channels: int,
        seed: int,
        name: str = "dgcw",
        hidden: int = 0,
        norm_kind: NormKind = "dbs",
        downsample_ratio: int = 4,
        block_size: int = DEFAULT_BLOCK_SIZE,
        downsample_mode: DownsampleMode = "avg",
        zero_init_g2: bool = True,
        epsilon: float | None = None,
    ) -> "DgcwParams":
        """Fresh module parameters

        :param channels: Channel count ``C`` on every DGCW-facing side
        :param seed: Initialization seed
        :param name: Parameter name prefix keying the initialization streams
        :param hidden: Hidden width of ``g``; 0 means ``channels``
        :param zero_init_g2: Start as an exact identity map
        """
        hidden = hidden or channels
        return cls(
            wq=LinearParams.init(channels, channels, seed, f"{name}.wq"),
            wk=LinearParams.init(channels, channels, seed, f"{name}.wk"),
            wv=LinearParams.init(channels, channels, seed, f"{name}.wv"),
            g1=LinearParams.init(channels, hidden, seed, f"{name}.g1"),
            g2=LinearParams.init(
                hidden, channels, seed, f"{name}.g2", zero=zero_init_g2
            ),
            norm_kind=norm_kind,
            downsample_ratio=downsample_ratio,
            epsilon=epsilon,
            block_size=block_size,
            downsample_mode=downsample_mode,
        )


@dataclasses.dataclass
class DistanceMap:
    """Squared per-channel query/key distances, ``N×C×P×P`` indexed ``[n, c, i, j]``"""

    values: Tensor

    def __post_init__(self) -> None:
        if self.values.ndim != 4 or self.values.shape[2] != self.values.shape[3]:
            raise ShapeError(f"Distance map must be N×C×P×P, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def pixels(self) -> int:
        return self.values.shape[2]


def downsampled_size(h: int, w: int, ratio: int) -> tuple[int, int]:
    return layers.pooled_extent(h, ratio), layers.pooled_extent(w, ratio)


def downsample(x: Tensor, ratio: int, mode: DownsampleMode = "avg") -> Tensor:
    if ratio == 1:
        return x
    h, w = x.shape[-2:]
    if mode == "bilinear":
        return layers.resample_bilinear(x, *downsampled_size(h, w, ratio))
    return layers.avg_pool(x, ratio)


def _check_extents(f: Tensor, ratio: int) -> None:
    if f.ndim != 4:
        raise ShapeError(f"Expected an N×C×H×W feature map, got shape {f.shape}")
    h, w = f.shape[2:]
    if h < ratio or w < ratio:
        raise ShapeError(
            f"Spatial extents {h}×{w} are smaller than the downsample ratio {ratio}"
        )


def project_pixels(d: Tensor, p: LinearParams) -> Tensor:
    """1×1 projection of ``N×C×h×w`` features flattened to ``N×P×C'``"""
    n, _, h, w = d.shape
    flat = T.reshape(layers.linear_1x1(d, p), (n, p.out_channels, h * w))
    return T.permute(flat, (0, 2, 1))


def qkv_project(d: Tensor, p: DgcwParams) -> tuple[Tensor, Tensor, Tensor]:
    """Queries, keys and values of a downsampled map

    :param d: ``N×C×h×w`` downsampled features
    :return: ``Q, K, V``, each ``N×P×C`` with ``P = h·w``
    """
    if d.ndim != 4 or d.shape[1] != p.channels:
        raise ShapeError(f"Expected N×{p.channels}×h×w input, got shape {d.shape}")
    return project_pixels(d, p.wq), project_pixels(d, p.wk), project_pixels(d, p.wv)


def _channels_first(x: Tensor) -> Tensor:
    return T.permute(x, (0, 2, 1))


def channel_distance(q: Tensor, k: Tensor) -> DistanceMap:
    if q.shape != k.shape or q.ndim != 3:
        raise ShapeError(f"Q {q.shape} and K {k.shape} must both be N×P×C")
    n, p, c = q.shape
    qi = T.reshape(_channels_first(q), (n, c, p, 1))
    kj = T.reshape(_channels_first(k), (n, c, 1, p))
    return DistanceMap(T.elementwise("square", qi - kj))


def normalize_weights(
    m: DistanceMap, kind: NormKind, epsilon: float | None = None
) -> Tensor:
    """Normalize each pair's distance vector over the channel axis

    ``dbs`` divides by the channel sum plus ``epsilon``, so a pair at zero
    distance gets all-zero weights; ``softmax`` is taken over channels; ``tanh``
    squashes the raw distances into ``[0, 1)``.
    """
    values = m.values
    if kind == "dbs":
        eps = epsilon if epsilon is not None else default_epsilon(values.dtype)
        total = T.reduce("sum", values, 1, keepdims=True)
        return T.elementwise("divide", values, total, eps=eps)
    if kind == "softmax":
        return T.softmax(values, axis=1)
    if kind == "tanh":
        return T.elementwise("tanh", values)
    raise ConfigError(f"Unknown norm_kind {kind!r}")


def weight_values(weights: Tensor, v: Tensor) -> Tensor:
    """``weights[n, :, i, j] * V[n, i, :]`` for every pair"""
    n, c, p, _ = weights.shape
    vi = T.reshape(_channels_first(v), (n, c, p, 1))
    return weights * vi


def pair_map(x: Tensor, g1: LinearParams, g2: LinearParams) -> Tensor:
    """The two-layer map ``g``, linear, ReLU, linear, over the channel axis"""
    hidden = layers.linear_1x1(x, g1).relu()
    return layers.linear_1x1(hidden, g2)


def relationship(weights: Tensor, v: Tensor, p: DgcwParams) -> Tensor:
    """Relation vectors ``R[n, :, i, j] = g(W[n, :, i, j] * V[n, i, :])``"""
    if weights.ndim != 4 or v.shape != (weights.shape[0], weights.shape[2], p.channels):
        raise ShapeError(f"Weights {weights.shape} and V {v.shape} are inconsistent")
    return pair_map(weight_values(weights, v), p.g1, p.g2)


def fold(s: Tensor, f: Tensor, grid: tuple[int, int]) -> Tensor:
    """Reshape per-pixel updates ``N×C×P`` onto ``grid``, upsample to ``f`` and add"""
    n, c, _ = s.shape
    update = T.reshape(s, (n, c, *grid))
    return f + layers.resample_bilinear(update, *f.shape[2:])


def aggregate(
    r: Tensor, f: Tensor, grid: tuple[int, int] | None = None, ratio: int = 4
) -> Tensor:
    """Sum relation vectors over partner pixels and add them, upsampled, to ``f``

    :param r: ``N×C×P×P`` relation vectors
    :param f: ``N×C×H×W`` full-resolution input
    :param grid: Downsampled extents ``(h, w)``; derived from ``ratio`` when omitted
    """
    grid = grid or downsampled_size(f.shape[2], f.shape[3], ratio)
    if r.ndim != 4 or r.shape[2] != grid[0] * grid[1]:
        raise ShapeError(f"Relation map {r.shape} does not match grid {grid}")
    return fold(T.reduce("sum", r, 3), f, grid)


def _normalize_block(
    m: np.ndarray, kind: str, eps: float
) -> tuple[np.ndarray, np.ndarray | None]:
    if kind == "dbs":
        den = m.sum(axis=1, keepdims=True) + eps
        return m / den, den
    if kind == "softmax":
        e = np.exp(m - m.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True), None
    return np.tanh(m), None


def _normalize_block_backward(
    gw: np.ndarray, m: np.ndarray, w: np.ndarray, den: np.ndarray | None, kind: str
) -> np.ndarray:
    if kind == "dbs":
        assert den is not None
        return gw / den - (gw * m).sum(axis=1, keepdims=True) / (den * den)
    if kind == "softmax":
        return w * (gw - (gw * w).sum(axis=1, keepdims=True))
    return gw * (1.0 - w * w)


def fused_context(q: Tensor, k: Tensor, v: Tensor, p: DgcwParams) -> Tensor:
    """``Σ_j g(W[:, i, j] * V_i)`` as ``N×C×P`` without materializing pair tensors

    Partner pixels are visited in blocks of ``p.block_size`` in ascending order.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"Q {q.shape}, K {k.shape}, V {v.shape} must be equal N×P×C")
    kind, block = p.norm_kind, p.block_size
    eps = p.resolved_epsilon(q.dtype)
    qc = q.data.transpose(0, 2, 1)
    kc = k.data.transpose(0, 2, 1)
    vc = v.data.transpose(0, 2, 1)[:, :, :, None]
    w1, b1 = p.g1.weight.data, p.g1.bias.data[:, None, None]
    w2, b2 = p.g2.weight.data, p.g2.bias.data
    n, c, pixels = qc.shape
    bounds = [(j0, min(j0 + block, pixels)) for j0 in range(0, pixels, block)]

    def _block(j0: int, j1: int) -> tuple[np.ndarray, ...]:
        d = qc[:, :, :, None] - kc[:, :, None, j0:j1]
        m = d * d
        weights, den = _normalize_block(m, kind, eps)
        x = weights * vc
        z1 = np.einsum("hc,ncij->nhij", w1, x) + b1
        return d, m, weights, den, x, z1

    s = np.zeros((n, c, pixels), dtype=q.dtype)
    for j0, j1 in bounds:
        *_, z1 = _block(j0, j1)
        a = np.maximum(z1, 0)
        s += np.einsum("oh,nhi->noi", w2, a.sum(axis=3)) + (j1 - j0) * b2[:, None]
    logger.debug(f"fused DGCW over {len(bounds)} blocks of {block} partner pixels")

    def _backward(gs: np.ndarray) -> tuple[np.ndarray, ...]:
        gq = np.zeros_like(qc)
        gk = np.zeros_like(kc)
        gv = np.zeros_like(qc)
        gw1, gb1 = np.zeros_like(w1), np.zeros(w1.shape[0], dtype=w1.dtype)
        gw2 = np.zeros_like(w2)
        gb2 = gs.sum(axis=(0, 2)) * pixels
        ga = np.einsum("oh,noi->nhi", w2, gs)[:, :, :, None]
        for j0, j1 in bounds:
            d, m, weights, den, x, z1 = _block(j0, j1)
            gw2 += np.einsum("noi,nhi->oh", gs, np.maximum(z1, 0).sum(axis=3))
            gz1 = ga * (z1 > 0)
            gw1 += np.einsum("nhij,ncij->hc", gz1, x)
            gb1 += gz1.sum(axis=(0, 2, 3))
            gx = np.einsum("hc,nhij->ncij", w1, gz1)
            gv += (gx * weights).sum(axis=3)
            gm = _normalize_block_backward(gx * vc, m, weights, den, kind)
            gd = 2.0 * d * gm
            gq += gd.sum(axis=3)
            gk[:, :, j0:j1] -= gd.sum(axis=2)
        return (
            gq.transpose(0, 2, 1),
            gk.transpose(0, 2, 1),
            gv.transpose(0, 2, 1),
            gw1,
            gb1,
            gw2,
            gb2,
        )

    return T.record(
        "fused_dgcw",
        s,
        (q, k, v, p.g1.weight, p.g1.bias, p.g2.weight, p.g2.bias),
        _backward,
    )


def dgcw_forward(f: Tensor, p: DgcwParams, impl: Impl = "naive") -> Tensor:
    """Apply the module to ``N×C×H×W`` features

    :param f: Input features, ``H`` and ``W`` at least the downsample ratio
    :param p: Module parameters
    :param impl: ``naive`` or ``fused``
    :return: Features of the input's shape
    """
    _check_extents(f, p.downsample_ratio)
    if f.shape[1] != p.channels:
        raise ShapeError(f"Expected {p.channels} channels, got shape {f.shape}")
    d = downsample(f, p.downsample_ratio, p.downsample_mode)
    grid = (d.shape[2], d.shape[3])
    q, k, v = qkv_project(d, p)

    if impl == "naive":
        m = channel_distance(q, k)
        weights = normalize_weights(m, p.norm_kind, p.resolved_epsilon(q.dtype))
        return aggregate(relationship(weights, v, p), f, grid)
    if impl == "fused":
        return fold(fused_context(q, k, v, p), f, grid)
    raise ConfigError(f"Unknown DGCW implementation {impl!r}")
