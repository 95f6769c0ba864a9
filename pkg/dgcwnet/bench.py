"""Naive versus fused DGCW cost comparison."""

import dataclasses
import logging
import math
import time
import tracemalloc
from collections.abc import Sequence

import numpy as np

from . import dgcw
from . import tensor as T
from .dgcw import DgcwParams, Impl, NormKind
from .exceptions import NumericalError
from .tensor import Tensor
from .util import keyed_rng

logger = logging.getLogger(__name__)

BENCH_HEADER = (
    "impl",
    "channels",
    "pixels",
    "grid_h",
    "grid_w",
    "block_size",
    "aux_bytes",
    "peak_bytes",
    "seconds",
    "checked",
)
FIT_HEADER = (
    "impl",
    "channels",
    "points",
    "peak_slope",
    "aux_slope",
    "time_slope",
)
TOLERANCES = {np.dtype(np.float64): 1e-9, np.dtype(np.float32): 1e-3}


@dataclasses.dataclass
class BenchRow:
    impl: str
    channels: int
    pixels: int
    grid: tuple[int, int]
    block_size: int
    aux_bytes: int
    peak_bytes: int
    seconds: float
    checked: bool

    def to_row(self) -> tuple:
        return (
            self.impl,
            self.channels,
            self.pixels,
            self.grid[0],
            self.grid[1],
            self.block_size,
            self.aux_bytes,
            self.peak_bytes,
            self.seconds,
            self.checked,
        )


def grid_for(pixels: int) -> tuple[int, int]:
    """Most nearly square ``h×w`` grid with ``h*w == pixels`` and ``h <= w``"""
    h = int(math.isqrt(pixels))
    while pixels % h:
        h -= 1
    return h, pixels // h


def aux_bytes(
    impl: str,
    batch: int,
    channels: int,
    hidden: int,
    pixels: int,
    block_size: int,
    itemsize: int,
) -> int:
    """Bytes of the pairwise intermediates live at once

    Both paths hold the difference, squared distance, weights and weighted
    values (``C`` each), the normalizer (1) and ``g``'s hidden pre- and
    post-activation (``H`` each) for every pair in flight; the naive path keeps
    all ``P×P`` pairs, the fused path ``P`` times one block.
    """
    per_pair = 4 * channels + 2 * hidden + 1
    partners = pixels if impl == "naive" else min(block_size, pixels)
    return batch * pixels * partners * per_pair * itemsize


def _forward_backward(
    f: Tensor, p: DgcwParams, impl: Impl, weights: Tensor
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    p.zero_grad()
    with T.Graph():
        out = dgcw.dgcw_forward(f, p, impl)
        T.backward(T.reduce("sum", out * weights, (0, 1, 2, 3)))
    grads = {
        name: t.grad.copy()
        for name, t, _ in p.named_parameters()
        if t.grad is not None
    }
    return out.data, grads


def check_equivalence(f: Tensor, p: DgcwParams, weights: Tensor) -> float:
    """Largest difference between the two paths over outputs and parameter
    gradients

    :raises NumericalError: The paths disagree beyond the precision's tolerance
    """
    naive_out, naive_grads = _forward_backward(f, p, "naive", weights)
    fused_out, fused_grads = _forward_backward(f, p, "fused", weights)
    tol = TOLERANCES[np.dtype(f.dtype)]
    pairs = [("output", naive_out, fused_out)]
    pairs += [(name, naive_grads[name], fused_grads[name]) for name in naive_grads]
    worst = 0.0
    for name, a, b in pairs:
        scale = max(float(np.max(np.abs(a))), 1.0)
        diff = float(np.max(np.abs(a - b))) / scale
        worst = max(worst, diff)
        if not diff <= tol:
            raise NumericalError(
                f"naive and fused DGCW disagree on {name}: {diff:.3e} > {tol:.0e}"
            )
    return worst


def _measure(
    f: Tensor, p: DgcwParams, impl: Impl, weights: Tensor, repeats: int
) -> tuple[float, int]:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        _forward_backward(f, p, impl, weights)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    best = math.inf
    for _ in range(max(repeats, 1)):
        start = time.perf_counter()
        _forward_backward(f, p, impl, weights)
        best = min(best, time.perf_counter() - start)
    return best, peak - base


def run_bench(
    shapes: Sequence[tuple[int, int]],
    impls: Sequence[Impl] = ("naive", "fused"),
    downsample_ratio: int = 4,
    block_size: int = dgcw.DEFAULT_BLOCK_SIZE,
    repeats: int = 3,
    memory_cap_mb: float = 512.0,
    norm_kind: NormKind = "dbs",
    seed: int = 0,
) -> list[BenchRow]:
    """Time and size both DGCW paths over ``channels:pixels`` shapes

    Each shape runs the module on a ``1×C×(h·r)×(w·r)`` input whose downsampled
    grid has ``pixels`` cells. When both paths run, their outputs and gradients
    are compared before anything is timed. Naive runs whose pairwise
    intermediates would exceed ``memory_cap_mb`` are skipped.

    :return: One row per measured implementation and shape
    """
    itemsize = np.dtype(T.default_dtype()).itemsize
    cap = memory_cap_mb * 2**20
    rows = []
    for index, (channels, pixels) in enumerate(shapes):
        grid = grid_for(pixels)
        p = DgcwParams.init(
            channels,
            seed,
            "bench",
            norm_kind=norm_kind,
            downsample_ratio=downsample_ratio,
            block_size=block_size,
            zero_init_g2=False,
        )
        rng = keyed_rng(seed, "bench", index)
        size = (1, channels, grid[0] * downsample_ratio, grid[1] * downsample_ratio)
        f = Tensor(rng.uniform(-1.0, 1.0, size=size))
        weights = Tensor(rng.uniform(-1.0, 1.0, size=size))

        sizes = {
            impl: aux_bytes(impl, 1, channels, p.hidden, pixels, block_size, itemsize)
            for impl in impls
        }
        active = list(impls)
        if "naive" in sizes and sizes["naive"] > cap:
            logger.warning(
                f"Skipping naive DGCW at C={channels} P={pixels}: "
                f"{sizes['naive'] / 2**20:.1f} MiB exceeds the "
                f"{memory_cap_mb:g} MiB cap"
            )
            active.remove("naive")
        checked = {"naive", "fused"} <= set(active)
        if checked:
            diff = check_equivalence(f, p, weights)
            logger.debug(f"C={channels} P={pixels}: paths agree within {diff:.3e}")

        for impl in active:
            seconds, peak = _measure(f, p, impl, weights, repeats)
            logger.info(
                f"{impl} C={channels} P={pixels}: {seconds * 1e3:.2f} ms, "
                f"aux {sizes[impl]} bytes, peak {peak} bytes"
            )
            rows.append(
                BenchRow(
                    impl=impl,
                    channels=channels,
                    pixels=pixels,
                    grid=grid,
                    block_size=block_size,
                    aux_bytes=sizes[impl],
                    peak_bytes=peak,
                    seconds=seconds,
                    checked=checked,
                )
            )
    return rows


def fit_slopes(
    rows: Sequence[BenchRow],
) -> list[tuple[str, int, int, float, float, float]]:
    """Log-log slopes against pixel count of the measured peak memory, the
    analytic auxiliary bytes and the time

    Rows are grouped by implementation and channel count; groups with fewer
    than two distinct pixel counts are left out.
    """
    groups: dict[tuple[str, int], list[BenchRow]] = {}
    for row in rows:
        groups.setdefault((row.impl, row.channels), []).append(row)
    fits = []
    for (impl, channels), group in sorted(groups.items()):
        if len({r.pixels for r in group}) < 2:
            continue
        x = np.log([r.pixels for r in group])
        series = (
            [max(r.peak_bytes, 1) for r in group],
            [r.aux_bytes for r in group],
            [r.seconds for r in group],
        )
        slopes = [float(np.polyfit(x, np.log(v), 1)[0]) for v in series]
        fits.append((impl, channels, len(group), *slopes))
    return fits
