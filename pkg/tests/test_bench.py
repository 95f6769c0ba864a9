import numpy as np
import pytest

from dgcwnet import bench
from dgcwnet import tensor as T
from dgcwnet.bench import BenchRow
from dgcwnet.dgcw import DgcwParams
from dgcwnet.exceptions import NumericalError
from dgcwnet.tensor import Tensor


@pytest.mark.parametrize(
    "pixels,grid", [(16, (4, 4)), (36, (6, 6)), (12, (3, 4)), (7, (1, 7))]
)
def test_grid_for(pixels, grid):
    assert bench.grid_for(pixels) == grid


def test_aux_bytes_ratio():
    naive = bench.aux_bytes("naive", 1, 8, 8, 64, 16, 8)
    fused = bench.aux_bytes("fused", 1, 8, 8, 64, 16, 8)
    assert naive == 64 * 64 * (4 * 8 + 2 * 8 + 1) * 8
    assert fused * 4 == naive
    assert bench.aux_bytes("fused", 1, 8, 8, 4, 16, 8) == bench.aux_bytes(
        "naive", 1, 8, 8, 4, 16, 8
    )


def test_run_bench_rows_and_slopes():
    rows = bench.run_bench(
        [(2, 4), (2, 16)], downsample_ratio=2, block_size=4, repeats=1
    )
    assert [(r.impl, r.pixels) for r in rows] == [
        ("naive", 4),
        ("fused", 4),
        ("naive", 16),
        ("fused", 16),
    ]
    assert all(r.checked and r.seconds > 0 for r in rows)
    assert rows[2].grid == (4, 4)
    fits = {(fit[0], fit[1]): fit[3:] for fit in bench.fit_slopes(rows)}
    peak, aux, _ = fits[("naive", 2)]
    assert aux == pytest.approx(2.0)
    assert np.isfinite(peak)
    assert fits[("fused", 2)][1] == pytest.approx(1.0)


def test_naive_skipped_above_cap():
    rows = bench.run_bench([(2, 16)], downsample_ratio=1, repeats=1, memory_cap_mb=0.0)
    assert [r.impl for r in rows] == ["fused"]
    assert not rows[0].checked
    assert bench.fit_slopes(rows) == []


def test_check_equivalence_raises_on_disagreement(mocker):
    p = DgcwParams.init(2, 0, downsample_ratio=1, zero_init_g2=False)
    f = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)))
    w = Tensor(np.ones((1, 2, 3, 3)))
    assert bench.check_equivalence(f, p, w) < 1e-9

    original = bench._forward_backward

    def skewed(f, p, impl, weights):
        out, grads = original(f, p, impl, weights)
        return (out + 1.0 if impl == "fused" else out), grads

    mocker.patch.object(bench, "_forward_backward", side_effect=skewed)
    with pytest.raises(NumericalError):
        bench.check_equivalence(f, p, w)


def test_f32_tolerance():
    with T.precision("f32"):
        rows = bench.run_bench([(2, 4)], downsample_ratio=2, block_size=2, repeats=1)
    assert all(r.checked for r in rows)
    assert rows[0].aux_bytes == bench.aux_bytes("naive", 1, 2, 2, 4, 2, 4)


def test_bench_row():
    row = BenchRow("fused", 2, 4, (2, 2), 16, 10, 20, 0.5, True)
    assert row.to_row() == ("fused", 2, 4, 2, 2, 16, 10, 20, 0.5, True)


def test_fit_slopes_uses_measured_peaks():
    rows = [
        BenchRow("naive", 4, p, (1, p), 4, p, p**2 * 100, 1e-3 * p**3, True)
        for p in (4, 16, 64)
    ]
    ((impl, channels, points, peak, aux, time_slope),) = bench.fit_slopes(rows)
    assert (impl, channels, points) == ("naive", 4, 3)
    assert peak == pytest.approx(2.0)
    assert aux == pytest.approx(1.0)
    assert time_slope == pytest.approx(3.0)
