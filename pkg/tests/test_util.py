from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from dgcwnet import util

DT = datetime(2026, 3, 4, 5, 6, 7, tzinfo=timezone.utc)


def test_keyed_rng_streams():
    a = util.keyed_rng(1, "augment", 3).uniform(size=4)
    b = util.keyed_rng(1, "augment", 3).uniform(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, util.keyed_rng(1, "augment", 4).uniform(size=4))
    assert not np.array_equal(a, util.keyed_rng(1, "synth", 3).uniform(size=4))
    with pytest.raises(ValueError):
        util.keyed_rng(-1, "augment")


def test_run_stamp():
    assert util.to_run_stamp(DT) == "20260304T050607Z"
    shifted = DT.astimezone(timezone(timedelta(hours=9)))
    assert util.to_run_stamp(shifted) == "20260304T050607Z"


def test_run_dirs_never_collide(tmp_path):
    first = util.make_run_dir(tmp_path, "train", DT)
    second = util.make_run_dir(tmp_path, "train", DT)
    assert first.name == "train-20260304T050607Z"
    assert second.name == "train-20260304T050607Z-1"
    assert second.is_dir()


def test_write_csv(tmp_path):
    path = util.write_csv(
        tmp_path / "t.csv", ["a", "b", "c"], [[1, 0.1 + 0.2, True], ["x", 2.0, False]]
    )
    assert path.read_text() == "a,b,c\n1,0.3,true\nx,2,false\n"


def test_write_pgm(tmp_path):
    path = util.write_pgm(tmp_path / "m.pgm", np.array([[0.0, 1.0], [2.0, 4.0]]))
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 64, 128, 255]


def test_write_pgm_fixed_scale_and_flat_map(tmp_path):
    raw = util.write_pgm(tmp_path / "a.pgm", np.array([[5.0, 20.0]]), 10.0)
    assert list(raw.read_bytes()[-2:]) == [128, 255]
    raw = util.write_pgm(tmp_path / "b.pgm", np.full((1, 3), 7.0))
    assert list(raw.read_bytes()[-3:]) == [0, 0, 0]
    with pytest.raises(ValueError):
        util.write_pgm(tmp_path / "c.pgm", np.zeros(3))


def test_label_preview():
    out = util.label_preview(np.array([[0, 1, 255]]), 3, 255)
    np.testing.assert_array_equal(out, [[0.0, 127.0, 255.0]])
