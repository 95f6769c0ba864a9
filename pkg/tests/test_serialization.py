import struct

import numpy as np
import pytest

from dgcwnet import serialization
from dgcwnet.exceptions import FormatError
from dgcwnet.tensor import Tensor

VALUES = np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0
CONFIG = {"network": {"class_count": 4, "backbone_widths": [4, 4, 8, 8]}}


def test_dgt_layout():
    raw = serialization.encode_dgt(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:4] == b"DGT1"
    assert raw[4:6] == bytes([0, 2])
    assert struct.unpack("<2I", raw[6:14]) == (1, 2)
    assert np.frombuffer(raw[14:], dtype="<f4").tolist() == [1.0, 2.0]


def test_dgt_file_is_bit_identical(tmp_path):
    path = serialization.write_dgt(tmp_path / "v.dgt", Tensor(VALUES))
    back = serialization.read_dgt(path)
    assert back.dtype == np.float64
    assert back.tobytes() == VALUES.tobytes()


def test_dgt_scalar():
    scalar = serialization.decode_dgt(serialization.encode_dgt(np.float64(2.5)))
    assert scalar.shape == () and scalar == 2.5


def test_dgt_rejects_integers():
    with pytest.raises(FormatError):
        serialization.encode_dgt(np.arange(3))


@pytest.mark.parametrize(
    "raw",
    [
        b"XXXX\x01\x00",
        b"DGT1\x07\x00",
        b"DGT1\x01\x02\x01\x00",
        b"DGT1\x01\x01\x02\x00\x00\x00" + b"\x00" * 8,
    ],
)
def test_dgt_malformed(raw):
    with pytest.raises(FormatError):
        serialization.decode_dgt(raw)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"b.weight": VALUES, "a.bias": np.ones(3, dtype=np.float32)}
    path = serialization.save_checkpoint(tmp_path / "m.ckpt", tensors, CONFIG)
    loaded, config = serialization.load_checkpoint(path)
    assert sorted(loaded) == ["a.bias", "b.weight"]
    assert loaded["b.weight"].tobytes() == VALUES.tobytes()
    assert loaded["a.bias"].dtype == np.float32
    assert config == CONFIG


def test_checkpoint_is_deterministic(tmp_path):
    first = serialization.save_checkpoint(tmp_path / "1.ckpt", {"w": VALUES}, CONFIG)
    second = serialization.save_checkpoint(tmp_path / "2.ckpt", {"w": VALUES}, CONFIG)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_not_an_archive(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a tarball")
    with pytest.raises(FormatError):
        serialization.load_checkpoint(path)
