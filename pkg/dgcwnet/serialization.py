"""DGT1 tensor files and checkpoint archives.

DGT1 layout: magic ``DGT1``, one dtype byte (0 = f32, 1 = f64), one rank byte,
``rank`` little-endian u32 extents, then the row-major little-endian payload.

A checkpoint is a gzip-compressed tar archive holding ``manifest.json`` (name,
dtype and shape of every tensor plus the network configuration) and one DGT1
member per tensor under ``tensors/``.
"""

import gzip
import io
import json
import logging
import os
import struct
import tarfile
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import FormatError
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DGT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_NAMES = {0: "f32", 1: "f64"}
MANIFEST = "manifest.json"
CHECKPOINT_FORMAT = "dgcwnet-checkpoint-1"

PathLike = str | os.PathLike[str]


def _code_of(dtype: np.dtype) -> int:
    if dtype == np.float32:
        return 0
    if dtype == np.float64:
        return 1
    raise FormatError(f"DGT1 stores f32 or f64 payloads, got {dtype}")


def encode_dgt(values: np.ndarray | Tensor) -> bytes:
    arr = values.data if isinstance(values, Tensor) else np.asarray(values)
    code = _code_of(arr.dtype)
    if arr.ndim > 255:
        raise FormatError(f"Rank {arr.ndim} does not fit in one byte")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_dgt(raw: bytes) -> np.ndarray:
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError("Missing DGT1 magic bytes")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"Unknown DGT1 dtype code {code}")
    offset = 6 + 4 * rank
    if len(raw) < offset:
        raise FormatError("Truncated DGT1 header")
    shape = struct.unpack_from(f"<{rank}I", raw, 6)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise FormatError(
            f"DGT1 payload has {len(raw) - offset} bytes, "
            f"shape {shape} needs {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def write_dgt(path: PathLike, values: np.ndarray | Tensor) -> Path:
    target = Path(path)
    target.write_bytes(encode_dgt(values))
    return target


def read_dgt(path: PathLike) -> np.ndarray:
    return decode_dgt(Path(path).read_bytes())


def save_checkpoint(
    path: PathLike,
    tensors: Mapping[str, np.ndarray | Tensor],
    config: Mapping[str, Any] | None = None,
) -> Path:
    """Write named tensors into a checkpoint archive

    :param path: Target file path
    :param tensors: Dot-separated parameter names mapped to values
    :param config: JSON-serializable configuration stored with the tensors
    :return: The written path
    """
    entries = []
    members: list[tuple[str, bytes]] = []
    for name in sorted(tensors):
        raw = encode_dgt(tensors[name])
        arr = decode_dgt(raw)
        entries.append(
            {
                "name": name,
                "dtype": DTYPE_NAMES[_code_of(arr.dtype)],
                "shape": list(arr.shape),
            }
        )
        members.append((f"tensors/{name}.dgt", raw))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": dict(config or {}),
        "tensors": entries,
    }
    members.insert(0, (MANIFEST, json.dumps(manifest, indent=2).encode("utf-8")))

    target = Path(path)
    with open(target, "wb") as f:
        # no name and mtime 0 keep archives byte-identical across runs
        with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
            with tarfile.open(fileobj=gz, mode="w", format=tarfile.GNU_FORMAT) as tar:
                for member_name, raw in members:
                    info = tarfile.TarInfo(member_name)
                    info.size = len(raw)
                    info.mtime = 0
                    tar.addfile(info, io.BytesIO(raw))
                    logger.debug(f"Added {member_name} to {target}")
    logger.info(f"Wrote checkpoint {target} with {len(entries)} tensors")
    return target


def load_checkpoint(path: PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint archive

    :param path: Archive path
    :return: Tensors by name and the stored configuration
    """
    try:
        with tarfile.open(path, mode="r:gz") as tar:
            raw_manifest = tar.extractfile(MANIFEST)
            if raw_manifest is None:
                raise FormatError(f"{path} has no {MANIFEST}")
            manifest = json.loads(raw_manifest.read().decode("utf-8"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise FormatError(f"{path} is not a {CHECKPOINT_FORMAT} archive")

            tensors: dict[str, np.ndarray] = {}
            for entry in manifest["tensors"]:
                member = tar.extractfile(f"tensors/{entry['name']}.dgt")
                if member is None:
                    raise FormatError(f"{path} misses tensor {entry['name']}")
                arr = decode_dgt(member.read())
                if list(arr.shape) != entry["shape"]:
                    raise FormatError(
                        f"{entry['name']}: manifest shape {entry['shape']} "
                        f"differs from payload shape {list(arr.shape)}"
                    )
                tensors[entry["name"]] = arr
    except (tarfile.TarError, KeyError, json.JSONDecodeError) as e:
        raise FormatError(f"Unable to read checkpoint {path}: {e}") from e

    return tensors, dict(manifest.get("config", {}))
