import csv
import logging
import os
import zlib
from collections.abc import Iterable, Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

PathLike = str | os.PathLike[str]


def keyed_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, purpose, index)``

    Streams for distinct keys are independent, so work items can draw their
    randomness in any order or on any worker.
    """
    if seed < 0 or index < 0:
        raise ValueError(f"seed and index must be non-negative: {seed}, {index}")
    key = np.random.SeedSequence([seed, zlib.crc32(purpose.encode("utf-8")), index])
    return np.random.Generator(np.random.Philox(key))


def to_run_stamp(dt: datetime | None = None) -> str:
    dt = dt or datetime.now(timezone.utc)
    if not dt.tzinfo:
        dt = dt.astimezone(timezone.utc)
    return dt.astimezone(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def make_run_dir(out: PathLike, command: str, dt: datetime | None = None) -> Path:
    base = Path(out) / f"{command}-{to_run_stamp(dt)}"
    target = base
    suffix = 1
    while target.exists():
        target = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    target.mkdir(parents=True)
    logger.info(f"Writing artifacts to {target}")
    return target


def format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_csv(
    path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    target = Path(path)
    with open(target, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    logger.info(f"Wrote {target}")
    return target


def write_pgm(
    path: PathLike, image: np.ndarray, max_value: float | None = None
) -> Path:
    """Write a 2-D map as an 8-bit binary PGM

    :param path: Target path
    :param image: ``H×W`` values
    :param max_value: Value mapped to 255; the map is min-max scaled when omitted
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D map, got shape {arr.shape}")
    if max_value is None:
        lo, hi = float(arr.min()), float(arr.max())
        scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    else:
        scaled = np.clip(arr / max_value, 0.0, 1.0)
    pixels = np.round(scaled * 255).astype(np.uint8)

    target = Path(path)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    target.write_bytes(header + pixels.tobytes())
    return target


def label_preview(
    labels: np.ndarray, class_count: int, ignore_index: int
) -> np.ndarray:
    """Spread class ids over the gray range; ignored pixels become white"""
    labels = np.asarray(labels)
    step = 254 // max(class_count - 1, 1)
    out = np.where(labels == ignore_index, 255, labels * step)
    return out.astype(np.float64)
