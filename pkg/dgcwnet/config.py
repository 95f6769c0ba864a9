"""Flat run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Values are read as strings and coerced to the declared field types. Precedence,
lowest first: defaults, the file, ``--key value`` overrides, dedicated flags.
"""

import dataclasses
import logging
import os
import typing
from pathlib import Path
from typing import Any

from .data import AugmentSpec, SynthSpec
from .exceptions import ConfigError
from .network import NetworkConfig
from .training import TrainSpec

logger = logging.getLogger(__name__)

PathLike = str | os.PathLike[str]

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    out: str = "runs"
    data_dir: str = "data"
    class_count: int = 4
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    reduced_channels: int = 32
    head: str = "none"
    context: str = "dgcw"
    norm_kind: str = "dbs"
    downsample_ratio: int = 4
    downsample_mode: str = "avg"
    g_hidden: int = 0
    dgcw_impl: str = "fused"
    block_size: int = 16
    zero_init_g2: bool = True
    se_reduction: int = 4
    nl_bottleneck: int = 0
    aux_weight: float = 0.4
    aspp_rates: tuple[int, ...] = (2, 4, 6)
    aspp_out_channels: int = 64
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    image_size: int = 64
    train_size: int = 256
    val_size: int = 64
    shapes_min: int = 2
    shapes_max: int = 5
    noise: float = 0.05
    batch_size: int = 8
    iterations: int = 1500
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    crop: int = 64
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    ohem: bool = False
    ohem_thresh: float = 0.7
    ohem_keep: int = 100000
    eval_interval: int = 0
    train_split: str = "train"
    scales: tuple[float, ...] = (1.0,)
    flip: bool = False
    bench_shapes: str = "8:16,8:36,8:64,16:64"
    bench_repeats: int = 3
    naive_memory_cap_mb: float = 512.0
    variance_bins: int = 8
    variance_edges: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        hints = typing.get_type_hints(type(self))
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            setattr(self, f.name, _coerce(f.name, value, hints[f.name]))
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64: {self.precision!r}")
        self.bench_shape_pairs()
        if self.variance_bins < 1:
            raise ConfigError(f"variance_bins must be positive: {self.variance_bins}")
        edges = self.variance_edges
        if edges and (
            len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:]))
        ):
            raise ConfigError(f"variance_edges must be strictly increasing: {edges}")

    @classmethod
    def from_flat_repr(cls, **values: Any) -> "RunConfig":
        """Build from flat keys, rejecting any key that is not a field"""
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def load(
        cls,
        path: PathLike | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> "RunConfig":
        values: dict[str, Any] = {}
        if path is not None:
            values.update(parse_flat_text(Path(path).read_text(), str(path)))
        values.update(overrides or {})
        return cls.from_flat_repr(**values)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def bench_shape_pairs(self) -> list[tuple[int, int]]:
        """``channels:pixels`` pairs of ``bench_shapes``"""
        pairs = []
        for item in self.bench_shapes.split(","):
            item = item.strip()
            if not item:
                continue
            try:
                channels, pixels = (int(v) for v in item.split(":"))
            except ValueError as e:
                raise ConfigError(f"Invalid bench shape {item!r}, expected C:P") from e
            if channels < 1 or pixels < 1:
                raise ConfigError(f"Bench shape {item!r} must be positive")
            pairs.append((channels, pixels))
        return pairs

    def to_network_config(self) -> NetworkConfig:
        return NetworkConfig.from_repr(self.to_flat_repr())

    def to_synth_spec(self) -> SynthSpec:
        return SynthSpec(
            image_size=self.image_size,
            class_count=self.class_count,
            shapes_min=self.shapes_min,
            shapes_max=self.shapes_max,
            noise=self.noise,
            seed=self.seed,
            train_size=self.train_size,
            val_size=self.val_size,
        )

    def to_train_spec(self) -> TrainSpec:
        return TrainSpec(
            batch_size=self.batch_size,
            iterations=self.iterations,
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            ohem=self.ohem,
            ohem_thresh=self.ohem_thresh,
            ohem_keep=self.ohem_keep,
            eval_interval=self.eval_interval,
            train_split=self.train_split,
            seed=self.seed,
        )

    def to_augment_spec(self) -> AugmentSpec:
        return AugmentSpec(
            crop=self.crop,
            scale_min=self.scale_min,
            scale_max=self.scale_max,
            flip_prob=self.flip_prob,
        )

    def to_flat_repr(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def resolved_text(self) -> str:
        """Sorted ``key = value`` lines, readable back by :meth:`load`"""
        lines = [
            f"{key} = {format_value(value)}"
            for key, value in sorted(self.to_flat_repr().items())
        ]
        return "\n".join(lines) + "\n"


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _coerce(name: str, value: Any, kind: Any) -> Any:
    try:
        if kind is bool:
            return _to_bool(value)
        if kind in (int, float, str):
            if kind is int and isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return kind(value)
        if typing.get_origin(kind) is tuple:
            (item_kind, _) = typing.get_args(kind)
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(item_kind(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value {value!r} for {name}: {e}") from e
    raise ConfigError(f"Unsupported config type {kind} for {name}")


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"{value!r} is not a boolean")


def parse_flat_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines

    :param text: File contents
    :param source: Name used in error messages
    :return: Raw string values by key
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw!r}")
        key = key.strip()
        if key in values:
            logger.warning(f"{source}:{number}: {key} set twice, last value wins")
        values[key] = value.strip()
    return values


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``--key value`` and ``--key=value`` pairs; dashes in keys become underscores"""
    overrides: dict[str, str] = {}
    rest = list(args)
    while rest:
        token = rest.pop(0)
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"Unexpected argument {token!r}")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if not rest:
                raise ConfigError(f"Missing value for --{key}")
            value = rest.pop(0)
        overrides[key.replace("-", "_")] = value
    return overrides
