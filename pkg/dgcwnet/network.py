"""Segmentation network: a stride-8 residual backbone, an optional multi-scale
head, a channel-reduction conv, a context module slot and two classifiers.
"""

import dataclasses
import logging
from typing import Any, Literal, get_args

import numpy as np

from . import baselines, dgcw, layers
from . import tensor as T
from .dgcw import DgcwParams, DownsampleMode, Impl, NormKind
from .exceptions import ConfigError, ShapeError
from .layers import IGNORE_INDEX, BatchNormParams, Conv2dParams, LinearParams
from .params import Params
from .tensor import Tensor

logger = logging.getLogger(__name__)

HeadKind = Literal["none", "ppm", "aspp"]
ContextKind = Literal["none", "conv", "gap", "se", "nlh", "nld", "dgcw"]

HEAD_KINDS: tuple[str, ...] = get_args(HeadKind)
CONTEXT_KINDS: tuple[str, ...] = get_args(ContextKind)

OUTPUT_STRIDE = 8
STAGE_STRIDES = (2, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 2, 4)
AUX_STAGE = 2


def _int_tuple(value: Any) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


@dataclasses.dataclass
class NetworkConfig:
    class_count: int = 4
    backbone_widths: tuple[int, ...] = (16, 32, 64, 64)
    reduced_channels: int = 32
    head: HeadKind = "none"
    context: ContextKind = "dgcw"
    norm_kind: NormKind = "dbs"
    downsample_ratio: int = 4
    downsample_mode: DownsampleMode = "avg"
    g_hidden: int = 0
    dgcw_impl: Impl = "fused"
    block_size: int = dgcw.DEFAULT_BLOCK_SIZE
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
    in_channels: int = 3

    def __post_init__(self) -> None:
        self.backbone_widths = _int_tuple(self.backbone_widths)
        self.aspp_rates = _int_tuple(self.aspp_rates)
        self.ppm_bins = _int_tuple(self.ppm_bins)
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2: {self.class_count}")
        if self.reduced_channels < 4:
            raise ConfigError(f"reduced_channels must be >= 4: {self.reduced_channels}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0: {self.aux_weight}")
        if len(self.backbone_widths) != len(STAGE_STRIDES):
            raise ConfigError(
                f"backbone_widths needs {len(STAGE_STRIDES)} entries: "
                f"{self.backbone_widths}"
            )
        if len(self.aspp_rates) != 3:
            raise ConfigError(f"aspp_rates needs 3 entries: {self.aspp_rates}")
        if not self.ppm_bins:
            raise ConfigError("ppm_bins must not be empty")
        if self.head not in HEAD_KINDS:
            raise ConfigError(
                f"Unknown head {self.head!r}, expected one of {HEAD_KINDS}"
            )
        if self.context not in CONTEXT_KINDS:
            raise ConfigError(
                f"Unknown context {self.context!r}, expected one of {CONTEXT_KINDS}"
            )
        if self.dgcw_impl not in dgcw.IMPLS:
            raise ConfigError(f"Unknown dgcw_impl {self.dgcw_impl!r}")

    def to_repr(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_repr(cls, values: dict[str, Any]) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


@dataclasses.dataclass
class ConvBlockParams(Params):
    """Conv, optional batch norm, optional ReLU"""

    conv: Conv2dParams
    bn: BatchNormParams | None = None
    relu: bool = True

    @classmethod
    def init(
        cls,
        cfg: NetworkConfig,
        in_channels: int,
        out_channels: int,
        kernel: int,
        seed: int,
        name: str,
        stride: int = 1,
        dilation: int = 1,
        relu: bool = True,
    ) -> "ConvBlockParams":
        conv = Conv2dParams.init(
            in_channels,
            out_channels,
            kernel,
            seed,
            f"{name}.conv",
            stride=stride,
            dilation=dilation,
        )
        bn = (
            BatchNormParams.init(out_channels, cfg.bn_momentum, cfg.bn_eps)
            if cfg.batchnorm
            else None
        )
        return cls(conv=conv, bn=bn, relu=relu)


def conv_block(x: Tensor, p: ConvBlockParams, training: bool) -> Tensor:
    y = layers.conv2d(x, p.conv)
    if p.bn is not None:
        y = layers.batchnorm(y, p.bn, training)
    return y.relu() if p.relu else y


@dataclasses.dataclass
class ResidualBlockParams(Params):
    first: ConvBlockParams
    second: ConvBlockParams
    shortcut: ConvBlockParams | None = None

    @classmethod
    def init(
        cls,
        cfg: NetworkConfig,
        in_channels: int,
        out_channels: int,
        seed: int,
        name: str,
        stride: int,
        dilation: int,
    ) -> "ResidualBlockParams":
        shortcut = None
        if in_channels != out_channels or stride != 1:
            shortcut = ConvBlockParams.init(
                cfg,
                in_channels,
                out_channels,
                1,
                seed,
                f"{name}.shortcut",
                stride=stride,
                relu=False,
            )
        return cls(
            first=ConvBlockParams.init(
                cfg,
                in_channels,
                out_channels,
                3,
                seed,
                f"{name}.first",
                stride=stride,
                dilation=dilation,
            ),
            second=ConvBlockParams.init(
                cfg,
                out_channels,
                out_channels,
                3,
                seed,
                f"{name}.second",
                dilation=dilation,
                relu=False,
            ),
            shortcut=shortcut,
        )


def residual_block(x: Tensor, p: ResidualBlockParams, training: bool) -> Tensor:
    y = conv_block(conv_block(x, p.first, training), p.second, training)
    skip = x if p.shortcut is None else conv_block(x, p.shortcut, training)
    return (y + skip).relu()


@dataclasses.dataclass
class BackboneParams(Params):
    stem: ConvBlockParams
    stages: list[ResidualBlockParams]

    @classmethod
    def init(
        cls, cfg: NetworkConfig, seed: int, name: str = "backbone"
    ) -> "BackboneParams":
        widths = cfg.backbone_widths
        stem = ConvBlockParams.init(
            cfg, cfg.in_channels, widths[0], 3, seed, f"{name}.stem", stride=2
        )
        stages = []
        prev = widths[0]
        for k, (width, stride, dilation) in enumerate(
            zip(widths, STAGE_STRIDES, STAGE_DILATIONS, strict=True)
        ):
            stages.append(
                ResidualBlockParams.init(
                    cfg, prev, width, seed, f"{name}.stages.{k}", stride, dilation
                )
            )
            prev = width
        return cls(stem=stem, stages=stages)


def backbone_forward(
    image: Tensor, p: BackboneParams, training: bool = False
) -> tuple[Tensor, Tensor]:
    """Stage-3 and final features, both at stride 8

    :param image: ``N×3×H×W`` with ``H`` and ``W`` divisible by 8
    """
    if image.ndim != 4:
        raise ShapeError(f"Expected an N×C×H×W image, got shape {image.shape}")
    h, w = image.shape[2:]
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ShapeError(f"Image extents {h}×{w} must be divisible by {OUTPUT_STRIDE}")
    x = conv_block(image, p.stem, training)
    tapped = x
    for k, stage in enumerate(p.stages):
        x = residual_block(x, stage, training)
        if k == AUX_STAGE:
            tapped = x
    return tapped, x


@dataclasses.dataclass
class PpmParams(Params):
    branches: list[LinearParams]
    bins: tuple[int, ...] = (1, 2, 3, 6)

    @property
    def out_channels(self) -> int:
        in_channels = self.branches[0].in_channels
        return in_channels + sum(b.out_channels for b in self.branches)

    @classmethod
    def init(
        cls, in_channels: int, bins: tuple[int, ...], seed: int, name: str = "head"
    ) -> "PpmParams":
        width = max(1, in_channels // 4)
        branches = [
            LinearParams.init(in_channels, width, seed, f"{name}.branches.{k}")
            for k in range(len(bins))
        ]
        return cls(branches=branches, bins=tuple(bins))


def ppm_head(f: Tensor, p: PpmParams) -> Tensor:
    """Pool to each grid, project, upsample and concatenate with the input"""
    h, w = f.shape[2:]
    if h < max(p.bins) or w < max(p.bins):
        raise ShapeError(f"PPM needs extents >= {max(p.bins)}, got {h}×{w}")
    maps = [f]
    for size, branch in zip(p.bins, p.branches, strict=True):
        pooled = layers.adaptive_avg_pool(f, size, size)
        maps.append(layers.resample_bilinear(layers.linear_1x1(pooled, branch), h, w))
    return T.concat(maps, axis=1)


@dataclasses.dataclass
class AsppParams(Params):
    pooled: LinearParams
    point: LinearParams
    atrous: list[Conv2dParams]
    fuse: LinearParams

    @property
    def out_channels(self) -> int:
        return self.fuse.out_channels

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        rates: tuple[int, ...],
        seed: int,
        name: str = "head",
    ) -> "AsppParams":
        atrous = [
            Conv2dParams.init(
                in_channels, out_channels, 3, seed, f"{name}.atrous.{k}", dilation=r
            )
            for k, r in enumerate(rates)
        ]
        return cls(
            pooled=LinearParams.init(in_channels, out_channels, seed, f"{name}.pooled"),
            point=LinearParams.init(in_channels, out_channels, seed, f"{name}.point"),
            atrous=atrous,
            fuse=LinearParams.init(
                out_channels * (2 + len(rates)), out_channels, seed, f"{name}.fuse"
            ),
        )


def aspp_head(f: Tensor, p: AsppParams) -> Tensor:
    """Image pooling, 1×1 and dilated 3×3 branches, concatenated and fused"""
    h, w = f.shape[2:]
    image_level = layers.linear_1x1(layers.global_avg_pool(f), p.pooled).relu()
    branches = [
        layers.resample_bilinear(image_level, h, w),
        layers.linear_1x1(f, p.point).relu(),
    ]
    branches.extend(layers.conv2d(f, conv).relu() for conv in p.atrous)
    return layers.linear_1x1(T.concat(branches, axis=1), p.fuse)


ContextParams = (
    DgcwParams
    | baselines.ConvContextParams
    | baselines.GapParams
    | baselines.SeParams
    | baselines.NonLocalParams
)


def init_context(
    cfg: NetworkConfig, channels: int, seed: int, name: str = "context"
) -> ContextParams | None:
    kind = cfg.context
    if kind == "none":
        return None
    if kind == "dgcw":
        return DgcwParams.init(
            channels,
            seed,
            name,
            hidden=cfg.g_hidden,
            norm_kind=cfg.norm_kind,
            downsample_ratio=cfg.downsample_ratio,
            block_size=cfg.block_size,
            downsample_mode=cfg.downsample_mode,
            zero_init_g2=cfg.zero_init_g2,
        )
    if kind == "conv":
        return baselines.ConvContextParams.init(
            channels,
            seed,
            name,
            hidden=cfg.g_hidden,
            downsample_ratio=cfg.downsample_ratio,
            downsample_mode=cfg.downsample_mode,
            zero_init_g2=cfg.zero_init_g2,
        )
    if kind == "gap":
        return baselines.GapParams.init(channels, seed, name)
    if kind == "se":
        return baselines.SeParams.init(channels, seed, name, cfg.se_reduction)
    return baselines.NonLocalParams.init(
        channels,
        seed,
        name,
        bottleneck=cfg.nl_bottleneck,
        downsample_ratio=cfg.downsample_ratio if kind == "nld" else 1,
        downsample_mode=cfg.downsample_mode,
    )


def apply_context(
    x: Tensor, p: ContextParams | None, impl: Impl = "fused"
) -> Tensor:
    if p is None:
        return x
    if isinstance(p, DgcwParams):
        return dgcw.dgcw_forward(x, p, impl)
    if isinstance(p, baselines.ConvContextParams):
        return baselines.conv_context(x, p)
    if isinstance(p, baselines.GapParams):
        return baselines.gap_context(x, p)
    if isinstance(p, baselines.SeParams):
        return baselines.se_context(x, p)
    return baselines.nonlocal_context(x, p)


@dataclasses.dataclass
class DgcwNetParams(Params):
    backbone: BackboneParams
    reduce: ConvBlockParams
    classifier: LinearParams
    aux: ConvBlockParams
    aux_classifier: LinearParams
    head: PpmParams | AsppParams | None = None
    context: ContextParams | None = None


def init_network(cfg: NetworkConfig, seed: int) -> DgcwNetParams:
    """Fresh parameters; every tensor draws from a stream keyed by its name, so
    configurations that share a parameter name share its initial value"""
    backbone = BackboneParams.init(cfg, seed)
    width = cfg.backbone_widths[-1]
    head: PpmParams | AsppParams | None = None
    if cfg.head == "ppm":
        head = PpmParams.init(width, cfg.ppm_bins, seed)
        width = head.out_channels
    elif cfg.head == "aspp":
        head = AsppParams.init(width, cfg.aspp_out_channels, cfg.aspp_rates, seed)
        width = head.out_channels
    reduced = cfg.reduced_channels
    aux_in = cfg.backbone_widths[AUX_STAGE]
    params = DgcwNetParams(
        backbone=backbone,
        reduce=ConvBlockParams.init(cfg, width, reduced, 3, seed, "reduce"),
        classifier=LinearParams.init(reduced, cfg.class_count, seed, "classifier"),
        aux=ConvBlockParams.init(cfg, aux_in, reduced, 3, seed, "aux"),
        aux_classifier=LinearParams.init(
            reduced, cfg.class_count, seed, "aux_classifier"
        ),
        head=head,
        context=init_context(cfg, reduced, seed),
    )
    logger.debug(
        f"Initialized network with {sum(t.size for t in params.parameters())} "
        f"trainable values"
    )
    return params


@dataclasses.dataclass
class ForwardOutput:
    main_logits: Tensor
    aux_logits: Tensor
    features: Tensor


def dgcwnet_forward(
    image: Tensor, cfg: NetworkConfig, params: DgcwNetParams, training: bool = False
) -> ForwardOutput:
    """Logits of both classifiers at input resolution

    :param image: ``N×3×H×W`` input
    :param cfg: Network configuration
    :param params: Network parameters
    :param training: Batch statistics and running-stat updates for batch norm
    :return: Main and auxiliary logits plus the features fed to the main classifier
    """
    h, w = image.shape[2:]
    tapped, x = backbone_forward(image, params.backbone, training)
    if isinstance(params.head, PpmParams):
        x = ppm_head(x, params.head)
    elif isinstance(params.head, AsppParams):
        x = aspp_head(x, params.head)
    x = conv_block(x, params.reduce, training)
    features = apply_context(x, params.context, cfg.dgcw_impl)
    main = layers.linear_1x1(features, params.classifier)
    aux_features = conv_block(tapped, params.aux, training)
    aux = layers.linear_1x1(aux_features, params.aux_classifier)
    return ForwardOutput(
        main_logits=layers.resample_bilinear(main, h, w),
        aux_logits=layers.resample_bilinear(aux, h, w),
        features=features,
    )


def loss_terms(
    out: ForwardOutput,
    labels: np.ndarray,
    keep: np.ndarray | None = None,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[Tensor, Tensor]:
    """Cross entropy of the main classifier (restricted to ``keep``) and of the
    auxiliary classifier"""
    main = layers.cross_entropy(out.main_logits, labels, ignore_index, keep=keep)
    aux = layers.cross_entropy(out.aux_logits, labels, ignore_index)
    return main, aux


def total_loss(
    out: ForwardOutput,
    labels: np.ndarray,
    aux_weight: float,
    keep: np.ndarray | None = None,
) -> Tensor:
    main, aux = loss_terms(out, labels, keep)
    return main + aux * aux_weight
