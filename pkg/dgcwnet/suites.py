"""Finite-difference gradient suites run by ``dgcwnet gradcheck``.

Every case reduces its output to a scalar with fixed random weights, so no
gradient is trivially uniform, and runs in 64-bit precision.
"""

import dataclasses
import logging
from collections.abc import Callable, Iterator
from typing import Literal, get_args

import numpy as np

from . import baselines, dgcw, layers
from . import tensor as T
from .exceptions import ConfigError
from .network import NetworkConfig, dgcwnet_forward, init_network
from .params import Params
from .tensor import Tensor
from .util import keyed_rng

logger = logging.getLogger(__name__)

Target = Literal["ops", "dgcw", "net"]
TARGETS: tuple[str, ...] = get_args(Target)
THRESHOLDS: dict[str, float] = {"ops": 1e-6, "dgcw": 1e-5, "net": 1e-4}
STEPS: dict[str, float] = {"ops": 1e-4, "dgcw": 1e-5, "net": 1e-5}


@dataclasses.dataclass
class CheckResult:
    suite: str
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _uniform(
    shape: tuple[int, ...], purpose: str, low: float = -1.0, high: float = 1.0
) -> Tensor:
    return Tensor(keyed_rng(0, f"gradcheck:{purpose}").uniform(low, high, size=shape))


def _away_from_zero(shape: tuple[int, ...], purpose: str) -> Tensor:
    rng = keyed_rng(0, f"gradcheck:{purpose}")
    magnitude = rng.uniform(0.2, 1.0, size=shape)
    return Tensor(np.where(rng.uniform(size=shape) < 0.5, -magnitude, magnitude))


def scalarize(out: Tensor, purpose: str) -> Tensor:
    """``Σ out * w`` for fixed random ``w``"""
    weights = _uniform(out.shape, f"weights:{purpose}")
    return T.reduce("sum", out * weights, tuple(range(out.ndim)))


def check_parameters(
    loss: Callable[[], Tensor],
    params: Params,
    step: float,
    max_elements: int | None = None,
    one_sided: bool = False,
) -> float:
    """Worst relative error over every trainable tensor of ``params``"""
    worst = 0.0
    for name, original, _ in list(params.named_parameters()):

        def _swapped(t: Tensor, name: str = name) -> Tensor:
            params.set_tensor(name, t)
            return loss()

        try:
            error = T.gradcheck(
                _swapped, original, step, max_elements, one_sided=one_sided
            )
        finally:
            params.set_tensor(name, original)
        logger.debug(f"  {name}: {error:.3e}")
        worst = max(worst, error)
    params.zero_grad()
    return worst


Case = tuple[str, Callable[[], float]]


def _op_cases(step: float) -> Iterator[Case]:
    a = _uniform((3, 4), "a")
    b = _uniform((1, 4), "b")
    positive = _uniform((3, 4), "positive", 0.5, 2.0)
    kinked = _away_from_zero((3, 4), "kinked")

    def unary(kind: T.ElementwiseKind, x: Tensor) -> Case:
        return kind, lambda: T.gradcheck(
            lambda t: scalarize(T.elementwise(kind, t), kind), x, step
        )

    def binary(kind: T.ElementwiseKind, y: Tensor) -> Case:
        return kind, lambda: T.gradcheck(
            lambda s, t: scalarize(T.elementwise(kind, s, t), kind), [a, y], step
        )

    yield binary("add", b)
    yield binary("subtract", b)
    yield binary("multiply", b)
    yield binary("divide", _uniform((1, 4), "den", 0.5, 1.5))
    smooth: tuple[T.ElementwiseKind, ...] = (
        "square",
        "tanh",
        "exp",
        "negate",
        "sigmoid",
    )
    for kind in smooth:
        yield unary(kind, a)
    yield unary("relu", kinked)
    yield unary("sqrt", positive)
    yield unary("log", positive)

    m1, m2 = _uniform((4, 5), "m1"), _uniform((5, 3), "m2")
    yield "matmul", lambda: T.gradcheck(
        lambda s, t: scalarize(s @ t, "matmul"), [m1, m2], step
    )
    b1, b2 = _uniform((2, 3, 4), "b1"), _uniform((2, 4, 2), "b2")
    yield "batched_matmul", lambda: T.gradcheck(
        lambda s, t: scalarize(s @ t, "bmm"), [b1, b2], step
    )
    x = _uniform((2, 3, 4), "reduce")
    for kind in ("sum", "mean", "max", "variance"):
        yield f"reduce_{kind}", lambda kind=kind: T.gradcheck(
            lambda t: scalarize(T.reduce(kind, t, 1), kind), x, step
        )
    yield "softmax", lambda: T.gradcheck(
        lambda t: scalarize(T.softmax(t, 2), "softmax"), x, step
    )
    yield "reshape_permute", lambda: T.gradcheck(
        lambda t: scalarize(T.permute(T.reshape(t, (4, 3, 2)), (2, 0, 1)), "perm"),
        x,
        step,
    )
    yield "concat_flip", lambda: T.gradcheck(
        lambda s, t: scalarize(T.flip(T.concat([s, t], 0), 1), "cat"), [a, a], step
    )
    yield from _layer_cases(step)


def _layer_cases(step: float) -> Iterator[Case]:
    fmap = _uniform((2, 3, 5, 5), "fmap")

    logits = _uniform((2, 3, 3, 3), "logits", -2.0, 2.0)
    labels = keyed_rng(0, "gradcheck:labels").integers(0, 3, size=(2, 3, 3))
    labels[0, 0, 0] = layers.IGNORE_INDEX
    yield "cross_entropy", lambda: T.gradcheck(
        lambda t: layers.cross_entropy(t, labels), logits, step
    )

    linear = layers.LinearParams.init(3, 4, 0, "gradcheck.linear")
    yield "linear_1x1", lambda: max(
        T.gradcheck(
            lambda t: scalarize(layers.linear_1x1(t, linear), "lin"), fmap, step
        ),
        check_parameters(
            lambda: scalarize(layers.linear_1x1(fmap, linear), "lin"), linear, step
        ),
    )
    for stride, dilation in ((1, 2), (2, 1)):
        conv = layers.Conv2dParams.init(
            3, 2, 3, 0, "gradcheck.conv", stride=stride, dilation=dilation
        )

        def conv_loss(t: Tensor, conv: layers.Conv2dParams = conv) -> Tensor:
            return scalarize(layers.conv2d(t, conv), "conv")

        yield f"conv2d_s{stride}_d{dilation}", lambda conv=conv, f=conv_loss: max(
            T.gradcheck(f, fmap, step),
            check_parameters(lambda: f(fmap), conv, step),
        )
    bn = layers.BatchNormParams.init(3)
    yield "batchnorm", lambda: max(
        T.gradcheck(
            lambda t: scalarize(layers.batchnorm(t, bn, True), "bn"), fmap, step
        ),
        check_parameters(
            lambda: scalarize(layers.batchnorm(fmap, bn, True), "bn"), bn, step
        ),
    )
    yield "resample_bilinear", lambda: T.gradcheck(
        lambda t: scalarize(layers.resample_bilinear(t, 7, 3), "up"), fmap, step
    )
    yield "adaptive_avg_pool", lambda: T.gradcheck(
        lambda t: scalarize(layers.adaptive_avg_pool(t, 3, 2), "pool"), fmap, step
    )
    yield "global_avg_pool", lambda: T.gradcheck(
        lambda t: scalarize(layers.global_avg_pool(t), "gap"), fmap, step
    )


def _module_check(
    forward: Callable[[Tensor], Tensor], x: Tensor, params: Params, step: float
) -> float:
    purpose = "module"
    return max(
        T.gradcheck(lambda t: scalarize(forward(t), purpose), x, step),
        check_parameters(lambda: scalarize(forward(x), purpose), params, step),
    )


def _dgcw_cases(step: float) -> Iterator[Case]:
    x = _uniform((1, 3, 6, 6), "dgcw")
    for kind in dgcw.NORM_KINDS:
        for impl in dgcw.IMPLS:
            p = dgcw.DgcwParams.init(
                3,
                0,
                "gradcheck.dgcw",
                norm_kind=kind,  # ty: ignore
                downsample_ratio=2,
                block_size=4,
                zero_init_g2=False,
            )
            yield f"dgcw_{impl}_{kind}", lambda p=p, impl=impl: _module_check(
                lambda t: dgcw.dgcw_forward(t, p, impl), x, p, step
            )

    conv = baselines.ConvContextParams.init(
        3, 0, "gradcheck.conv", downsample_ratio=2, zero_init_g2=False
    )
    yield "conv_context", lambda: _module_check(
        lambda t: baselines.conv_context(t, conv), x, conv, step
    )
    gap = baselines.GapParams.init(3, 0, "gradcheck.gap")
    yield "gap_context", lambda: _module_check(
        lambda t: baselines.gap_context(t, gap), x, gap, step
    )
    se = baselines.SeParams.init(3, 0, "gradcheck.se", reduction=1)
    yield "se_context", lambda: _module_check(
        lambda t: baselines.se_context(t, se), x, se, step
    )
    for ratio, label in ((1, "nlh"), (2, "nld")):
        nl = baselines.NonLocalParams.init(
            3, 0, f"gradcheck.{label}", downsample_ratio=ratio
        )
        yield f"{label}_context", lambda nl=nl: _module_check(
            lambda t: baselines.nonlocal_context(t, nl), x, nl, step
        )


def micro_network_config() -> NetworkConfig:
    return NetworkConfig(
        class_count=3,
        backbone_widths=(4, 4, 8, 8),
        reduced_channels=4,
        context="dgcw",
        downsample_ratio=1,
        zero_init_g2=False,
        dgcw_impl="naive",
        batchnorm=False,
    )


def unit_gain(params: Params, seed: int = 0) -> None:
    """Rescale fan-in weights to ReLU gain and draw small nonzero biases

    Without normalization the default init shrinks activations layer by layer.
    """
    for name, t, _ in list(params.named_parameters()):
        if name.endswith("bias"):
            rng = keyed_rng(seed, f"gradcheck:{name}")
            value = rng.uniform(-0.1, 0.1, size=t.shape)
        else:
            value = t.data * np.sqrt(6.0)
        params.set_tensor(name, Tensor(value, requires_grad=True, dtype=t.dtype))


def _net_cases(step: float) -> Iterator[Case]:
    cfg = micro_network_config()
    params = init_network(cfg, 0)
    unit_gain(params)
    image = _uniform((1, 3, 16, 16), "image", 0.0, 1.0)
    labels = keyed_rng(0, "gradcheck:net-labels").integers(0, 3, size=(1, 16, 16))

    def loss(x: Tensor) -> Tensor:
        out = dgcwnet_forward(x, cfg, params, training=True)
        main = layers.cross_entropy(out.main_logits, labels)
        return main + layers.cross_entropy(out.aux_logits, labels) * cfg.aux_weight

    yield "micro_network", lambda: max(
        T.gradcheck(loss, image, step, max_elements=16, one_sided=True),
        check_parameters(
            lambda: loss(image), params, step, max_elements=4, one_sided=True
        ),
    )


def run_suite(target: Target) -> list[CheckResult]:
    """Run one suite in 64-bit precision

    :param target: ``ops``, ``dgcw`` or ``net``
    :return: One result per case
    """
    cases = {"ops": _op_cases, "dgcw": _dgcw_cases, "net": _net_cases}
    if target not in cases:
        raise ConfigError(f"Unknown gradcheck target {target!r}")
    threshold = THRESHOLDS[target]
    results = []
    with T.precision("f64"):
        for name, run in cases[target](STEPS[target]):
            error = run()
            result = CheckResult(target, name, error, threshold)
            status = "ok" if result.passed else "FAILED"
            logger.info(f"{target}/{name}: max relative error {error:.3e} {status}")
            results.append(result)
    return results
