"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order. Every differentiable operation that
touches a tensor with ``requires_grad`` is appended to the active :class:`Graph`;
:func:`backward` walks that record once, in reverse execution order.
"""

import contextlib
import logging
import threading
from collections.abc import Callable, Iterator, Sequence
from typing import Any, Literal, cast

import numpy as np

from .exceptions import GraphError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Precision = Literal["f32", "f64"]
ElementwiseKind = Literal[
    "add",
    "subtract",
    "multiply",
    "divide",
    "square",
    "relu",
    "tanh",
    "exp",
    "negate",
    "sigmoid",
    "sqrt",
    "log",
]
ReduceKind = Literal["sum", "mean", "max", "variance"]
Axis = int | tuple[int, ...]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]
ArrayLike = Any

DTYPES: dict[str, type[np.floating[Any]]] = {"f32": np.float32, "f64": np.float64}

_UNARY = {"square", "relu", "tanh", "exp", "negate", "sigmoid", "sqrt", "log"}

_precision: Precision = "f64"
_local = threading.local()


def get_precision() -> Precision:
    return _precision


def set_precision(precision: Precision) -> None:
    """Select the scalar type of newly created tensors

    :param precision: ``"f32"`` or ``"f64"``
    """
    global _precision
    if precision not in DTYPES:
        raise ValueError(f"Unknown precision {precision!r}")
    _precision = precision


@contextlib.contextmanager
def precision(value: Precision) -> Iterator[None]:
    previous = get_precision()
    set_precision(value)
    try:
        yield
    finally:
        set_precision(previous)


def default_dtype() -> type[np.floating[Any]]:
    return DTYPES[_precision]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Any = None,
    ) -> None:
        arr = np.array(data, dtype=dtype or default_dtype())
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        data = np.asarray(data)
        out = cls.__new__(cls)
        data.flags.writeable = False
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return cast(tuple[int, ...], self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: float) -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("subtract", self, other)

    def __rsub__(self, other: float) -> "Tensor":
        return elementwise("add", elementwise("negate", self), other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("multiply", self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return elementwise("multiply", self, other)

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("divide", self, other)

    def __neg__(self) -> "Tensor":
        return elementwise("negate", self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Axis, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Axis, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def square(self) -> "Tensor":
        return elementwise("square", self)


class Node:
    """One executed operation in a :class:`Graph`"""

    __slots__ = ("name", "inputs", "output", "backward", "graph", "index")

    def __init__(
        self,
        name: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: BackwardFn,
        graph: "Graph",
        index: int,
    ) -> None:
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.graph = graph
        self.index = index


class Graph:
    """Ordered record of the differentiable operations of one thread of work

    Graphs are independent of each other. A graph is made current with
    ``with Graph() as g:``; outside any ``with`` block each thread records into
    its own default graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _graph_stack().pop()

    def record(
        self,
        name: str,
        inputs: tuple[Tensor, ...],
        output: Tensor,
        backward: BackwardFn,
    ) -> None:
        for t in inputs:
            if t._node is not None and t._node.graph is not self:
                raise GraphError(f"{name}: input was recorded by a different graph")
        output.requires_grad = True
        output._node = Node(name, inputs, output, backward, self, len(self.nodes))
        self.nodes.append(output._node)

    def clear(self) -> None:
        self._release(len(self.nodes))

    def backward(self, loss: Tensor) -> None:
        node = loss._node
        if node is None or node.graph is not self:
            raise GraphError("loss was not recorded by this graph")

        stop = node.index
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for current in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(current.output), None)
            if g is None:
                continue
            input_grads = current.backward(g)
            for t, gi in zip(current.inputs, input_grads, strict=True):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi), t.shape).astype(t.dtype, copy=False)
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        logger.debug(f"backward swept {stop + 1} recorded operations")
        self._release(stop + 1)

    def _release(self, count: int) -> None:
        for node in self.nodes[:count]:
            node.output._node = None
            node.output.requires_grad = False
        self.nodes = self.nodes[count:]
        for k, node in enumerate(self.nodes):
            node.index = k


def _graph_stack() -> list[Graph]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = [Graph()]
        _local.graphs = stack
    return cast(list[Graph], stack)


def current_graph() -> Graph:
    return _graph_stack()[-1]


def record(
    name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: BackwardFn,
) -> Tensor:
    """Wrap a computed array and register its backward rule

    ``backward`` receives the gradient of the output and returns one gradient (or
    ``None``) per input, in input order. Broadcast inputs are reduced back to their
    own shape by the graph.
    """
    out = Tensor._wrap(data)
    inputs = tuple(inputs)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        current_graph().record(name, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return cast(tuple[int, ...], np.broadcast_shapes(a, b))
    except ValueError as e:
        raise ShapeError(f"Cannot broadcast shapes {a} and {b}") from e


def as_tensor(value: "Tensor | ArrayLike", like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def elementwise(
    kind: ElementwiseKind,
    a: Tensor,
    b: "Tensor | float | None" = None,
    eps: float = 0.0,
) -> Tensor:
    """Apply an elementwise operation

    Binary kinds broadcast ``b`` against ``a`` by the trailing-dimension rule.
    ``divide`` computes ``a / (b + eps)``; with ``eps == 0`` a zero denominator is
    an error rather than an infinity.

    :param kind: Operation kind
    :param a: First operand
    :param b: Second operand for binary kinds
    :param eps: Denominator offset for ``divide``
    :return: Result tensor of the broadcast shape
    """
    x = a.data
    if kind in _UNARY:
        return _unary(kind, a, x)

    if b is None:
        raise ValueError(f"{kind} needs two operands")
    other = as_tensor(b, like=a)
    y = other.data
    broadcast_shape(a.shape, other.shape)

    if kind == "add":
        return record("add", x + y, (a, other), lambda g: (g, g))
    if kind == "subtract":
        return record("subtract", x - y, (a, other), lambda g: (g, -g))
    if kind == "multiply":
        return record("multiply", x * y, (a, other), lambda g: (g * y, g * x))
    if kind == "divide":
        den = y + eps if eps else y
        if not eps and np.any(den == 0):
            raise NumericalError("Division by zero without a denominator offset")
        out = x / den
        return record(
            "divide", out, (a, other), lambda g: (g / den, -g * x / (den * den))
        )
    raise ValueError(f"Unknown elementwise kind {kind!r}")


def _unary(kind: str, a: Tensor, x: np.ndarray) -> Tensor:
    if kind == "square":
        return record("square", x * x, (a,), lambda g: (2.0 * x * g,))
    if kind == "relu":
        mask = x > 0
        out = np.where(mask, x, x.dtype.type(0))
        return record("relu", out, (a,), lambda g: (g * mask,))
    if kind == "tanh":
        t = np.tanh(x)
        return record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))
    if kind == "exp":
        e = np.exp(x)
        return record("exp", e, (a,), lambda g: (g * e,))
    if kind == "negate":
        return record("negate", -x, (a,), lambda g: (-g,))
    if kind == "sigmoid":
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))
    if kind == "sqrt":
        if np.any(x < 0):
            raise NumericalError("Square root of a negative value")
        r = np.sqrt(x)
        return record("sqrt", r, (a,), lambda g: (g * 0.5 / r,))
    if kind == "log":
        if np.any(x <= 0):
            raise NumericalError("Logarithm of a non-positive value")
        return record("log", np.log(x), (a,), lambda g: (g / x,))
    raise ValueError(f"Unknown elementwise kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 or batched rank-3 operands

    :param a: ``M×K`` or ``N×M×K``
    :param b: ``K×P`` or ``N×K×P``
    :return: The contraction over ``K``
    """
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul needs rank 2 or 3 operands: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"Inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3:
        broadcast_shape(a.shape[:1], b.shape[:1])

    x, y = a.data, b.data

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return record("matmul", x @ y, (a, b), _backward)


def _axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"Axis {ax} out of range for rank {ndim}")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def reduce(kind: ReduceKind, a: Tensor, axis: Axis, keepdims: bool = False) -> Tensor:
    """Reduce along one or more axes

    ``variance`` is the population variance, computed as mean of squares minus
    square of mean on data shifted by its mean (the second term compensates the
    rounding of the shift).
    """
    axes = _axes(axis, a.ndim)
    x = a.data
    count = int(np.prod([x.shape[ax] for ax in axes]))

    def _expand(g: np.ndarray) -> np.ndarray:
        return g if keepdims else np.expand_dims(g, axes)

    if kind == "sum":
        out = x.sum(axis=axes, keepdims=keepdims)
        return record(
            "sum", out, (a,), lambda g: (np.broadcast_to(_expand(g), x.shape),)
        )
    if kind == "mean":
        out = x.mean(axis=axes, keepdims=keepdims)
        return record(
            "mean",
            out,
            (a,),
            lambda g: (np.broadcast_to(_expand(g) / count, x.shape),),
        )
    if kind == "max":
        kept = x.max(axis=axes, keepdims=True)
        mask = (x == kept).astype(x.dtype)
        mask /= mask.sum(axis=axes, keepdims=True)
        out = kept if keepdims else np.squeeze(kept, axis=axes)
        return record("max", out, (a,), lambda g: (_expand(g) * mask,))
    if kind == "variance":
        d = x - x.mean(axis=axes, keepdims=True)
        shift = d.mean(axis=axes, keepdims=True)
        var = np.maximum((d * d).mean(axis=axes, keepdims=True) - shift * shift, 0)
        out = var if keepdims else np.squeeze(var, axis=axes)
        centered = d - shift
        return record(
            "variance",
            out,
            (a,),
            lambda g: (_expand(g) * 2.0 * centered / count,),
        )
    raise ValueError(f"Unknown reduce kind {kind!r}")


def softmax(a: Tensor, axis: int) -> Tensor:
    (ax,) = _axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return record("softmax", s, (a,), _backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"Cannot reshape {a.shape} to {tuple(shape)}") from e
    src = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(axes)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError(f"Invalid permutation {order} for rank {a.ndim}")
    inverse = tuple(np.argsort(order))
    return record(
        "permute",
        np.ascontiguousarray(a.data.transpose(order)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    (ax,) = _axes(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise ShapeError(f"Cannot concatenate {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return record(
        "concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax))
    )


def flip(a: Tensor, axis: int) -> Tensor:
    (ax,) = _axes(axis, a.ndim)
    return record(
        "flip",
        np.ascontiguousarray(np.flip(a.data, axis=ax)),
        (a,),
        lambda g: (np.flip(g, axis=ax),),
    )


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf

    :param loss: Scalar tensor
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            ones = np.ones_like(loss.data)
            loss.grad = ones if loss.grad is None else loss.grad + ones
        return
    loss._node.graph.backward(loss)


def gradcheck(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    one_sided: bool = False,
) -> float:
    """Compare autodiff gradients with central differences

    :param f: Scalar-valued function of the checked tensor(s)
    :param x: One tensor, or a sequence passed positionally to ``f``
    :param step: Finite-difference step
    :param max_elements: Check a fixed random subset of at most this many
        elements per input instead of all of them
    :param seed: Seed of that subset
    :param one_sided: Also score each element by its forward and backward
        differences and keep the closest of the three. A ReLU kink inside the
        step only spoils one side, so piecewise-linear graphs stay checkable.
    :return: Maximum relative error, ``|a - n| / max(|a|, |n|, 1e-8)``
    """
    inputs = list(x) if isinstance(x, (list, tuple)) else [cast(Tensor, x)]
    leaves = [Tensor(t.data, requires_grad=True, dtype=t.dtype) for t in inputs]
    with Graph():
        backward(f(*leaves))
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]

    worst = 0.0
    rng = np.random.default_rng(seed)
    with no_grad():
        center = f(*inputs).item() if one_sided else 0.0
        for k, base in enumerate(inputs):
            positions: Sequence[int] = range(base.size)
            if max_elements is not None and base.size > max_elements:
                positions = np.sort(rng.choice(base.size, max_elements, replace=False))
            for idx in positions:
                values = []
                for delta in (step, -step):
                    moved = base.data.copy()
                    moved.flat[idx] += delta
                    args = list(inputs)
                    args[k] = Tensor(moved, dtype=base.dtype)
                    values.append(f(*args).item())
                exact = float(analytic[k].flat[idx])
                estimates = [(values[0] - values[1]) / (2.0 * step)]
                if one_sided:
                    estimates.append((values[0] - center) / step)
                    estimates.append((center - values[1]) / step)
                err = min(
                    abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
                    for numeric in estimates
                )
                worst = max(worst, err)
    logger.debug(f"gradcheck max relative error {worst:.3e}")
    return worst
