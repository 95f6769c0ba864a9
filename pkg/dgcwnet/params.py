import dataclasses
import logging
from collections.abc import Iterator, Mapping
from typing import Any, ClassVar

import numpy as np

from .exceptions import ConfigError
from .tensor import Tensor
from .util import keyed_rng

logger = logging.getLogger(__name__)


class Params:
    """Base of parameter records

    Subclasses are dataclasses. Fields holding tensors, nested records, lists or
    dicts of those are parameters; everything else is a hyperparameter. Names
    are dot-separated field paths, list items use their index.
    """

    decays: ClassVar[bool] = True

    def _slots(self, prefix: str = "") -> Iterator[tuple[Any, Any, str, bool]]:
        for f in dataclasses.fields(self):  # ty: ignore
            yield from _walk(self, f.name, getattr(self, f.name), prefix, self.decays)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for owner, key, name, _ in self._slots(prefix):
            yield name, _get(owner, key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor, bool]]:
        """Trainable tensors with their weight-decay flag"""
        for owner, key, name, decays in self._slots(prefix):
            tensor = _get(owner, key)
            if tensor.requires_grad:
                yield name, tensor, decays

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def set_tensor(self, name: str, value: Tensor) -> Tensor:
        """Swap the tensor stored under ``name``, returning the previous one"""
        for owner, key, slot, _ in self._slots():
            if slot == name:
                old = _get(owner, key)
                _set(owner, key, value)
                return old
        raise ConfigError(f"No tensor named {name}")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(
        self, state: Mapping[str, np.ndarray], strict: bool = True
    ) -> None:
        """Replace tensor values by name

        :param state: Values by dot-separated name
        :param strict: Reject missing or unexpected names
        """
        seen = set()
        for owner, key, name, _ in self._slots():
            old = _get(owner, key)
            if name not in state:
                if strict:
                    raise ConfigError(f"Checkpoint misses parameter {name}")
                continue
            value = np.asarray(state[name])
            if value.shape != old.shape:
                raise ConfigError(
                    f"{name}: checkpoint shape {value.shape} differs from "
                    f"configured shape {old.shape}"
                )
            fresh = Tensor(value, requires_grad=old.requires_grad, dtype=old.dtype)
            _set(owner, key, fresh)
            seen.add(name)
        unexpected = sorted(set(state) - seen)
        if strict and unexpected:
            raise ConfigError(f"Checkpoint has unexpected parameters {unexpected}")
        logger.debug(f"Loaded {len(seen)} tensors")


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _walk(
    owner: Any, key: Any, value: Any, prefix: str, decays: bool
) -> Iterator[tuple[Any, Any, str, bool]]:
    name = _join(prefix, str(key))
    if isinstance(value, Tensor):
        yield owner, key, name, decays
    elif isinstance(value, Params):
        yield from value._slots(name)
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _walk(value, i, item, name, decays)
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value, k, value[k], name, decays)


def _get(owner: Any, key: Any) -> Tensor:
    if isinstance(owner, (list, dict)):
        return owner[key]
    return getattr(owner, key)


def _set(owner: Any, key: Any, value: Tensor) -> None:
    if isinstance(owner, (list, dict)):
        owner[key] = value
    else:
        setattr(owner, key, value)


def uniform_init(shape: tuple[int, ...], fan_in: int, seed: int, name: str) -> Tensor:
    """Centered uniform weights with bound ``1/sqrt(fan_in)``

    Each parameter draws from its own stream keyed by its name.
    """
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    rng = keyed_rng(seed, f"init:{name}")
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_init(shape: tuple[int, ...], trainable: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=trainable)


def ones_init(shape: tuple[int, ...], trainable: bool = True) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=trainable)
