"""SGD with momentum and a poly schedule, online hard example mining and the
training loop."""

import dataclasses
import logging
import math
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from . import layers, metrics
from . import tensor as T
from .data import AugmentSpec, SegBatch, augment_batch, load_split
from .exceptions import ConfigError, ShapeError, raise_if_nonfinite
from .network import (
    OUTPUT_STRIDE,
    DgcwNetParams,
    NetworkConfig,
    dgcwnet_forward,
    init_network,
    loss_terms,
)
from .params import Params
from .serialization import save_checkpoint
from .tensor import Tensor
from .util import keyed_rng, write_csv

logger = logging.getLogger(__name__)

PathLike = str | os.PathLike[str]

POLY_POWER = 0.9
LOG_HEADER = ("iter", "lr", "loss_main", "loss_aux", "val_miou")
CHECKPOINT_NAME = "best.ckpt"
LOG_NAME = "metrics.csv"


def poly_lr(base_lr: float, iteration: int, max_iter: int) -> float:
    """``base_lr * (1 - iteration / max_iter) ** 0.9``"""
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    if max_iter == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iter) ** POLY_POWER


@dataclasses.dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iteration: int = 0
    max_iter: int = 0
    buffers: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.iteration <= self.max_iter:
            raise ConfigError(
                f"iteration {self.iteration} outside [0, {self.max_iter}]"
            )
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr, momentum and weight_decay must be >= 0")

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.iteration, self.max_iter)


def sgd_step(
    params: Params,
    state: OptimState,
    grads: Mapping[str, np.ndarray] | None = None,
    lr: float | None = None,
) -> None:
    """``v = momentum * v + grad + decay * param``; ``param -= lr * v``

    Gradients default to each parameter's ``.grad``; missing gradients count as
    zero. Parameters of normalization layers are not decayed.

    :param params: Parameters updated in place
    :param state: Momentum buffers and hyperparameters
    :param grads: Gradients by parameter name
    :param lr: Step size; the scheduled rate of ``state`` when omitted
    """
    step = state.lr if lr is None else lr
    for name, tensor, decays in params.named_parameters():
        grad = grads.get(name) if grads is not None else tensor.grad
        g = np.zeros_like(tensor.data) if grad is None else np.asarray(grad)
        if g.shape != tensor.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {tensor.shape}")
        if decays and state.weight_decay:
            g = g + state.weight_decay * tensor.data
        velocity = state.buffers.get(name)
        velocity = g if velocity is None else state.momentum * velocity + g
        state.buffers[name] = velocity
        updated = (tensor.data - step * velocity).astype(tensor.dtype)
        updated.flags.writeable = False
        tensor.data = updated


def ohem_filter(
    probs_correct: np.ndarray, thresh: float = 0.7, keep_min: int = 100000
) -> np.ndarray:
    """Mask of the pixels kept by online hard example mining

    Pixels with a correct-class probability below ``thresh`` are hard. When fewer
    than ``min(keep_min, valid)`` are hard, the ``min(keep_min, valid)`` lowest
    probabilities are kept instead, ties going to the lower flat index. NaN marks
    an ignored pixel, which is never kept.
    """
    probs = np.asarray(probs_correct, dtype=np.float64)
    valid = ~np.isnan(probs)
    hard = valid & (probs < thresh)
    need = min(keep_min, int(valid.sum()))
    if int(hard.sum()) >= need:
        return hard
    flat = np.where(valid, probs, np.inf).reshape(-1)
    order = np.argsort(flat, kind="stable")[:need]
    kept = np.zeros(flat.shape, dtype=bool)
    kept[order] = True
    return kept.reshape(probs.shape)


@dataclasses.dataclass
class TrainSpec:
    batch_size: int = 8
    iterations: int = 1500
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    ohem: bool = False
    ohem_thresh: float = 0.7
    ohem_keep: int = 100000
    eval_interval: int = 0
    train_split: str = "train"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive: {self.batch_size}")
        if self.iterations < 0 or self.eval_interval < 0:
            raise ConfigError("iterations and eval_interval must be >= 0")
        if self.train_split not in ("train", "trainval"):
            raise ConfigError(
                f"train_split must be train or trainval: {self.train_split}"
            )


@dataclasses.dataclass
class TrainResult:
    params: DgcwNetParams
    rows: list[tuple[Any, ...]]
    best_miou: float
    checkpoint: Path
    log: Path


def predictor(cfg: NetworkConfig, params: DgcwNetParams) -> metrics.Net:
    def _net(x: Tensor) -> Tensor:
        return dgcwnet_forward(x, cfg, params, training=False).main_logits

    return _net


def checkpoint_config(
    cfg: NetworkConfig, iteration: int, val_miou: float
) -> dict[str, Any]:
    return {"network": cfg.to_repr(), "iteration": iteration, "val_miou": val_miou}


def _batch_indices(
    count: int, batch_size: int, seed: int, iteration: int
) -> np.ndarray:
    per_epoch = max(1, math.ceil(count / batch_size))
    epoch, step = divmod(iteration, per_epoch)
    order = keyed_rng(seed, "shuffle", epoch).permutation(count)
    picked = order[step * batch_size : (step + 1) * batch_size]
    if len(picked) < batch_size:
        picked = np.concatenate([picked, order[: batch_size - len(picked)]])
    return picked


def train(
    cfg: NetworkConfig,
    spec: TrainSpec,
    augment_spec: AugmentSpec,
    data_dir: PathLike,
    run_dir: PathLike,
) -> TrainResult:
    """Train from a fresh initialization and keep the best validation checkpoint

    :param cfg: Network configuration
    :param spec: Optimization settings
    :param augment_spec: Training-time augmentation
    :param data_dir: Dataset directory written by :func:`dgcwnet.data.write_dataset`
    :param run_dir: Directory receiving the checkpoint and the CSV log
    :raises NumericalError: The loss became non-finite
    """
    if augment_spec.crop % OUTPUT_STRIDE:
        raise ConfigError(
            f"crop must be divisible by {OUTPUT_STRIDE}: {augment_spec.crop}"
        )
    train_set = load_split(data_dir, spec.train_split)
    val_set = load_split(data_dir, "val")
    if not len(train_set):
        raise ConfigError(f"Training split {spec.train_split!r} is empty")

    run_dir = Path(run_dir)
    checkpoint = run_dir / CHECKPOINT_NAME
    log = run_dir / LOG_NAME
    params = init_network(cfg, spec.seed)
    state = OptimState(
        base_lr=spec.base_lr,
        momentum=spec.momentum,
        weight_decay=spec.weight_decay,
        max_iter=spec.iterations,
    )
    interval = spec.eval_interval or max(1, math.ceil(len(train_set) / spec.batch_size))
    logger.info(
        f"Training {cfg.context} context on {len(train_set)} images for "
        f"{spec.iterations} iterations, logging every {interval}"
    )

    rows: list[tuple[Any, ...]] = []
    best = -math.inf
    save_checkpoint(
        checkpoint, params.state_dict(), checkpoint_config(cfg, 0, math.nan)
    )
    sums = np.zeros(2)
    seen = 0
    for it in range(spec.iterations):
        state.iteration = it
        lr = state.lr
        indices = _batch_indices(len(train_set), spec.batch_size, spec.seed, it)
        batch = augment_batch(
            train_set.take(indices), augment_spec, spec.seed, it * spec.batch_size
        )
        main, aux = _train_step(cfg, spec, params, state, batch, lr)
        sums += (main, aux)
        seen += 1

        done = it + 1
        if done % interval and done != spec.iterations:
            continue
        val_miou = validate(cfg, params, val_set, spec.batch_size)
        loss_main, loss_aux = sums / seen
        rows.append((done, lr, loss_main, loss_aux, val_miou))
        logger.info(
            f"iter {done}: lr {lr:.6g} loss_main {loss_main:.5f} "
            f"loss_aux {loss_aux:.5f} val_miou {val_miou:.4f}"
        )
        sums[:] = 0
        seen = 0
        if not math.isnan(val_miou) and val_miou > best:
            best = val_miou
            save_checkpoint(
                checkpoint, params.state_dict(), checkpoint_config(cfg, done, val_miou)
            )

    write_csv(log, LOG_HEADER, rows)
    return TrainResult(
        params=params,
        rows=rows,
        best_miou=best if rows else math.nan,
        checkpoint=checkpoint,
        log=log,
    )


def _train_step(
    cfg: NetworkConfig,
    spec: TrainSpec,
    params: DgcwNetParams,
    state: OptimState,
    batch: SegBatch,
    lr: float,
) -> tuple[float, float]:
    with T.Graph():
        out = dgcwnet_forward(Tensor(batch.images), cfg, params, training=True)
        keep = None
        if spec.ohem:
            probs = layers.correct_class_probs(out.main_logits, batch.labels)
            keep = ohem_filter(probs, spec.ohem_thresh, spec.ohem_keep)
        main, aux = loss_terms(out, batch.labels, keep)
        loss = main + aux * cfg.aux_weight
        raise_if_nonfinite(loss.data, f"loss at iteration {state.iteration}")
        T.backward(loss)
    sgd_step(params, state, lr=lr)
    params.zero_grad()
    return main.item(), aux.item()


def validate(
    cfg: NetworkConfig, params: DgcwNetParams, val_set: SegBatch, batch_size: int
) -> float:
    if not len(val_set):
        return math.nan
    cm, _ = metrics.evaluate(
        predictor(cfg, params),
        val_set.images,
        val_set.labels,
        cfg.class_count,
        batch_size=batch_size,
    )
    return metrics.miou(cm)[0]
