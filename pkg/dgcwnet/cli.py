import argparse
import logging
import math
import shutil
from collections.abc import Callable, Sequence
from datetime import datetime
from pathlib import Path
from typing import Any, NoReturn, cast

import numpy as np
from mypy_extensions import DefaultArg

import dgcwnet

from . import bench, data, metrics, serialization, suites, training
from . import tensor as T
from .config import RunConfig, parse_overrides
from .exceptions import (
    ConfigError,
    FormatError,
    LabelError,
    NumericalError,
    ShapeError,
)
from .layers import IGNORE_INDEX
from .network import DgcwNetParams, NetworkConfig, dgcwnet_forward, init_network
from .tensor import Tensor
from .util import PathLike, label_preview, make_run_dir, write_csv, write_pgm

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "eval", "gradcheck", "bench", "variance")
RESOLVED_CONFIG = "config.resolved"
DATA_DIR_RECORD = "data_dir.txt"
PREVIEW_COUNT = 4

RunDir = Callable[[str, DefaultArg(datetime | None, "dt")], Path]
LoadModel = Callable[[PathLike], tuple[NetworkConfig, DgcwNetParams]]


def _suffix(index: int, total: int) -> str:
    return "" if total == 1 else f"_{index}"


class DataCommands:
    config: RunConfig
    run_dir: RunDir

    def gen_data(self) -> Path:
        """Write the synthetic dataset to ``data_dir``

        The run directory keeps a copy of the manifest next to the resolved
        config, so the run records what was generated and where.

        :return: Path of the dataset manifest
        """
        run_dir = self.run_dir("gen-data")
        manifest = data.write_dataset(self.config.to_synth_spec(), self.config.data_dir)
        shutil.copyfile(manifest, run_dir / manifest.name)
        (run_dir / DATA_DIR_RECORD).write_text(
            f"{Path(self.config.data_dir).resolve()}\n"
        )
        logger.info(f"Dataset written to {self.config.data_dir}, recorded in {run_dir}")
        return manifest


class TrainCommands:
    config: RunConfig
    run_dir: RunDir

    def train(self) -> training.TrainResult:
        """Train one network; the best checkpoint and the log land in the run
        directory

        :raises NumericalError: The loss diverged
        """
        run_dir = self.run_dir("train")
        result = training.train(
            self.config.to_network_config(),
            self.config.to_train_spec(),
            self.config.to_augment_spec(),
            self.config.data_dir,
            run_dir,
        )
        print(f"best val mIoU {result.best_miou:.4f} -> {result.checkpoint}")
        return result


class EvalCommands:
    config: RunConfig
    run_dir: RunDir
    load_model: LoadModel

    def evaluate(self, checkpoint: PathLike, split: str = "val") -> float:
        """Score a checkpoint with the configured scales and flip

        Writes ``eval.csv``, ``per_class_iou.csv`` and PGM previews of the first
        predictions next to their ground truth.

        :param checkpoint: Checkpoint archive written by ``train``
        :param split: Dataset split to score
        :return: Mean IoU
        """
        cfg, params = self.load_model(checkpoint)
        run_dir = self.run_dir("eval")
        dataset = data.load_split(self.config.data_dir, split)
        scales, flip = self.config.scales, self.config.flip
        cm, predictions = metrics.evaluate(
            training.predictor(cfg, params),
            dataset.images,
            dataset.labels,
            cfg.class_count,
            scales=scales,
            flip=flip,
            batch_size=self.config.batch_size,
        )
        mean, per_class = metrics.miou(cm)

        write_csv(
            run_dir / "per_class_iou.csv",
            ("class", "iou", "present"),
            [(k, iou, not math.isnan(iou)) for k, iou in enumerate(per_class)],
        )
        write_csv(
            run_dir / "eval.csv",
            ("split", "scales", "flip", "pixels", "miou"),
            [(split, " ".join(f"{s:g}" for s in scales), flip, cm.total, mean)],
        )
        for k in range(min(PREVIEW_COUNT, len(dataset))):
            previews = {"pred": predictions[k], "label": dataset.labels[k]}
            for name, labels in previews.items():
                write_pgm(
                    run_dir / f"{name}_{k}.pgm",
                    label_preview(labels, cfg.class_count, IGNORE_INDEX),
                    max_value=255,
                )
        print(f"mIoU {mean:.4f} on {split} ({len(dataset)} images)")
        return mean


class CheckCommands:
    config: RunConfig
    run_dir: RunDir

    def gradcheck(self, target: str = "all") -> list[suites.CheckResult]:
        """Run finite-difference gradient suites

        :param target: ``ops``, ``dgcw``, ``net`` or ``all``
        :raises NumericalError: Any case exceeds its threshold
        """
        run_dir = self.run_dir("gradcheck")
        targets = suites.TARGETS if target == "all" else (target,)
        results = []
        for name in targets:
            results += suites.run_suite(cast(suites.Target, name))
        write_csv(
            run_dir / "gradcheck.csv",
            ("suite", "case", "error", "threshold", "passed"),
            [(r.suite, r.name, r.error, r.threshold, r.passed) for r in results],
        )
        failed = [f"{r.suite}/{r.name}" for r in results if not r.passed]
        if failed:
            raise NumericalError(f"Gradient check failed for {', '.join(failed)}")
        print(f"{len(results)} gradient checks passed")
        return results

    def bench(self, impls: Sequence[str] = ("naive", "fused")) -> list[bench.BenchRow]:
        """Compare the naive and fused DGCW paths over ``bench_shapes``

        :raises NumericalError: The two paths disagree
        """
        for impl in impls:
            if impl not in ("naive", "fused"):
                raise ConfigError(f"Unknown implementation {impl!r}")
        run_dir = self.run_dir("bench")
        rows = bench.run_bench(
            self.config.bench_shape_pairs(),
            impls=cast(Sequence[Any], impls),
            downsample_ratio=self.config.downsample_ratio,
            block_size=self.config.block_size,
            repeats=self.config.bench_repeats,
            memory_cap_mb=self.config.naive_memory_cap_mb,
            norm_kind=cast(Any, self.config.norm_kind),
            seed=self.config.seed,
        )
        write_csv(run_dir / "bench.csv", bench.BENCH_HEADER, [r.to_row() for r in rows])
        write_csv(run_dir / "bench_fit.csv", bench.FIT_HEADER, bench.fit_slopes(rows))
        return rows


class VarianceCommands:
    config: RunConfig
    run_dir: RunDir
    load_model: LoadModel

    def variance(
        self, checkpoints: Sequence[PathLike], split: str = "val"
    ) -> list[float]:
        """Class-wise variance of the features fed to the main classifier

        Histograms of several checkpoints share one set of bin edges and are
        written side by side.

        :param checkpoints: One or two checkpoint archives
        :param split: Dataset split the class means are taken over
        :return: Mean class-wise variance per checkpoint
        """
        if not 1 <= len(checkpoints) <= 2:
            raise ConfigError(
                f"variance takes one or two checkpoints, got {len(checkpoints)}"
            )
        run_dir = self.run_dir("variance")
        dataset = data.load_split(self.config.data_dir, split)
        if not len(dataset):
            raise ConfigError(f"Split {split!r} is empty")

        all_stats = []
        for index, checkpoint in enumerate(checkpoints):
            cfg, params = self.load_model(checkpoint)
            first: np.ndarray | None = None
            acc: metrics.ClassFeatureSums | None = None
            with T.no_grad():
                step = self.config.batch_size
                for start in range(0, len(dataset), step):
                    stop = min(start + step, len(dataset))
                    batch = dataset.take(np.arange(start, stop))
                    out = dgcwnet_forward(Tensor(batch.images), cfg, params)
                    feats = out.features.data
                    if acc is None:
                        acc = metrics.ClassFeatureSums.empty(
                            cfg.class_count, feats.shape[1]
                        )
                        first = feats[0]
                    acc.update(feats, batch.labels)
            assert acc is not None and first is not None
            stats = acc.finish()
            all_stats.append(stats)

            suffix = _suffix(index, len(checkpoints))
            serialization.write_dgt(
                run_dir / f"class_stats_avg{suffix}.dgt", stats.class_avg
            )
            serialization.write_dgt(
                run_dir / f"class_stats_counts{suffix}.dgt",
                stats.counts.astype(np.float64),
            )
            serialization.write_dgt(
                run_dir / f"class_stats_variance{suffix}.dgt", stats.variance
            )
            lowest = int(np.argmin(stats.variance))
            write_pgm(run_dir / f"low_variance_channel{suffix}.pgm", first[lowest])
            logger.info(
                f"{checkpoint}: mean class-wise variance {stats.mean_variance:.6g}, "
                f"lowest-variance channel {lowest}"
            )

        edges = np.asarray(self.config.variance_edges, dtype=np.float64)
        if not edges.size:
            edges = metrics.uniform_edges(
                np.concatenate([s.variance for s in all_stats]),
                self.config.variance_bins,
            )
        counts = [metrics.variance_histogram(s, edges) for s in all_stats]
        header = ["bin_lo", "bin_hi"] + [
            f"count{_suffix(i, len(counts))}" for i in range(len(counts))
        ]
        write_csv(
            run_dir / "variance_histogram.csv",
            header,
            [
                (edges[b], edges[b + 1], *(c[b] for c in counts))
                for b in range(len(edges) - 1)
            ],
        )
        means = [s.mean_variance for s in all_stats]
        write_csv(
            run_dir / "variance_summary.csv",
            ("checkpoint", "mean_variance", "present_classes"),
            [
                (str(c), m, int(s.present.sum()))
                for c, m, s in zip(checkpoints, means, all_stats, strict=True)
            ],
        )
        for checkpoint, mean in zip(checkpoints, means, strict=True):
            print(f"{checkpoint}: mean class-wise variance {mean:.6g}")
        return means


class Runner(
    DataCommands, TrainCommands, EvalCommands, CheckCommands, VarianceCommands
):
    def __init__(self, config: RunConfig) -> None:
        """Command surface over one resolved configuration

        :param config: Resolved run configuration
        """
        self.config = config

    def run_dir(self, command: str, dt: datetime | None = None) -> Path:
        """Fresh ``<out>/<command>-<stamp>`` directory holding the resolved config"""
        target = make_run_dir(self.config.out, command, dt)
        (target / RESOLVED_CONFIG).write_text(self.config.resolved_text())
        return target

    def load_model(self, checkpoint: PathLike) -> tuple[NetworkConfig, DgcwNetParams]:
        """Rebuild the network stored in a checkpoint

        :raises ConfigError: Stored tensors do not fit the stored configuration
        """
        tensors, stored = serialization.load_checkpoint(checkpoint)
        if "network" not in stored:
            raise FormatError(f"{checkpoint} carries no network configuration")
        cfg = NetworkConfig.from_repr(stored["network"])
        if cfg.class_count != self.config.class_count:
            raise ConfigError(
                f"{checkpoint} was trained for {cfg.class_count} classes, "
                f"config says {self.config.class_count}"
            )
        params = init_network(cfg, 0)
        params.load_state_dict(tensors)
        logger.info(
            f"Loaded {checkpoint} (iteration {stored.get('iteration')}, "
            f"val mIoU {stored.get('val_miou')})"
        )
        return cfg, params


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="parent of the run directories")
    common.add_argument("--precision", choices=("f32", "f64"))
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    parser = _Parser(
        prog="dgcwnet",
        description="Distance-guided channel weighting for semantic segmentation. "
        "Any config key can be overridden with --key value.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=dgcwnet.__version__)
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen-data", parents=[common], allow_abbrev=False)
    commands.add_parser("train", parents=[common], allow_abbrev=False)

    evaluate = commands.add_parser("eval", parents=[common], allow_abbrev=False)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--split", default="val", choices=("train", "val"))
    evaluate.add_argument("--scales", help="comma-separated resize factors")
    evaluate.add_argument("--flip", action="store_true", default=None)

    check = commands.add_parser("gradcheck", parents=[common], allow_abbrev=False)
    check.add_argument("--target", default="all", choices=(*suites.TARGETS, "all"))

    timing = commands.add_parser("bench", parents=[common], allow_abbrev=False)
    timing.add_argument("--impl", default="naive,fused")
    timing.add_argument("--shapes", help="comma-separated C:P pairs")

    variance = commands.add_parser("variance", parents=[common], allow_abbrev=False)
    variance.add_argument("--checkpoint", action="append", required=True)
    variance.add_argument("--split", default="val", choices=("train", "val"))
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    flags = {
        "seed": args.seed,
        "out": args.out,
        "precision": args.precision,
        "scales": getattr(args, "scales", None),
        "flip": getattr(args, "flip", None),
        "bench_shapes": getattr(args, "shapes", None),
    }
    return {k: v for k, v in flags.items() if v is not None}


def _set_verbosity(args: argparse.Namespace) -> None:
    root = logging.getLogger("dgcwnet")
    if getattr(args, "verbose", False):
        root.setLevel(logging.DEBUG)
    elif getattr(args, "quiet", False):
        root.setLevel(logging.WARNING)
    else:
        root.setLevel(logging.INFO)


def run(args: argparse.Namespace, extras: list[str]) -> Any:
    overrides: dict[str, Any] = dict(parse_overrides(extras))
    overrides.update(_flag_overrides(args))
    config = RunConfig.load(args.config, overrides)
    runner = Runner(config)
    with T.precision(cast(T.Precision, config.precision)):
        if args.command == "gen-data":
            return runner.gen_data()
        if args.command == "train":
            return runner.train()
        if args.command == "eval":
            return runner.evaluate(args.checkpoint, args.split)
        if args.command == "gradcheck":
            return runner.gradcheck(args.target)
        if args.command == "bench":
            return runner.bench([v.strip() for v in args.impl.split(",") if v.strip()])
        if args.command == "variance":
            return runner.variance(args.checkpoint, args.split)
    raise ConfigError(f"Unknown command {args.command!r}")


def _fail(error: Exception) -> None:
    logger.error(f"{type(error).__name__}: {error}")


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of the ``dgcwnet`` command

    :return: 0 on success, 1 on usage or configuration errors, 2 on numerical
        failures
    """
    try:
        args, extras = build_parser().parse_known_args(argv)
        _set_verbosity(args)
        run(args, extras)
    except (ConfigError, FormatError, LabelError, ShapeError, FileNotFoundError) as e:
        _fail(e)
        return 1
    except NumericalError as e:
        _fail(e)
        return 2
    return 0
