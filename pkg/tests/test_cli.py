import csv

import pytest

from dgcwnet import cli, suites
from dgcwnet.bench import FIT_HEADER
from dgcwnet.config import RunConfig
from dgcwnet.exceptions import ConfigError
from dgcwnet.suites import CheckResult

TINY = [
    "--class-count", "3",
    "--image-size", "32",
    "--train-size", "2",
    "--val-size", "4",
    "--backbone-widths", "4,4,8,8",
    "--reduced-channels", "4",
    "--downsample-ratio", "2",
    "--crop", "32",
    "--batch-size", "2",
    "--iterations", "1",
]  # fmt: skip


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def only_run(out, command):
    (run_dir,) = out.glob(f"{command}-*")
    return run_dir


@pytest.fixture
def common(tmp_path):
    return ["--out", str(tmp_path / "runs"), "--data-dir", str(tmp_path / "data")]


def test_gen_data_writes_dataset_and_resolved_config(tmp_path, common):
    assert cli.main(["gen-data", *common, *TINY, "--seed", "4"]) == 0
    assert (tmp_path / "data" / "manifest.json").exists()
    assert len(list((tmp_path / "data").glob("img_val_*.dgt"))) == 4
    run_dir = only_run(tmp_path / "runs", "gen-data")
    resolved = RunConfig.load(run_dir / cli.RESOLVED_CONFIG)
    assert resolved.seed == 4
    assert resolved.image_size == 32
    manifest = run_dir / "manifest.json"
    assert manifest.read_bytes() == (tmp_path / "data" / "manifest.json").read_bytes()
    recorded = (run_dir / cli.DATA_DIR_RECORD).read_text().strip()
    assert recorded == str((tmp_path / "data").resolve())


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["train", "--bogus"],
        ["gen-data", "--colour", "red"],
        ["gen-data", "--precision", "f16"],
        ["gradcheck", "--target", "everything"],
        ["bench", "--impl", "sparse"],
        ["eval"],
    ],
)
def test_usage_errors_exit_with_one(argv, tmp_path):
    assert cli.main([*argv, "--out", str(tmp_path)] if argv else argv) == 1


def test_missing_dataset_exits_with_one(common):
    assert cli.main(["train", *common, *TINY]) == 1


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nnoise = 0.0\n")
    parser = cli.build_parser()
    args, extras = parser.parse_known_args(
        ["gen-data", "--config", str(path), "--seed", "3", "--noise", "0.2"]
    )
    assert cli._flag_overrides(args) == {"seed": 3}
    assert extras == ["--noise", "0.2"]


def test_gradcheck_failure_exits_with_two(tmp_path, mocker):
    failing = [CheckResult("ops", "bad", 1.0, 1e-6)]
    mocker.patch.object(suites, "run_suite", return_value=failing)
    assert cli.main(["gradcheck", "--target", "ops", "--out", str(tmp_path)]) == 2
    rows = read_rows(only_run(tmp_path, "gradcheck") / "gradcheck.csv")
    assert rows == [
        ["suite", "case", "error", "threshold", "passed"],
        ["ops", "bad", "1", "1e-06", "false"],
    ]


def test_gradcheck_all_targets(tmp_path, mocker):
    run_suite = mocker.patch.object(suites, "run_suite", return_value=[])
    assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert [c.args[0] for c in run_suite.call_args_list] == list(suites.TARGETS)


def test_bench_writes_tables(tmp_path):
    argv = ["bench", "--out", str(tmp_path), "--shapes", "2:4,2:16"]
    argv += ["--downsample-ratio", "2", "--block-size", "4", "--bench-repeats", "1"]
    assert cli.main(argv) == 0
    run_dir = only_run(tmp_path, "bench")
    assert len(read_rows(run_dir / "bench.csv")) == 5
    fit = read_rows(run_dir / "bench_fit.csv")
    assert fit[0] == list(FIT_HEADER)
    assert len(fit) == 3


def test_variance_rejects_three_checkpoints(tmp_path):
    runner = cli.Runner(RunConfig(out=str(tmp_path)))
    with pytest.raises(ConfigError):
        runner.variance(["a", "b", "c"])


class TestPipeline:
    @pytest.fixture(autouse=True)
    def trained(self, tmp_path, common):
        self.out = tmp_path / "runs"
        self.common = common
        assert cli.main(["gen-data", *common, *TINY]) == 0
        assert cli.main(["train", *common, *TINY, "--precision", "f64"]) == 0
        self.checkpoint = only_run(self.out, "train") / "best.ckpt"

    def test_train_artifacts(self):
        run_dir = self.checkpoint.parent
        assert self.checkpoint.exists()
        rows = read_rows(run_dir / "metrics.csv")
        assert rows[0] == ["iter", "lr", "loss_main", "loss_aux", "val_miou"]
        assert rows[1][0] == "1"

    def test_eval(self):
        argv = ["eval", *self.common, *TINY, "--checkpoint", str(self.checkpoint)]
        assert cli.main([*argv, "--scales", "0.75,1.0", "--flip"]) == 0
        run_dir = only_run(self.out, "eval")
        per_class = read_rows(run_dir / "per_class_iou.csv")
        assert per_class[0] == ["class", "iou", "present"]
        assert len(per_class) == 4
        summary = read_rows(run_dir / "eval.csv")
        assert summary[1][:4] == ["val", "0.75 1", "true", str(4 * 32 * 32)]
        for k in range(4):
            assert (run_dir / f"pred_{k}.pgm").exists()
            assert (run_dir / f"label_{k}.pgm").exists()

    def test_eval_class_count_mismatch(self):
        argv = ["eval", *self.common, *TINY, "--checkpoint", str(self.checkpoint)]
        assert cli.main([*argv, "--class-count", "5"]) == 1

    def test_variance_of_two_checkpoints(self):
        ckpt = str(self.checkpoint)
        argv = ["variance", *self.common, *TINY, "--checkpoint", ckpt]
        assert cli.main([*argv, "--checkpoint", ckpt]) == 0
        run_dir = only_run(self.out, "variance")
        for suffix in ("_0", "_1"):
            for name in ("avg", "counts", "variance"):
                assert (run_dir / f"class_stats_{name}{suffix}.dgt").exists()
            assert (run_dir / f"low_variance_channel{suffix}.pgm").exists()
        histogram = read_rows(run_dir / "variance_histogram.csv")
        assert histogram[0] == ["bin_lo", "bin_hi", "count_0", "count_1"]
        assert len(histogram) == 1 + 8
        assert all(row[2] == row[3] for row in histogram[1:])
        summary = read_rows(run_dir / "variance_summary.csv")
        assert summary[1][1] == summary[2][1]

    def test_variance_with_fixed_edges(self):
        ckpt = str(self.checkpoint)
        argv = ["variance", *self.common, *TINY, "--checkpoint", ckpt]
        assert cli.main([*argv, "--variance-edges", "0,1e-12,2e-12"]) == 0
        histogram = read_rows(only_run(self.out, "variance") / "variance_histogram.csv")
        assert len(histogram) == 1 + 2
        assert sum(int(row[2]) for row in histogram[1:]) == 4


def test_gen_data_is_deterministic(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for target in dirs:
        argv = ["gen-data", "--out", str(tmp_path / "runs"), "--data-dir", str(target)]
        assert cli.main([*argv, *TINY]) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names == sorted(p.name for p in dirs[1].iterdir())
    for name in names:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
