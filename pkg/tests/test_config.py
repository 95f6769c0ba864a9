import pytest

from dgcwnet import config
from dgcwnet.config import RunConfig
from dgcwnet.exceptions import ConfigError

CONFIG_TEXT = """\
# tiny run
class_count = 3
backbone_widths = 4, 4, 8, 8
ohem = yes
base_lr = 0.02  # faster
"""


def test_defaults():
    cfg = RunConfig()
    assert cfg.precision == "f32"
    assert cfg.downsample_ratio == 4
    assert cfg.to_network_config().context == "dgcw"
    assert cfg.bench_shape_pairs() == [(8, 16), (8, 36), (8, 64), (16, 64)]


def test_load_with_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CONFIG_TEXT)
    cfg = RunConfig.load(path, {"class_count": "5", "scales": "0.75,1.0"})
    assert cfg.class_count == 5
    assert cfg.backbone_widths == (4, 4, 8, 8)
    assert cfg.ohem is True
    assert cfg.base_lr == 0.02
    assert cfg.scales == (0.75, 1.0)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="colour"):
        RunConfig.from_flat_repr(colour="red")


@pytest.mark.parametrize(
    "values",
    [
        {"iterations": "many"},
        {"ohem": "maybe"},
        {"batch_size": 2.5},
        {"precision": "f16"},
        {"bench_shapes": "8x16"},
        {"bench_shapes": "0:16"},
        {"variance_bins": 0},
        {"variance_edges": "1.0"},
        {"variance_edges": "0,2,1"},
    ],
)
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        RunConfig(**values)


def test_malformed_line():
    with pytest.raises(ConfigError, match="run.cfg:2"):
        config.parse_flat_text("seed = 1\njust words\n", "run.cfg")


def test_repeated_key_last_wins():
    assert config.parse_flat_text("seed = 1\nseed = 2\n") == {"seed": "2"}


def test_resolved_text_round_trip(tmp_path):
    cfg = RunConfig(class_count=6, ohem=True, ppm_bins=(1, 3), noise=0.1)
    path = tmp_path / "config.resolved"
    path.write_text(cfg.resolved_text())
    assert RunConfig.load(path) == cfg
    assert "ohem = true\n" in cfg.resolved_text()
    assert "ppm_bins = 1,3\n" in cfg.resolved_text()


def test_variance_edges():
    assert RunConfig().variance_edges == ()
    cfg = RunConfig.load(overrides={"variance_edges": "0, 0.5, 2"})
    assert cfg.variance_edges == (0.0, 0.5, 2.0)
    assert "variance_edges = 0.0,0.5,2.0\n" in cfg.resolved_text()


def test_parse_overrides():
    overrides = config.parse_overrides(["--base-lr", "0.1", "--head=aspp"])
    assert overrides == {"base_lr": "0.1", "head": "aspp"}
    with pytest.raises(ConfigError):
        config.parse_overrides(["--seed"])
    with pytest.raises(ConfigError):
        config.parse_overrides(["seed", "1"])


def test_derived_specs():
    cfg = RunConfig(seed=3, class_count=5, crop=32, iterations=7)
    assert cfg.to_synth_spec().class_count == 5
    assert cfg.to_synth_spec().seed == 3
    assert cfg.to_train_spec().iterations == 7
    assert cfg.to_augment_spec().crop == 32
    with pytest.raises(ConfigError):
        cfg.replace(head="fpn").to_network_config()
