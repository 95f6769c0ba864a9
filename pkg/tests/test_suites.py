import numpy as np
import pytest

from dgcwnet import layers, network, suites
from dgcwnet import tensor as T
from dgcwnet.exceptions import ConfigError
from dgcwnet.layers import LinearParams
from dgcwnet.suites import CheckResult
from dgcwnet.tensor import Tensor


def test_ops_suite_passes():
    results = suites.run_suite("ops")
    assert len(results) > 10
    failed = [(r.name, r.error) for r in results if not r.passed]
    assert failed == []
    assert {r.threshold for r in results} == {suites.THRESHOLDS["ops"]}


def test_dgcw_suite_passes():
    results = suites.run_suite("dgcw")
    names = {r.name for r in results}
    assert any("fused" in n for n in names) and any("naive" in n for n in names)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_suite_restores_precision():
    with T.precision("f32"):
        suites.run_suite("ops")
        assert T.default_dtype() == np.float32


def test_unknown_target():
    with pytest.raises(ConfigError):
        suites.run_suite("everything")


def test_check_result():
    assert CheckResult("ops", "x", 1e-7, 1e-6).passed
    assert not CheckResult("ops", "x", 1e-6, 1e-6).passed
    assert not CheckResult("ops", "x", float("nan"), 1e-6).passed


def test_check_parameters_restores_tensors():
    p = LinearParams.init(3, 2, 0, "lin")
    originals = [t for _, t, _ in p.named_parameters()]
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, 2)))

    def loss():
        out = T.elementwise("tanh", layers.linear_1x1(x, p))
        return suites.scalarize(out, "lin")

    assert suites.check_parameters(loss, p, 1e-5) < 1e-6
    restored = [t for _, t, _ in p.named_parameters()]
    assert all(a is b for a, b in zip(restored, originals, strict=True))
    assert all(t.grad is None for t in originals)


def test_micro_network_is_valid():
    cfg = suites.micro_network_config()
    params = network.init_network(cfg, 0)
    assert params.context is not None
    assert all(t.size > 0 for t in params.parameters())


def test_net_suite_passes():
    results = suites.run_suite("net")
    assert [r.name for r in results] == ["micro_network"]
    assert all(r.passed for r in results), [(r.name, r.error) for r in results]


def test_unit_gain_rescales_weights_and_draws_biases():
    cfg = suites.micro_network_config()
    params = network.init_network(cfg, 0)
    before = dict(params.state_dict())
    suites.unit_gain(params)
    for name, t, _ in params.named_parameters():
        assert t.requires_grad
        if name.endswith("bias"):
            assert np.all(np.abs(t.data) <= 0.1)
            assert np.any(t.data != 0)
        else:
            np.testing.assert_allclose(t.data, before[name] * np.sqrt(6.0))
