import pytest

from dgcwnet import tensor as T


@pytest.fixture(autouse=True)
def f64_precision():
    with T.precision("f64"):
        yield
