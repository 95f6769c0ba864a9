from typing import NoReturn

import numpy as np


class DgcwError(Exception):
    pass


class ShapeError(DgcwError, ValueError):
    pass


class LabelError(DgcwError, ValueError):
    pass


class NumericalError(DgcwError, ArithmeticError):
    pass


class GraphError(DgcwError, RuntimeError):
    pass


class ConfigError(DgcwError, ValueError):
    pass


class FormatError(DgcwError, ValueError):
    pass


def raise_if_nonfinite(values: np.ndarray | float, what: str) -> NoReturn | None:
    arr = np.asarray(values)
    if np.all(np.isfinite(arr)):
        return None

    bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
    raise NumericalError(f"{what} is not finite\n{bad} of {np.size(arr)} values")
