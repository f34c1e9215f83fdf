"""Central finite-difference gradients, the oracle for the reverse pass."""

from typing import Callable, Union

import numpy as np

from drlkit.core.tensor import Tensor, no_grad
from drlkit.utils.errors import NonFiniteError


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Union[Tensor, np.ndarray],
    h: float = 1e-5,
) -> Tensor:
    """Estimate df/dx one coordinate at a time: (f(x+h) - f(x-h)) / 2h.

    ``f`` must be deterministic and return a scalar (Tensor or float).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)

    def _eval(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(values))
        value = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(value):
            raise NonFiniteError("finite-difference evaluation returned a non-finite value")
        return value

    shifted = base.copy()
    for i in range(base.size):
        original = shifted.flat[i]
        shifted.flat[i] = original + h
        upper = _eval(shifted)
        shifted.flat[i] = original - h
        lower = _eval(shifted)
        shifted.flat[i] = original
        grad.flat[i] = (upper - lower) / (2.0 * h)
    return Tensor(grad)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute difference scaled by the larger of the two gradient norms."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
