"""Central finite-difference validation of reverse-mode gradients.

Every GP-Unet layer is piecewise linear.  At float32 the linear pieces around
a random input are often narrower than any step whose rounding error is
tolerable, so by default the perturbed evaluations replay the ReLU masks and
max-pooling argmaxes of the unperturbed input (``freeze=True``).  The
difference quotient then measures exactly the linear piece that the
backward pass differentiates, and ties or kinks never enter the comparison.
Pass ``freeze=False`` for plain central differences.

Errors are normalised by the gradient's scale, the largest absolute
component of either gradient: float32 differences carry an absolute
rounding floor of about ``ulp(f) / epsilon`` that would swamp a
per-component ratio for components near zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, no_grad, record_pattern, replay_pattern


@dataclass
class GradCheckReport:
    max_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray


def _scalar(t) -> float:
    if not isinstance(t, Tensor) or t.data.size != 1:
        shape = t.shape if isinstance(t, Tensor) else type(t).__name__
        raise ShapeError(f"grad_check fragments must return a scalar tensor, got {shape}")
    return float(t.data.reshape(-1)[0])


def analytic_gradient(fragment: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    inp = Tensor(np.array(x, dtype=DTYPE, copy=True), requires_grad=True)
    out = fragment(inp)
    _scalar(out)
    out.backward()
    if inp.grad is None:
        return np.zeros(inp.shape, dtype=np.float64)
    return inp.grad.astype(np.float64)


def numeric_gradient(fragment: Callable[[Tensor], Tensor], x: np.ndarray,
                     epsilon: float = 1e-3, freeze: bool = True) -> np.ndarray:
    x = np.array(x, dtype=DTYPE, copy=True)
    pattern = None
    if freeze:
        with record_pattern() as pattern:
            _scalar(fragment(Tensor(x)))

    def f(v):
        with no_grad():
            if pattern is None:
                return _scalar(fragment(Tensor(v)))
            with replay_pattern(pattern):
                return _scalar(fragment(Tensor(v)))

    grad = np.zeros(x.shape, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + DTYPE(epsilon)
        hi, up = float(flat[i]), f(x)
        flat[i] = orig - DTYPE(epsilon)
        lo, down = float(flat[i]), f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (hi - lo)
    return grad


def grad_check_report(fragment: Callable[[Tensor], Tensor], input, epsilon: float = 1e-3,
                      freeze: bool = True) -> GradCheckReport:
    x = input.data if isinstance(input, Tensor) else np.asarray(input, dtype=DTYPE)
    analytic = analytic_gradient(fragment, x)
    numeric = numeric_gradient(fragment, x, epsilon, freeze)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    errors = np.abs(analytic - numeric) / scale
    return GradCheckReport(float(errors.max(initial=0.0)), analytic, numeric, errors)


def grad_check(fragment: Callable[[Tensor], Tensor], input, epsilon: float = 1e-3,
               freeze: bool = True) -> float:
    """Max relative error between the backward pass of ``fragment`` (a map
    from a tensor to a scalar) and central finite differences."""
    return grad_check_report(fragment, input, epsilon, freeze).max_error
