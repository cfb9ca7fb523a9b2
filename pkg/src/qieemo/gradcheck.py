"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import Xoshiro256StarStar
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    worst_index: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5, tol: float = 1e-4,
                      max_coords: int = 64,
                      rng: Xoshiro256StarStar | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued f at x with central differences.

    Checks every coordinate when x is small, otherwise a random sample of
    max_coords coordinates. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    backward(loss, leaves=[leaf])
    analytic = leaf.grad

    flat = x.data.reshape(-1)
    n = flat.size
    if n <= max_coords or rng is None:
        coords = list(range(n))
    else:
        coords = sorted({rng.randint(0, n - 1) for _ in range(max_coords)})

    max_err = 0.0
    worst = -1
    for i in coords:
        probe = flat.copy()
        probe[i] += h
        f_plus = f(Tensor(probe.reshape(x.data.shape))).item()
        probe[i] -= 2 * h
        f_minus = f(Tensor(probe.reshape(x.data.shape))).item()
        numeric = (f_plus - f_minus) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > max_err:
            max_err = err
            worst = i
    return GradCheckReport(max_rel_error=max_err, checked=len(coords), tol=tol, worst_index=worst)
