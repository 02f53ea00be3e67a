"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, zero_grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_param: str = ""
    worst_index: tuple = ()
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, tol: float = 1e-5,
                      analytic: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated with each parameter coordinate nudged by +-h. When
    ``analytic`` is given it replaces the autodiff gradients (useful to feed
    a deliberately wrong gradient as a negative control).
    """
    if analytic is None:
        zero_grads(params)
        f().backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        zero_grads(params)

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for i, (p, g) in enumerate(zip(params, analytic)):
        numeric = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        err = rel_error(g, numeric)
        name = p.name or f"param{i}"
        worst = float(err.max()) if err.size else 0.0
        report.per_param[name] = worst
        if worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst_param = name
            report.worst_index = tuple(int(v) for v in np.unravel_index(int(err.argmax()), err.shape))
    return report
