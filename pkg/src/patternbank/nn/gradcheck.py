"""Central-finite-difference verification of analytic gradients.

The checker perturbs every parameter coordinate (or a seeded sample for
large tensors), recomputes the scalar objective forward-only, and compares
the numeric derivative against the gradient produced by one backward pass.
The objective must be deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .store import ParameterStore


@dataclass
class ParamCheck:
    n_coords: int
    max_rel_err: float
    max_abs_diff: float
    max_abs_analytic: float
    max_abs_numeric: float


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    per_param: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.per_param.values()), default=0.0)

    @property
    def worst_path(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=lambda p: self.per_param[p].max_rel_err)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.1e}) at '{self.worst_path}'")


def _rel_err(a: float, n: float, floor: float) -> float:
    scale = max(abs(a), abs(n))
    if scale <= floor:
        return 0.0
    return abs(a - n) / scale


def finite_diff_check(fn: Callable[[], Tensor], store: ParameterStore,
                      epsilon: float = 1e-4, tolerance: float = 1e-4,
                      prefix: str = "", max_coords_per_param: int = 48,
                      seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` with central differences.

    ``fn`` evaluates the scalar objective from the store's current values.
    Coordinates are exhaustive for tensors up to ``max_coords_per_param``
    entries and a seeded sample beyond that.
    """
    store.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {p: (store[p].grad.copy() if store[p].grad is not None
                    else np.zeros_like(store[p].data))
                for p in store.paths(prefix)}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    for p in store.paths(prefix):
        par = store.params[p]
        flat = par.data.reshape(-1)
        size = flat.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        a_flat = analytic[p].reshape(-1)
        max_rel = max_diff = max_a = max_n = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            with no_grad():
                f_plus = float(fn().data)
            flat[c] = orig - epsilon
            with no_grad():
                f_minus = float(fn().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(a_flat[c])
            max_rel = max(max_rel, _rel_err(a, numeric, floor))
            max_diff = max(max_diff, abs(a - numeric))
            max_a = max(max_a, abs(a))
            max_n = max(max_n, abs(numeric))
        report.per_param[p] = ParamCheck(len(coords), max_rel, max_diff, max_a, max_n)
    return report
