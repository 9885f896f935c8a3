"""Central-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .tape import Objective, Params, evaluate, grad


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    checked_entries: int
    total_entries: int
    passed: bool


@dataclass
class GradCheckReport:
    tensors: list[TensorCheck]
    tolerance: float
    h: float

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    def failures(self) -> list[TensorCheck]:
        return [t for t in self.tensors if not t.passed]


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(
    objective: Objective,
    params: Params,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare recorded gradients against (f(p+h) - f(p-h)) / 2h entrywise.

    Large tensors may be subsampled via ``max_entries_per_tensor``; the
    sampled count is reported per tensor. The finite-difference side only
    ever reads forward values, keeping it independent of the tape's
    backward rules.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    recorded = grad(objective, params)
    rng = RngStream(seed)
    checks: list[TensorCheck] = []
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            indices = np.sort(rng.permutation(n)[:max_entries_per_tensor])
        else:
            indices = np.arange(n)
        rec_flat = recorded[name].reshape(-1)
        worst = 0.0
        worst_index = (0,)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            f_plus = evaluate(objective, params)
            flat[idx] = original - h
            f_minus = evaluate(objective, params)
            flat[idx] = original
            estimate = (f_plus - f_minus) / (2.0 * h)
            err = _relative_error(float(rec_flat[idx]), estimate)
            if err > worst:
                worst = err
                worst_index = np.unravel_index(int(idx), p.values.shape)
        checks.append(
            TensorCheck(
                name=name,
                max_rel_error=worst,
                worst_index=tuple(int(i) for i in worst_index),
                checked_entries=len(indices),
                total_entries=n,
                passed=worst < tolerance,
            )
        )
    return GradCheckReport(tensors=checks, tolerance=tolerance, h=h)
