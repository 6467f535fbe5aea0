"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error divided by the max-norm of the gradients (floored at 1e-10)."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-10)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
                    eps: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> list[GradCheckResult]:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``max_coords`` limits how many coordinates of each tensor are perturbed;
    the subset is drawn from ``rng``. Parameters must be float64.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    results = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.zeros(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            fp = loss_fn().item()
            flat[k] = orig - eps
            fm = loss_fn().item()
            flat[k] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        results.append(GradCheckResult(name, err, int(idx.size)))
        p.grad = None
    return results
