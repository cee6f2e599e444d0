"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor
from .params import ModelParameters


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero
    coordinates from turning round-off into huge ratios."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalar(out) -> float:
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise ValueError(f"function must be scalar-valued, got shape {val.shape}")
    val = float(val.reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteError("function value is not finite")
    return val


def gradient_check(f: Callable[[Tensor], Tensor], point, tolerance: float = 1e-4,
                   step: float = 1e-5, grad_fn: Callable | None = None) -> GradCheckReport:
    """Compare the backward-pass gradient of ``f`` at ``point`` with central
    differences.

    ``grad_fn`` substitutes the analytic side (used to check the checker).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    if grad_fn is None:
        out = f(x)
        _scalar(out)
        out.backward()
        analytic = np.zeros_like(base) if x.grad is None else np.array(x.grad, dtype=np.float64)
    else:
        analytic = np.asarray(grad_fn(base), dtype=np.float64)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f(Tensor(base.copy())))
        flat[i] = orig - step
        fm = _scalar(f(Tensor(base.copy())))
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * step)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("analytic gradient is not finite")
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric), tolerance)


def check_parameters(loss_fn: Callable[[], Tensor], params: ModelParameters,
                     tolerance: float = 1e-4, step: float = 1e-5,
                     max_coords: int | None = None, seed: int = 0) -> dict:
    """Finite-difference check of ``loss_fn`` w.r.t. every named parameter.

    ``loss_fn`` rebuilds the graph from the current parameter values.  When
    ``max_coords`` is set, a seeded random subset of each parameter's
    coordinates is probed.  Returns name -> :class:`GradCheckReport`.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    loss = loss_fn()
    _scalar(loss)
    loss.backward()
    reports = {}
    for name, t in params.items():
        analytic_full = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(loss_fn())
            flat[i] = orig - step
            fm = _scalar(loss_fn())
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        analytic = analytic_full.reshape(-1)[idx]
        reports[name] = GradCheckReport(analytic, numeric, relative_error(analytic, numeric),
                                        tolerance)
    params.zero_grad()
    return reports
