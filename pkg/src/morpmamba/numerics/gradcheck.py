"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``f()`` with respect to ``x.data`` (mutated in place, restored).

    Also returns a per-element kink flag: True where the one-sided
    differences disagree, i.e. ``f`` is not smooth within ``h`` of the point
    (a ReLU hinge or a change of arg-max).
    """
    grad = np.zeros_like(x.data, dtype=np.float64)
    kink = np.zeros(x.shape, dtype=bool)
    flat = x.data.reshape(-1)
    f0 = float(f().data.sum())
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data.sum())
        flat[i] = orig - h
        fm = float(f().data.sum())
        flat[i] = orig
        grad.flat[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        kink.flat[i] = abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd))
    return grad, kink


def analytic_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return {k: p.grad.copy() for k, p in params.items()}


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask: np.ndarray | None = None, floor: float = 1e-3) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor), ignoring masked entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if mask is not None:
        err = np.where(mask, 0.0, err)
    return float(err.max()) if err.size else 0.0


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor], h: float = 1e-4) -> dict[str, float]:
    """Max relative error per parameter between backward and central differences.

    Entries where ``f`` is non-smooth within ``h`` are skipped.
    """
    analytic = analytic_gradients(f, params)
    report = {}
    for key, p in params.items():
        numeric, kink = numerical_gradient(f, p, h)
        report[key] = relative_error(analytic[key], numeric, kink)
    return report
