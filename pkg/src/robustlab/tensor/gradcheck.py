"""Central-difference verification of taped gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ComputationRecord, Tensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int | None
    h: float
    tol: float
    message: str = ""


def _rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # absolute error where both are tiny, relative otherwise
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f`` at ``x`` to central differences.

    ``f`` receives a Tensor and must build its result from primitives.  The
    error per coordinate is ``|auto - fd| / max(1, |auto|, |fd|)``.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with ComputationRecord() as rec:
        leaf = rec.leaf(x)
        out = f(leaf)
        auto = rec.backward(out)[leaf].reshape(-1)

    flat = x.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(False, np.inf, i, h, tol, f"non-finite f at coordinate {i}")
        fd[i] = (fp - fm) / (2.0 * h)

    err = _rel_error(auto, fd)
    worst = int(err.argmax()) if err.size else None
    max_err = float(err.max()) if err.size else 0.0
    passed = max_err <= tol
    msg = "" if passed else f"coordinate {worst}: autodiff {auto[worst]:.6g} vs fd {fd[worst]:.6g}"
    return GradCheckReport(passed, max_err, worst, h, tol, msg)
