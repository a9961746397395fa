"""Finite-difference curl used by residual checks."""
from __future__ import annotations

import numpy as np

__all__ = ["fd_curl"]


def fd_curl(field, points, h: float, scheme: str = "central") -> np.ndarray:
    """Curl of a vector field by finite differences.

    Parameters
    ----------
    field : callable
        Maps ``(q, 3)`` points to ``(q, 3)`` values.
    points : (q, 3) array
    h : step
    scheme : {'central', 'forward'}
        ``'forward'`` is first-order accurate, ``'central'`` second order.
    """
    p = np.asarray(points, dtype=float)
    jac = np.zeros(p.shape + (3,), complex)  # jac[q, i, j] = d f_i / d x_j
    if scheme == "forward":
        f0 = field(p)
    for j in range(3):
        step = np.zeros(3)
        step[j] = h
        if scheme == "central":
            jac[:, :, j] = (field(p + step) - field(p - step)) / (2 * h)
        elif scheme == "forward":
            jac[:, :, j] = (field(p + step) - f0) / h
        else:
            raise ValueError(f"unknown difference scheme {scheme!r}")
    return np.stack([
        jac[:, 2, 1] - jac[:, 1, 2],
        jac[:, 0, 2] - jac[:, 2, 0],
        jac[:, 1, 0] - jac[:, 0, 1],
    ], axis=1)
