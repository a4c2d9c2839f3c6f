"""Reference quadrature rules on the unit triangle and the unit interval."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Rule on the triangle (0,0),(1,0),(0,1) exact for total degree ``degree``.

    Low degrees use the centroid and the three-point interior rule; higher
    degrees use a collapsed (Duffy) product of Gauss-Jacobi and
    Gauss-Legendre points. All weights are positive and sum to 1/2.
    """
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if degree <= 1:
        pts, wts = np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5])
    elif degree == 2:
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        wts = np.full(3, 1.0 / 6.0)
    else:
        n = (degree + 2) // 2
        # x = (1+a)/2 along the collapsed direction carries the (1-x) Jacobian
        a, wa = roots_jacobi(n, 1.0, 0.0)
        b, wb = np.polynomial.legendre.leggauss(n)
        x = 0.5 * (1.0 + a)
        wx = wa / 4.0
        s = 0.5 * (1.0 + b)
        ws = 0.5 * wb
        X, S = np.meshgrid(x, s, indexing="ij")
        WX, WS = np.meshgrid(wx, ws, indexing="ij")
        xi = (1.0 - X) * S
        eta = X
        pts = np.column_stack([xi.ravel(), eta.ravel()])
        wts = (WX * WS).ravel()
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


@lru_cache(maxsize=None)
def line_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (x + 1.0)
    w = 0.5 * w
    s.setflags(write=False)
    w.setflags(write=False)
    return s, w


def map_triangle_rule(corners: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Push the reference rule onto triangles ``corners`` of shape ``(n, 3, 2)``.

    Returns points ``(n, nq, 2)`` and weights ``(n, nq)``.
    """
    ref, w = triangle_rule(degree)
    corners = np.asarray(corners, dtype=float)
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pts = (
        corners[:, None, 0, :]
        + ref[None, :, 0, None] * e1[:, None, :]
        + ref[None, :, 1, None] * e2[:, None, :]
    )
    return pts, det[:, None] * w[None, :]
