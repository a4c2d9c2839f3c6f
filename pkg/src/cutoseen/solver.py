"""Direct solution of the mixed system and conditioning diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .forms import LinearSystem
from .spaces import FESpace, evaluate

# pivots below this fraction of the largest one signal a singular matrix
PIVOT_TOLERANCE = 1e-12


class SingularSystemError(RuntimeError):
    """Factorization broke down; ``pivot`` is the offending unknown if known."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class ResidualError(RuntimeError):
    pass


@dataclass
class SolutionField:
    space: FESpace
    velocity: np.ndarray
    pressure: np.ndarray
    multiplier: float = 0.0
    residual: float = 0.0

    @classmethod
    def from_vector(cls, space: FESpace, x: np.ndarray, residual: float = 0.0) -> "SolutionField":
        n = space.n_dofs
        mult = float(x[3 * n]) if len(x) > 3 * n else 0.0
        return cls(
            space=space,
            velocity=np.array(x[: 2 * n]).reshape(n, 2),
            pressure=np.array(x[2 * n : 3 * n]),
            multiplier=mult,
            residual=residual,
        )

    @classmethod
    def zeros(cls, space: FESpace) -> "SolutionField":
        n = space.n_dofs
        return cls(space, np.zeros((n, 2)), np.zeros(n))

    def vector(self) -> np.ndarray:
        """Mixed coefficient vector without the multiplier."""
        return np.concatenate([self.velocity.ravel(), self.pressure])

    def velocity_at(self, elements, points, derivative: int = 0) -> np.ndarray:
        return evaluate(self.space, self.velocity, elements, points, derivative)

    def pressure_at(self, elements, points, derivative: int = 0) -> np.ndarray:
        return evaluate(self.space, self.pressure, elements, points, derivative)


def _splu(A):
    # the mixed matrix is structurally symmetric; symmetric ordering with
    # relaxed diagonal pivoting keeps fill several times lower than COLAMD
    return sla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1, options={"SymmetricMode": True})


def _breakdown_pivot(A: sp.csc_matrix) -> int | None:
    """Locate the unknown behind an exactly singular factorization."""
    empty = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty):
        return int(empty[0])
    # a tiny diagonal shift lets the factorization finish; its smallest pivot marks the deficiency
    shift = 1e-14 * max(abs(A).max(), 1.0)
    try:
        lu = _splu((A + shift * sp.identity(A.shape[0], format="csc")).tocsc())
    except RuntimeError:
        return None
    return int(lu.perm_c[np.argmin(np.abs(lu.U.diagonal()))])


def factorize(matrix) -> sla.SuperLU:
    A = sp.csc_matrix(matrix)
    try:
        lu = _splu(A)
    except RuntimeError as exc:
        pivot = _breakdown_pivot(A)
        raise SingularSystemError(f"LU factorization failed at unknown {pivot}: {exc}", pivot=pivot) from exc
    d = np.abs(lu.U.diagonal())
    scale = d.max() if len(d) else 0.0
    if scale == 0.0 or d.min() <= PIVOT_TOLERANCE * scale:
        j = int(np.argmin(d))
        pivot = int(lu.perm_c[j])
        raise SingularSystemError(
            f"numerically singular matrix: pivot {d[j]:.3e} at unknown {pivot} (largest {scale:.3e})",
            pivot=pivot,
        )
    return lu


def solve_matrix(matrix, rhs, tol: float = 1e-10, max_refinement: int = 3, lu=None):
    """LU solve with iterative refinement. Returns ``(x, relative_residual)``."""
    A = sp.csr_matrix(matrix)
    rhs = np.asarray(rhs, dtype=float)
    lu = factorize(A) if lu is None else lu
    x = lu.solve(rhs)
    bnorm = np.linalg.norm(rhs)
    scale = bnorm if bnorm > 0.0 else 1.0
    r = rhs - A @ x
    res = np.linalg.norm(r) / scale
    for _ in range(max_refinement):
        if res <= tol:
            break
        x = x + lu.solve(r)
        r = rhs - A @ x
        res = np.linalg.norm(r) / scale
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("solution contains non-finite values")
    if res > tol:
        raise ResidualError(f"relative residual {res:.3e} exceeds {tol:.1e} after refinement")
    return x, res


def solve(system: LinearSystem, tol: float = 1e-10, max_refinement: int = 3) -> SolutionField:
    x, res = solve_matrix(system.matrix, system.rhs, tol, max_refinement)
    return SolutionField.from_vector(system.space, x, res)


def estimate_condition(system_or_matrix, iterations: int = 50, seed: int = 0, lu=None) -> float:
    """Estimate of the 2-norm condition number ``sigma_max / sigma_min``.

    Power iteration on ``A^T A`` and on its inverse (two triangular solves
    per step through the LU factors), from a fixed random start vector.
    """
    A = system_or_matrix.matrix if isinstance(system_or_matrix, LinearSystem) else system_or_matrix
    A = sp.csr_matrix(A)
    n = A.shape[0]
    lu = factorize(A) if lu is None else lu
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(n)

    def power(apply):
        x = start / np.linalg.norm(start)
        lam = 0.0
        for _ in range(iterations):
            y = apply(x)
            lam = float(np.linalg.norm(y))
            if lam == 0.0:
                return 0.0
            x = y / lam
        return lam

    big = power(lambda x: A.T @ (A @ x))
    small = power(lambda x: lu.solve(lu.solve(x, trans="T")))
    return float(np.sqrt(big * small))


def ritz_values(matrix, steps: int = 20, seed: int = 0) -> np.ndarray:
    """Ritz values of the symmetric part after ``steps`` Lanczos iterations.

    Full reorthogonalization keeps the small tridiagonal problem faithful;
    the extreme values bracket the spectrum from inside.
    """
    A = sp.csr_matrix(matrix)
    S = 0.5 * (A + A.T)
    n = S.shape[0]
    steps = min(steps, n)
    rng = np.random.default_rng(seed)
    Q = np.zeros((n, steps))
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    alpha, beta = [], []
    for j in range(steps):
        Q[:, j] = q
        w = S @ q
        a = float(q @ w)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        alpha.append(a)
        b = float(np.linalg.norm(w))
        if b < 1e-14 or j == steps - 1:
            break
        beta.append(b)
        q = w / b
    T = np.diag(alpha) + np.diag(beta[: len(alpha) - 1], 1) + np.diag(beta[: len(alpha) - 1], -1)
    return np.linalg.eigvalsh(T)
