"""Transient and stationary Navier-Stokes by Picard iteration on stabilized Oseen problems.

Time stepping uses the one-step-theta scheme on a static cut mesh. Dividing
the theta-weighted momentum equation by ``theta`` gives an Oseen problem
with ``sigma = 1/(theta dt)`` for the new velocity; the old velocity and the
explicit part of the operator move to the right-hand side. The pressure
and all stabilization terms are treated fully implicitly, so after the
division their couplings in the velocity rows carry the weight ``1/theta``.
A stationary state is then a fixed point of the step for every theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .cut_geometry import LevelSet
from .forms import (
    CutDiscretization,
    OseenCoefficients,
    StabilizationConfig,
    assemble_galerkin,
    assemble_system,
)
from .solver import SolutionField, solve_matrix

# blocks of the velocity operator that are split between time levels
_EXPLICIT_BLOCKS = (
    "galerkin_convection",
    "galerkin_viscous",
    "nitsche_inflow",
    "nitsche_penalty_viscous",
    "nitsche_penalty_normal",
    "nitsche_consistency",
)


class PicardError(RuntimeError):
    """Fixed-point iteration did not converge; ``history`` holds the relative changes."""

    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = list(history)


def ramp(t: float, t1: float | None) -> float:
    """``(1 - cos(pi t / t1)) / 2`` on ``[0, t1]`` and 1 afterwards."""
    if t1 is None or t1 <= 0.0 or t >= t1:
        return 1.0
    return 0.5 * (1.0 - math.cos(math.pi * max(t, 0.0) / t1))


@dataclass(frozen=True)
class FlowProblem:
    """Viscosity and time-dependent data ``f(t, x)``, ``g(t, x)`` on a fixed discretization.

    ``convection`` scales the nonlinear term; zero gives the Stokes limit.
    ``ramp_time`` multiplies the boundary data by a smooth start-up ramp.
    """

    disc: CutDiscretization
    mu: float
    f: Callable | None = None
    g: Callable | None = None
    convection: float = 1.0
    ramp_time: float | None = None

    def data(self, t: float):
        f = None if self.f is None else (lambda x, t=t: self.f(t, x))
        if self.g is None:
            return f, None
        s = ramp(t, self.ramp_time)
        return f, (lambda x, t=t, s=s: s * np.asarray(self.g(t, x), dtype=float))

    def coefficients(self, t: float, sigma: float, beta_nodal: np.ndarray) -> OseenCoefficients:
        f, g = self.data(t)
        return OseenCoefficients(
            sigma=sigma, mu=self.mu, beta_nodal=self.convection * beta_nodal, f=f, g=g
        )


@dataclass
class TransientState:
    time: float
    solution: SolutionField
    dt: float
    theta: float = 0.5
    tol: float = 1e-8
    max_picard: int = 50

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        if not self.dt > 0.0:
            raise ValueError(f"time step must be positive, got {self.dt}")


@dataclass
class StepReport:
    time: float
    picard_iterations: int
    residual: float
    mass_imbalance: float
    history: list = field(default_factory=list)


def mass_imbalance(sol: SolutionField, disc: CutDiscretization) -> float:
    """``|∮ u_h·n ds| / ||u_h||_{L2(Ω)}`` (zero for a vanishing field)."""
    surf, vol = disc.surface, disc.volume
    if len(surf.elements) == 0:
        return 0.0
    flux = np.dot(surf.weights, np.einsum("nc,nc->n", sol.velocity_at(surf.elements, surf.points), surf.normals))
    uv = sol.velocity_at(vol.elements, vol.points)
    norm = math.sqrt(np.dot(vol.weights, (uv**2).sum(axis=1)))
    return 0.0 if norm == 0.0 else abs(flux) / norm


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    scale = np.linalg.norm(new)
    diff = np.linalg.norm(new - old)
    if scale == 0.0:
        return diff
    return diff / scale


def _implicit_scaling(system, theta: float):
    """Weight ``1/theta`` on the pressure and stabilization couplings of the velocity rows."""
    if theta == 1.0:
        return system.matrix
    nv = 2 * system.space.n_dofs
    m = system.space.n_mixed
    R = sum(
        (blk for name, blk in system.blocks.items() if name not in _EXPLICIT_BLOCKS and name != "galerkin_reaction"),
        sp.csr_matrix((m, m)),
    )
    R = sp.diags((np.arange(m) < nv).astype(float)) @ R
    n = system.matrix.shape[0]
    if n > m:
        R = sp.block_diag([R, sp.csr_matrix((n - m, n - m))])
    return (system.matrix + (1.0 / theta - 1.0) * R).tocsr()


def _picard(problem: FlowProblem, stab, t, sigma, beta0, extra_rhs, tol, max_iter, theta=1.0):
    """Fixed-point loop on ``beta``; returns the solution, iteration count, max residual and history."""
    space = problem.disc.space
    beta = np.array(beta0, dtype=float)
    history = []
    worst = 0.0
    for it in range(1, max_iter + 1):
        system = assemble_system(problem.disc, problem.coefficients(t, sigma, beta), stab)
        matrix = _implicit_scaling(system, theta)
        rhs = system.rhs.copy()
        if extra_rhs is not None:
            rhs[: len(extra_rhs)] += extra_rhs
        x, res = solve_matrix(matrix, rhs)
        worst = max(worst, res)
        sol = SolutionField.from_vector(space, x, res)
        change = _relative_change(sol.velocity, beta)
        history.append(change)
        beta = sol.velocity
        if problem.convection == 0.0 or change < tol:
            return sol, it, worst, history
    raise PicardError(f"Picard iteration did not reach {tol:.1e} in {max_iter} iterations", history)


def _explicit_part(problem: FlowProblem, stab, t: float, u_old: SolutionField) -> np.ndarray:
    """Velocity rows of ``K(u^n) u^n - L(t_n)`` with zero reaction."""
    space = problem.disc.space
    system = assemble_system(problem.disc, problem.coefficients(t, 0.0, u_old.velocity), stab, constraint=False)
    nv = 2 * space.n_dofs
    K = sum((system.blocks[b] for b in _EXPLICIT_BLOCKS), sp.csr_matrix(system.blocks["galerkin_viscous"].shape))
    K = K[:nv, :nv]
    return K @ u_old.velocity.ravel() - system.rhs[:nv]


def step(state: TransientState, problem: FlowProblem, stab: StabilizationConfig | None = None):
    """Advance one time step; returns the new state and its diagnostics."""
    stab = StabilizationConfig() if stab is None else stab
    disc = problem.disc
    th, dt = state.theta, state.dt
    sigma = 1.0 / (th * dt)
    t_new = state.time + dt
    u_old = state.solution
    nv = 2 * disc.space.n_dofs

    # sigma-weighted mass of the old velocity, on the same cut quadrature as the reaction block
    mass_coeffs = OseenCoefficients(sigma=sigma, mu=problem.mu)
    blocks, _ = assemble_galerkin(disc, mass_coeffs, np.zeros((disc.space.n_dofs, 2)))
    rhs = blocks["galerkin_reaction"][:nv, :nv] @ u_old.velocity.ravel()
    if th < 1.0:
        rhs -= (1.0 - th) / th * _explicit_part(problem, stab, state.time, u_old)

    sol, its, res, hist = _picard(
        problem, stab, t_new, sigma, u_old.velocity, rhs, state.tol, state.max_picard, theta=th
    )
    new_state = replace(state, time=t_new, solution=sol)
    return new_state, StepReport(t_new, its, res, mass_imbalance(sol, disc), hist)


def stationary_picard(
    problem: FlowProblem,
    stab: StabilizationConfig | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    initial: np.ndarray | None = None,
    sigma: float = 0.0,
):
    """Steady Navier-Stokes by fixed-point iteration; returns ``(solution, report)``."""
    stab = StabilizationConfig() if stab is None else stab
    space = problem.disc.space
    beta0 = np.zeros((space.n_dofs, 2)) if initial is None else initial
    sol, its, res, hist = _picard(problem, stab, 0.0, sigma, beta0, None, tol, max_iter)
    return sol, StepReport(0.0, its, res, mass_imbalance(sol, problem.disc), hist)


def run_transient(
    problem: FlowProblem,
    dt: float,
    n_steps: int,
    theta: float = 0.5,
    stab: StabilizationConfig | None = None,
    initial: SolutionField | None = None,
    tol: float = 1e-8,
    max_picard: int = 50,
    callback: Callable | None = None,
):
    """March ``n_steps`` from rest (or ``initial``); returns final state and per-step reports."""
    space = problem.disc.space
    sol0 = SolutionField.zeros(space) if initial is None else initial
    state = TransientState(0.0, sol0, dt, theta, tol, max_picard)
    reports = []
    for _ in range(n_steps):
        state, rep = step(state, problem, stab)
        reports.append(rep)
        if callback is not None:
            callback(state, rep)
    return state, reports


def square_level_set(mesh, center=(0.5, 0.5), half_width=0.4) -> LevelSet:
    """``max(|x - cx|, |y - cy|) - a``, negative inside the square."""
    c = np.asarray(center, dtype=float)

    def func(x):
        x = np.atleast_2d(x)
        return np.maximum(np.abs(x[:, 0] - c[0]), np.abs(x[:, 1] - c[1])) - half_width

    def gradient(x):
        x = np.atleast_2d(x)
        d = x - c
        g = np.zeros_like(d)
        ax = np.abs(d[:, 0]) >= np.abs(d[:, 1])
        g[ax, 0] = np.sign(d[ax, 0])
        g[~ax, 1] = np.sign(d[~ax, 1])
        return g

    return LevelSet.on_mesh(mesh, func, gradient)


def cavity_lid(center=(0.5, 0.5), half_width=0.4, speed=1.0):
    """Smooth lid profile ``16 s^2 (1-s)^2`` along the top wall, zero on the other walls."""
    cx, cy = center
    a = half_width

    def g(t, x):
        x = np.atleast_2d(x)
        s = np.clip((x[:, 0] - (cx - a)) / (2 * a), 0.0, 1.0)
        w = np.clip((x[:, 1] - cy) / a, 0.0, 1.0) ** 2
        out = np.zeros((len(x), 2))
        out[:, 0] = speed * 16.0 * s**2 * (1.0 - s) ** 2 * w
        return out

    return g
