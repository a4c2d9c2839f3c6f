"""Manufactured solutions, error and energy norms, convergence and cut-position studies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist

from .cut_geometry import LevelSet, circle_level_set
from .forms import (
    CutDiscretization,
    LinearSystem,
    OseenCoefficients,
    StabilizationConfig,
    assemble_system,
    _facet_scalar,
    discretize,
    element_beta_norm,
    norm_matrices,
    stabilization_parameters,
)
from .mesh import build_structured_mesh
from .quadrature import map_triangle_rule
from .solver import SolutionField, estimate_condition, solve

ERROR_FIELDS = ("u_L2", "grad_u_L2", "p_L2", "u_L2_gamma", "grad_u_L2_gamma", "p_L2_gamma")


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact Oseen solution on a disc, with ``beta`` given by a known field."""

    name: str
    mu: float
    sigma: float
    u: Callable
    grad_u: Callable
    p: Callable
    grad_p: Callable
    laplace_u: Callable
    beta: Callable
    beta_lipschitz: float
    center: tuple = (0.5, 0.5)
    radius: float = 0.45

    def f(self, x):
        x = np.atleast_2d(x)
        b = self.beta(x)
        conv = np.einsum("nij,nj->ni", self.grad_u(x), b)
        return self.sigma * self.u(x) + conv - self.mu * self.laplace_u(x) + self.grad_p(x)

    def g(self, x):
        return self.u(np.atleast_2d(x))

    def coefficients(self) -> OseenCoefficients:
        return OseenCoefficients(
            sigma=self.sigma,
            mu=self.mu,
            beta=self.beta,
            f=self.f,
            g=self.g,
            beta_lipschitz=self.beta_lipschitz,
        )

    def levelset(self, mesh, offset=(0.0, 0.0)) -> LevelSet:
        c = (self.center[0] + offset[0], self.center[1] + offset[1])
        return circle_level_set(mesh, c, self.radius)


def taylor_case(mu: float, sigma: float = 1.0, center=(0.5, 0.5), radius: float = 0.45) -> ManufacturedCase:
    """Steady Taylor vortex field with ``beta = u`` on a circular domain."""
    if not mu > 0.0:
        raise ValueError("viscosity must be positive")
    t = 2.0 * math.pi

    def u(x):
        X, Y = x[:, 0], x[:, 1]
        return np.column_stack([-np.cos(t * X) * np.sin(t * Y), np.sin(t * X) * np.cos(t * Y)])

    def grad_u(x):
        X, Y = x[:, 0], x[:, 1]
        ss = t * np.sin(t * X) * np.sin(t * Y)
        cc = t * np.cos(t * X) * np.cos(t * Y)
        G = np.empty((len(x), 2, 2))
        G[:, 0, 0], G[:, 0, 1] = ss, -cc
        G[:, 1, 0], G[:, 1, 1] = cc, -ss
        return G

    def p(x):
        return -0.25 * (np.cos(2 * t * x[:, 0]) + np.cos(2 * t * x[:, 1]))

    def grad_p(x):
        return np.column_stack([math.pi * np.sin(2 * t * x[:, 0]), math.pi * np.sin(2 * t * x[:, 1])])

    def laplace_u(x):
        return -2.0 * t * t * u(x)

    return ManufacturedCase(
        name="taylor",
        mu=mu,
        sigma=sigma,
        u=u,
        grad_u=grad_u,
        p=p,
        grad_p=grad_p,
        laplace_u=laplace_u,
        beta=u,
        beta_lipschitz=t,
        center=tuple(center),
        radius=radius,
    )


def patch_case(mu: float = 0.1, sigma: float = 1.0, beta=(1.0, 0.5), center=(0.5123, 0.4987), radius=0.4):
    """``u = (y, x)``, ``p = 0`` with a constant advective field."""
    b = np.asarray(beta, dtype=float)

    def u(x):
        return np.column_stack([x[:, 1], x[:, 0]])

    def grad_u(x):
        G = np.zeros((len(x), 2, 2))
        G[:, 0, 1] = 1.0
        G[:, 1, 0] = 1.0
        return G

    return ManufacturedCase(
        name="patch",
        mu=mu,
        sigma=sigma,
        u=u,
        grad_u=grad_u,
        p=lambda x: np.zeros(len(x)),
        grad_p=lambda x: np.zeros((len(x), 2)),
        laplace_u=lambda x: np.zeros((len(x), 2)),
        beta=lambda x: np.tile(b, (len(x), 1)),
        beta_lipschitz=0.0,
        center=tuple(center),
        radius=radius,
    )


# ---------------------------------------------------------------------------
# errors


@dataclass(frozen=True)
class ErrorReport:
    h: float
    u_L2: float
    grad_u_L2: float
    p_L2: float
    u_L2_gamma: float
    grad_u_L2_gamma: float
    p_L2_gamma: float

    def values(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in ERROR_FIELDS])


def _pointwise(sol: SolutionField, case: ManufacturedCase, table):
    e, x = table.elements, table.points
    du = sol.velocity_at(e, x) - case.u(x)
    dg = sol.velocity_at(e, x, 1) - case.grad_u(x)
    dp = sol.pressure_at(e, x) - case.p(x)
    return du, dg, dp


def compute_errors(sol: SolutionField, case: ManufacturedCase, disc: CutDiscretization) -> ErrorReport:
    """Bulk and interface L2 errors; pressures are compared up to their mean."""
    vol, surf = disc.volume, disc.surface
    du, dg, dp = _pointwise(sol, case, vol)
    w = vol.weights
    shift = np.dot(w, dp) / w.sum()
    dp = dp - shift
    su, sg, sp_ = _pointwise(sol, case, surf)
    ws = surf.weights
    sp_ = sp_ - shift

    def l2(weights, sq):
        return float(np.sqrt(max(np.dot(weights, sq), 0.0)))

    return ErrorReport(
        h=disc.h,
        u_L2=l2(w, (du**2).sum(axis=1)),
        grad_u_L2=l2(w, (dg**2).sum(axis=(1, 2))),
        p_L2=l2(w, dp**2),
        u_L2_gamma=l2(ws, (su**2).sum(axis=1)),
        grad_u_L2_gamma=l2(ws, (sg**2).sum(axis=(1, 2))),
        p_L2_gamma=l2(ws, sp_**2),
    )


# ---------------------------------------------------------------------------
# energy norms


@dataclass(frozen=True)
class NormReport:
    """Squared components of the velocity and mixed energy norms."""

    components: dict
    Phi_p: float
    omega_h: float
    C_P: float

    def _sum(self, keys) -> float:
        return float(sum(self.components.get(k, 0.0) for k in keys))

    @property
    def velocity(self) -> float:
        return math.sqrt(max(self._sum(_VEL), 0.0))

    @property
    def velocity_h(self) -> float:
        return math.sqrt(max(self._sum(_VEL + _VEL_GP), 0.0))

    @property
    def mixed_h(self) -> float:
        return math.sqrt(max(self._sum(_VEL + _VEL_GP + _PRES), 0.0))

    @property
    def mixed_full(self) -> float:
        return math.sqrt(max(self._sum(_VEL + _VEL_GP + _PRES + _EXTRA), 0.0))


_VEL = ("sigma_L2", "mu_H1", "nitsche_viscous", "s_u", "inflow", "nitsche_normal", "s_beta")
_VEL_GP = ("g_sigma", "g_mu", "g_beta", "g_u")
_PRES = ("s_p", "g_p")
_EXTRA = ("divergence", "streamline", "pressure_L2")


def domain_diameter(disc: CutDiscretization) -> float:
    pts = disc.surface.points
    if len(pts) < 2:
        pts = disc.volume.points
    if len(pts) < 2:
        return 0.0
    return float(pdist(pts).max())


def beta_lipschitz(coeffs: OseenCoefficients, disc: CutDiscretization) -> float:
    """``|beta|_{1,inf}`` from the data, or sampled from the gradient of ``beta_h``."""
    if coeffs.beta_lipschitz is not None:
        return float(coeffs.beta_lipschitz)
    bh = coeffs.discrete_beta(disc.space)
    tab = disc.volume
    if len(tab.elements) == 0:
        return 0.0
    G = np.einsum("nac,nad->ncd", disc.space.gather(bh, tab.elements), tab.dN)
    return float(np.linalg.norm(G, ord=2, axis=(1, 2)).max())


def omega_h(h: float, beta_lip: float, mu: float, sigma: float) -> float:
    return h * h * beta_lip / (mu + sigma * h * h)


def pressure_weight(sigma: float, mu: float, beta_norm: float, C_P: float) -> float:
    """``Phi_p`` from its inverse ``sigma C_P^2 + |beta| C_P + mu + (|beta| C_P)^2 / (mu + sigma C_P^2)``."""
    bc = beta_norm * C_P
    inv = sigma * C_P**2 + bc + mu + bc * bc / (mu + sigma * C_P**2)
    return 1.0 / inv


def _quad(mat, x):
    return float(x @ (mat @ x))


def energy_norms(
    sol: SolutionField,
    coeffs: OseenCoefficients,
    stab: StabilizationConfig,
    disc: CutDiscretization,
    system: LinearSystem | None = None,
) -> NormReport:
    """Every squared component of the energy norms of ``U_h = (u_h, p_h)``."""
    space = disc.space
    h = disc.h
    if system is None:
        system = assemble_system(disc, coeffs, stab, constraint=False)
    bh = coeffs.discrete_beta(space)
    mats = norm_matrices(disc, coeffs, stab, bh)
    n = space.n_dofs
    U = np.concatenate([sol.velocity.ravel(), sol.pressure])
    Uv = np.concatenate([sol.velocity.ravel(), np.zeros(n)])
    blk = system.blocks
    comp = {
        "sigma_L2": coeffs.sigma * _quad(mats["mass"], Uv),
        "mu_H1": coeffs.mu * _quad(mats["stiffness"], Uv),
        "nitsche_viscous": stab.gamma * coeffs.mu / h * _quad(mats["boundary_mass"], Uv),
        "inflow": _quad(mats["boundary_beta"], Uv),
        "nitsche_normal": _quad(blk["nitsche_penalty_normal"], Uv),
    }
    for key, names in {
        "s_u": ("cip_u",),
        "s_beta": ("cip_beta", "cip_beta_simplified"),
        "s_p": ("cip_p",),
        "g_beta": ("gp_beta", "gp_beta_simplified"),
        "g_u": ("gp_u",),
        "g_p": ("gp_p",),
        "g_sigma": ("gp_sigma",),
        "g_mu": ("gp_mu",),
    }.items():
        comp[key] = sum(_quad(blk[nm], U) for nm in names if nm in blk)

    tab = disc.volume
    bnorm_el = element_beta_norm(space, bh)
    phi_u, phi_b, _ = stabilization_parameters(bnorm_el, h, coeffs, stab)
    C_P = domain_diameter(disc)
    lip = beta_lipschitz(coeffs, disc)
    om = omega_h(h, lip, coeffs.mu, coeffs.sigma)
    Phi = pressure_weight(coeffs.sigma, coeffs.mu, float(bnorm_el.max(initial=0.0)), C_P)
    if len(tab.elements):
        e, x, w = tab.elements, tab.points, tab.weights
        G = sol.velocity_at(e, x, 1)
        div = G[:, 0, 0] + G[:, 1, 1]
        b = coeffs.beta(x) if coeffs.beta is not None else np.einsum("na,nac->nc", tab.N, space.gather(bh, e))
        res = np.einsum("nij,nj->ni", G, b) + sol.pressure_at(e, x, 1)
        ph = sol.pressure_at(e, x)
        comp["divergence"] = float(np.dot(w * phi_u[e], div**2))
        comp["streamline"] = float(np.dot(w * phi_b[e], (res**2).sum(axis=1))) / (1.0 + om)
        comp["pressure_L2"] = Phi * float(np.dot(w, ph**2))
    return NormReport(components=comp, Phi_p=Phi, omega_h=om, C_P=C_P)


def energy_error(
    sol: SolutionField,
    case: ManufacturedCase,
    stab: StabilizationConfig,
    disc: CutDiscretization,
    system: LinearSystem | None = None,
) -> float:
    """``|||u - u_h|||``; jump terms see only ``u_h`` since the exact field is smooth."""
    coeffs = case.coefficients()
    space = disc.space
    h = disc.h
    if system is None:
        system = assemble_system(disc, coeffs, stab, constraint=False)
    bh = coeffs.discrete_beta(space)
    phi_u, _, _ = stabilization_parameters(element_beta_norm(space, bh), h, coeffs, stab)
    vol, surf = disc.volume, disc.surface
    du, dg, _ = _pointwise(sol, case, vol)
    total = coeffs.sigma * np.dot(vol.weights, (du**2).sum(1)) + coeffs.mu * np.dot(vol.weights, (dg**2).sum((1, 2)))
    if len(surf.elements):
        su, _, _ = _pointwise(sol, case, surf)
        nrm = surf.normals
        bn = np.abs(np.einsum("nc,nc->n", case.beta(surf.points), nrm))
        sq = (su**2).sum(1)
        sn = np.einsum("nc,nc->n", su, nrm) ** 2
        total += np.dot(surf.weights, (stab.gamma * coeffs.mu / h + bn) * sq)
        total += np.dot(surf.weights, stab.gamma * phi_u[surf.elements] / h * sn)
    Uv = np.concatenate([sol.velocity.ravel(), np.zeros(space.n_dofs)])
    for nm in ("cip_u", "cip_beta", "cip_beta_simplified"):
        if nm in system.blocks:
            total += _quad(system.blocks[nm], Uv)
    return float(np.sqrt(max(total, 0.0)))


# ---------------------------------------------------------------------------
# convergence tables


def eoc(e1: float, e2: float, h1: float, h2: float) -> float:
    if e1 <= 0.0 or e2 <= 0.0:
        return float("nan")
    return math.log(e1 / e2) / math.log(h1 / h2)


@dataclass
class ConvergenceRow:
    N: int
    h: float
    errors: ErrorReport | None
    note: str = ""
    residual: float = float("nan")


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)

    def eocs(self) -> np.ndarray:
        """EOC per error column between consecutive rows; first row is NaN."""
        out = np.full((len(self.rows), len(ERROR_FIELDS)), np.nan)
        for i in range(1, len(self.rows)):
            a, b = self.rows[i - 1], self.rows[i]
            if a.errors is None or b.errors is None:
                continue
            for j, name in enumerate(ERROR_FIELDS):
                out[i, j] = eoc(getattr(a.errors, name), getattr(b.errors, name), a.h, b.h)
        return out

    def last_eoc(self, name: str) -> float:
        return float(self.eocs()[-1, ERROR_FIELDS.index(name)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        eocs = self.eocs()
        header = ["N", "h", *ERROR_FIELDS, *(f"eoc_{k}" for k in ERROR_FIELDS), "residual", "note"]
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row, rates in zip(self.rows, eocs):
                errs = row.errors.values() if row.errors is not None else [float("nan")] * 6
                wr.writerow(
                    [row.N, _fmt(row.h), *map(_fmt, errs), *map(_fmt, rates), _fmt(row.residual), row.note]
                )
        return path


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else f"{x:.10e}"


def solve_case(
    case: ManufacturedCase,
    N: int,
    k: int,
    stab: StabilizationConfig | None = None,
    offset=(0.0, 0.0),
    subdivision: int | None = None,
    levelset: Callable | None = None,
):
    """Discretize, assemble and solve on an ``N x N`` unit-square background mesh.

    ``levelset(mesh)`` overrides the case's circular domain.
    """
    stab = StabilizationConfig() if stab is None else stab
    mesh = build_structured_mesh(N, N)
    ls = case.levelset(mesh, offset) if levelset is None else levelset(mesh)
    disc = discretize(mesh, ls, k, subdivision)
    system = assemble_system(disc, case.coefficients(), stab)
    sol = solve(system)
    return disc, system, sol


def run_convergence(
    case: ManufacturedCase,
    k: int,
    Ns: Sequence[int],
    stab: StabilizationConfig | None = None,
    subdivision: int | None = None,
    callback: Callable | None = None,
    levelset: Callable | None = None,
) -> ConvergenceTable:
    """One solve per ``N``; failures are recorded on their row."""
    Ns = list(Ns)
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("mesh sizes must be strictly increasing")
    table = ConvergenceTable()
    for N in Ns:
        try:
            disc, system, sol = solve_case(case, N, k, stab, subdivision=subdivision, levelset=levelset)
        except Exception as exc:  # noqa: BLE001 - annotate and continue
            table.rows.append(ConvergenceRow(N, 1.0 / N, None, note=f"{type(exc).__name__}: {exc}"))
            continue
        table.rows.append(ConvergenceRow(N, disc.h, compute_errors(sol, case, disc), residual=sol.residual))
        if callback is not None:
            callback(N, disc, system, sol)
    return table


# ---------------------------------------------------------------------------
# cut-position robustness


@dataclass
class SweepRow:
    offset: float
    errors: ErrorReport
    energy_error: float
    condition: float
    residual: float


@dataclass
class SweepReport:
    rows: list

    def _ratio(self, values) -> float:
        v = np.asarray(values, dtype=float)
        return float(v.max() / v.min())

    @property
    def energy_ratio(self) -> float:
        return self._ratio([r.energy_error for r in self.rows])

    @property
    def condition_ratio(self) -> float:
        return self._ratio([r.condition for r in self.rows])

    @property
    def velocity_ratio(self) -> float:
        return self._ratio([r.errors.u_L2 for r in self.rows])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["offset", *ERROR_FIELDS, "energy_error", "condition", "residual"])
            for r in self.rows:
                wr.writerow(
                    [_fmt(r.offset), *map(_fmt, r.errors.values()), _fmt(r.energy_error), _fmt(r.condition), _fmt(r.residual)]
                )
        return path


def cut_sweep(
    case: ManufacturedCase,
    k: int,
    N: int,
    offsets: Sequence[float],
    stab: StabilizationConfig | None = None,
    direction=(1.0, 0.0),
    condition: bool = True,
) -> SweepReport:
    """Shift the level-set center by ``offset * direction`` and re-solve."""
    stab = StabilizationConfig() if stab is None else stab
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    rows = []
    for off in offsets:
        disc, system, sol = solve_case(case, N, k, stab, offset=tuple(off * d))
        rows.append(
            SweepRow(
                offset=float(off),
                errors=compute_errors(sol, case, disc),
                energy_error=energy_error(sol, case, stab, disc, system),
                condition=estimate_condition(system) if condition else float("nan"),
                residual=sol.residual,
            )
        )
    return SweepReport(rows)


def coercivity_ratios(system: LinearSystem, norms_of, n_samples: int = 100, seed: int = 0) -> np.ndarray:
    """``(A_h+S_h+G_h)(U,U) / |U|_h^2`` for random coefficient vectors.

    ``norms_of(U)`` must return the squared semi-norm ``|U|_h^2``.
    """
    rng = np.random.default_rng(seed)
    n = system.space.n_mixed
    A = system.matrix[:n, :n]
    out = np.empty(n_samples)
    for i in range(n_samples):
        U = rng.standard_normal(n)
        out[i] = float(U @ (A @ U)) / norms_of(U)
    return out


def discrete_semi_norm(disc: CutDiscretization, coeffs: OseenCoefficients, stab: StabilizationConfig,
                       system: LinearSystem):
    """Callable returning ``|U|_h^2`` of a mixed coefficient vector."""
    mats = norm_matrices(disc, coeffs, stab)
    h = disc.h
    n = disc.space.n_dofs
    Q = (
        coeffs.sigma * mats["mass"]
        + coeffs.mu * mats["stiffness"]
        + (stab.gamma * coeffs.mu / h) * mats["boundary_mass"]
        + mats["boundary_beta"]
        + system.blocks["nitsche_penalty_normal"]
        + system.stabilization
        + system.ghost_penalty
    ).tocsr()

    def norm(U):
        V = np.array(U[: 3 * n], dtype=float)
        return float(V @ (Q @ V))

    return norm


def extension_ratios(disc: CutDiscretization, n_samples: int = 100, seed: int = 0) -> np.ndarray:
    """``||u||^2_{active} / (||u||^2_Omega + sum_j h^(2j+1) ||[d_n^j u]||^2_{F_Gamma})`` for random scalar ``u``."""
    space = disc.space
    n = space.n_dofs
    h = disc.h
    act = disc.topo.active
    pts, wts = map_triangle_rule(disc.mesh.element_coordinates(act), 2 * space.k)
    el = np.repeat(act, pts.shape[1])
    N, _, _ = space.tabulate(el, pts.reshape(-1, 2))
    w = wts.ravel()
    dofs = space.cell_dofs[el]
    rows = np.repeat(dofs, space.n_local, axis=1).ravel()
    cols = np.tile(dofs, (1, space.n_local)).ravel()
    vals = (w[:, None, None] * N[:, :, None] * N[:, None, :]).ravel()
    M_act = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    tab = disc.volume
    d = space.cell_dofs[tab.elements]
    rows = np.repeat(d, space.n_local, axis=1).ravel()
    cols = np.tile(d, (1, space.n_local)).ravel()
    vals = (tab.weights[:, None, None] * tab.N[:, :, None] * tab.N[:, None, :]).ravel()
    M_om = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    ft = disc.facets
    sel = np.flatnonzero(ft.ghost)
    J = sp.csr_matrix((n, n))
    if len(sel):
        fdofs = ft.dofs[sel]
        nrm = ft.normals
        dn = [np.einsum("qac,qc->qa", ft.jump_grad, nrm)]
        if space.k >= 2:
            dn.append(np.einsum("qacd,qc,qd->qa", ft.jump_hess, nrm, nrm))
        # value jumps of a continuous field vanish, so only j >= 1 contributes
        blocks = [
            _facet_scalar(disc, sel, np.full(len(sel), h ** (2 * j + 1)), X) for j, X in enumerate(dn, start=1)
        ]
        E = sum(blocks)
        rows = np.repeat(fdofs, fdofs.shape[1], axis=1).ravel()
        cols = np.tile(fdofs, (1, fdofs.shape[1])).ravel()
        J = sp.coo_matrix((E.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    rng = np.random.default_rng(seed)
    out = np.empty(n_samples)
    for i in range(n_samples):
        u = rng.standard_normal(n)
        out[i] = float(u @ (M_act @ u)) / float(u @ ((M_om + J) @ u))
    return out

