"""Assembly of the stabilized Nitsche cut finite element Oseen system.

Unknowns are ordered as interleaved velocity components ``2*i + c``
followed by pressures ``2*n + i``; an optional last unknown is the
Lagrange multiplier enforcing a zero pressure mean over the physical
domain. Every contribution is kept as its own named sparse matrix so that
stabilization terms can be inspected, switched off, or reused as norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .cut_geometry import (
    CutQuadrature,
    CutTopology,
    LevelSet,
    build_cut_quadrature,
    classify,
)
from .mesh import BackgroundMesh, InvalidInputError
from .quadrature import line_rule
from .spaces import _EDGE, FESpace, build_space, interpolate

GHOST_TERMS = ("beta", "u", "p", "sigma", "mu")


class EmptyDomainError(RuntimeError):
    pass


@dataclass(frozen=True)
class OseenCoefficients:
    """Data of ``sigma u + beta.grad u - div(2 mu eps(u)) + grad p = f``, ``u = g`` on the boundary.

    ``beta`` is an analytic field used in volume convection and in the
    inflow test; ``beta_nodal`` (nodal values on the velocity space) is the
    discrete field used by the stabilization terms. When only one of them
    is given the other is derived from it.
    """

    sigma: float = 0.0
    mu: float = 1.0
    beta: Callable | None = None
    beta_nodal: np.ndarray | None = None
    f: Callable | None = None
    g: Callable | None = None
    beta_lipschitz: float | None = None

    def __post_init__(self):
        if not self.mu > 0.0:
            raise ValueError(f"viscosity must be positive, got {self.mu}")
        if self.sigma < 0.0:
            raise ValueError(f"reaction coefficient must be non-negative, got {self.sigma}")

    def discrete_beta(self, space: FESpace) -> np.ndarray:
        if self.beta_nodal is not None:
            return np.asarray(self.beta_nodal, dtype=float).reshape(space.n_dofs, 2)
        if self.beta is not None:
            return interpolate(self.beta, space).reshape(space.n_dofs, 2)
        return np.zeros((space.n_dofs, 2))


@dataclass(frozen=True)
class StabilizationConfig:
    """Penalty constants and regime weights.

    A zero constant switches the corresponding term off. ``ghost_terms``
    lists the ghost penalties that are assembled at all.
    """

    gamma: float = 30.0
    gamma_beta: float = 0.05
    gamma_p: float = 0.05
    gamma_u: float | None = None
    gamma_mu: float = 0.05
    gamma_sigma: float = 0.001
    c_u: float = 1.0 / 6.0
    c_sigma: float = 1.0 / 12.0
    use_simplified_gbeta: bool | None = None
    ghost_terms: tuple = GHOST_TERMS

    def __post_init__(self):
        if self.gamma_u is None:
            object.__setattr__(self, "gamma_u", 0.05 * self.gamma_beta)
        for name in ("gamma", "gamma_beta", "gamma_p", "gamma_u", "gamma_mu", "gamma_sigma", "c_u", "c_sigma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        unknown = set(self.ghost_terms) - set(GHOST_TERMS)
        if unknown:
            raise ValueError(f"unknown ghost-penalty terms {sorted(unknown)}")
        object.__setattr__(self, "ghost_terms", tuple(self.ghost_terms))

    def simplified(self, k: int) -> bool:
        if self.use_simplified_gbeta is None:
            return k >= 2
        return bool(self.use_simplified_gbeta)

    def without_ghost(self, *terms) -> "StabilizationConfig":
        return replace(self, ghost_terms=tuple(t for t in self.ghost_terms if t not in terms))


@dataclass
class _PointTable:
    elements: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    N: np.ndarray
    dN: np.ndarray
    starts: np.ndarray
    groups: np.ndarray
    normals: np.ndarray | None = None


@dataclass
class _FacetTable:
    facets: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    plus_slot: np.ndarray
    ghost: np.ndarray
    normals: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    dofs: np.ndarray
    jump_grad: np.ndarray
    jump_hess: np.ndarray | None
    n_points: int


@dataclass
class CutDiscretization:
    """Geometry, space and cached basis tabulations for one cut mesh."""

    mesh: BackgroundMesh
    levelset: LevelSet
    topo: CutTopology
    quad: CutQuadrature
    space: FESpace
    volume: _PointTable = field(repr=False)
    surface: _PointTable = field(repr=False)
    facets: _FacetTable = field(repr=False)

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def h(self) -> float:
        return self.mesh.h

    def restrict_facets(self, mask) -> "CutDiscretization":
        """Copy whose interior-facet table keeps only the facets selected by ``mask``.

        Used to compare facet forms on subsets, e.g. CIP on ``F_Gamma`` only.
        """
        ft = self.facets
        sel = np.flatnonzero(np.asarray(mask, dtype=bool))
        q = (sel[:, None] * ft.n_points + np.arange(ft.n_points)).ravel()
        sub = replace(
            ft,
            facets=ft.facets[sel],
            plus=ft.plus[sel],
            minus=ft.minus[sel],
            plus_slot=ft.plus_slot[sel],
            ghost=ft.ghost[sel],
            normals=ft.normals[q],
            points=ft.points[q],
            weights=ft.weights[q],
            dofs=ft.dofs[sel],
            jump_grad=ft.jump_grad[q],
            jump_hess=None if ft.jump_hess is None else ft.jump_hess[q],
        )
        return replace(self, facets=sub)


def _point_table(space: FESpace, elements, points, weights, normals=None) -> _PointTable:
    if len(elements):
        N, dN, _ = space.tabulate(elements, points)
        groups, starts = np.unique(elements, return_index=True)
    else:
        nl = space.n_local
        N, dN = np.empty((0, nl)), np.empty((0, nl, 2))
        groups = starts = np.empty(0, dtype=np.int64)
    return _PointTable(elements, points, weights, N, dN, starts, groups, normals)


def _facet_table(space: FESpace, topo: CutTopology) -> _FacetTable:
    mesh = space.mesh
    ft = mesh.facets
    facets = topo.interior_facets
    plus = ft.elements[facets, 0]
    minus = ft.elements[facets, 1]
    plus_slot = np.argmax(ft.element_facets[plus] == facets[:, None], axis=1)
    ghost = np.isin(facets, topo.ghost_facets)
    # exact for products of beta_h-weighted jumps of order k
    s, w = line_rule(4 * space.k - 2)
    nq = len(s)
    v = mesh.vertices[ft.vertices[facets]]
    pts = v[:, None, 0] + s[None, :, None] * (v[:, None, 1] - v[:, None, 0])
    wts = ft.lengths[facets, None] * w[None, :]
    pts = pts.reshape(-1, 2)
    wts = wts.ravel()
    ep = np.repeat(plus, nq)
    em = np.repeat(minus, nq)
    deriv = 2 if space.k >= 2 else 1
    _, dNp, Hp = space.tabulate(ep, pts, deriv)
    _, dNm, Hm = space.tabulate(em, pts, deriv)
    jump_grad = np.concatenate([dNp, -dNm], axis=1)
    jump_hess = np.concatenate([Hp, -Hm], axis=1) if deriv == 2 else None
    dofs = np.concatenate([space.cell_dofs[plus], space.cell_dofs[minus]], axis=1)
    return _FacetTable(
        facets=facets,
        plus=plus,
        minus=minus,
        plus_slot=plus_slot,
        ghost=ghost,
        normals=np.repeat(ft.normals[facets], nq, axis=0),
        points=pts,
        weights=wts,
        dofs=dofs,
        jump_grad=jump_grad,
        jump_hess=jump_hess,
        n_points=nq,
    )


def discretize(
    mesh: BackgroundMesh,
    levelset: LevelSet,
    k: int = 1,
    subdivision: int | None = None,
    order: int | None = None,
) -> CutDiscretization:
    """Build the cut quadrature and the P^k space for ``levelset``; basis values are tabulated once.

    Defaults: no sub-triangulation for k=1, depth 2 for k=2; quadrature
    exact to degree ``2k+2`` in the bulk and on the interface.
    """
    if subdivision is None:
        subdivision = 0 if k == 1 else 2
    order = 2 * k + 2 if order is None else order
    topo = classify(mesh, levelset, subdivision)
    if len(topo.active) == 0:
        raise EmptyDomainError("the level set leaves no active elements")
    quad = build_cut_quadrature(topo, order)
    space = build_space(topo, k)
    volume = _point_table(space, quad.volume_elements, quad.volume_points, quad.volume_weights)
    surface = _point_table(
        space, quad.surface_elements, quad.surface_points, quad.surface_weights, quad.surface_normals
    )
    return CutDiscretization(
        mesh=mesh,
        levelset=levelset,
        topo=topo,
        quad=quad,
        space=space,
        volume=volume,
        surface=surface,
        facets=_facet_table(space, topo),
    )


# ---------------------------------------------------------------------------
# stabilization parameters


def stabilization_parameters(beta_norm, h: float, coeffs: OseenCoefficients, stab: StabilizationConfig):
    """Element-wise ``(phi_u, phi_beta, phi_p)`` from the local advective magnitude."""
    beta_norm = np.asarray(beta_norm, dtype=float)
    phi_u = coeffs.mu + stab.c_u * beta_norm * h + stab.c_sigma * coeffs.sigma * h * h
    phi_beta = h * h / phi_u
    return phi_u, phi_beta, phi_beta.copy()


def facet_average(element_values, facet_table: _FacetTable) -> np.ndarray:
    v = np.asarray(element_values)
    return 0.5 * (v[facet_table.plus] + v[facet_table.minus])


def element_beta_norm(space: FESpace, beta_nodal: np.ndarray) -> np.ndarray:
    """``max |beta_h|`` over the nodes of every element (zero on inactive ones)."""
    mag = np.hypot(beta_nodal[:, 0], beta_nodal[:, 1])
    out = np.zeros(space.mesh.n_triangles)
    act = space.topo.active
    out[act] = mag[space.cell_dofs[act]].max(axis=1)
    return out


def facet_beta_norm(space: FESpace, beta_nodal: np.ndarray, table: _FacetTable) -> np.ndarray:
    """``max |beta_h|`` over the nodes lying on each facet."""
    mag = np.hypot(beta_nodal[:, 0], beta_nodal[:, 1])
    local = _EDGE[table.plus_slot]
    if space.k == 2:
        local = np.column_stack([local, 3 + table.plus_slot])
    nodes = np.take_along_axis(space.cell_dofs[table.plus], local, axis=1)
    return mag[nodes].max(axis=1)


# ---------------------------------------------------------------------------
# sparse accumulation helpers


class _Builder:
    def __init__(self, n: int):
        self.n = n
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        vals = np.asarray(vals)
        self.rows.append(np.broadcast_to(rows[:, :, None], vals.shape).ravel())
        self.cols.append(np.broadcast_to(cols[:, None, :], vals.shape).ravel())
        self.vals.append(vals.ravel())

    def add_vector_identity(self, dofs_r, dofs_c, block):
        """Add ``block ⊗ I2`` acting on both velocity components."""
        for c in range(2):
            self.add(2 * dofs_r + c, 2 * dofs_c + c, block)

    def tocsr(self) -> sp.csr_matrix:
        if not self.rows:
            return sp.csr_matrix((self.n, self.n))
        r = np.concatenate(self.rows)
        c = np.concatenate(self.cols)
        v = np.concatenate(self.vals)
        return sp.coo_matrix((v, (r, c)), shape=(self.n, self.n)).tocsr()


def _reduce_elements(table: _PointTable, q_values: np.ndarray) -> np.ndarray:
    return np.add.reduceat(q_values, table.starts, axis=0)


def _reduce_facets(table: _FacetTable, q_values: np.ndarray) -> np.ndarray:
    nf = len(table.facets)
    return q_values.reshape((nf, table.n_points) + q_values.shape[1:]).sum(axis=1)


def _field_at(func, points, shape):
    if func is None:
        return np.zeros((len(points),) + shape)
    return np.asarray(func(points), dtype=float).reshape((len(points),) + shape)


def _beta_at(table: _PointTable, coeffs: OseenCoefficients, space: FESpace, beta_nodal) -> np.ndarray:
    if coeffs.beta is not None:
        return _field_at(coeffs.beta, table.points, (2,))
    if len(table.elements) == 0:
        return np.zeros((0, 2))
    local = space.gather(beta_nodal, table.elements)
    return np.einsum("na,nac->nc", table.N, local)


def _empty_rhs(space: FESpace) -> np.ndarray:
    return np.zeros(space.n_mixed)


# ---------------------------------------------------------------------------
# Galerkin part over the physical domain


def assemble_galerkin(disc: CutDiscretization, coeffs: OseenCoefficients, beta_nodal=None):
    """Reaction, convection, viscous and pressure-divergence terms on ``T ∩ Ω``.

    Returns ``(blocks, rhs)`` with ``rhs`` holding ``(f, v)``.
    """
    space = disc.space
    n = space.n_mixed
    tab = disc.volume
    rhs = _empty_rhs(space)
    names = ("galerkin_reaction", "galerkin_convection", "galerkin_viscous", "galerkin_pressure")
    if len(tab.elements) == 0:
        return {k: sp.csr_matrix((n, n)) for k in names}, rhs
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    dofs = space.cell_dofs[tab.groups]
    w, N, dN = tab.weights, tab.N, tab.dN

    mass = _reduce_elements(tab, np.einsum("q,qa,qb->qab", w, N, N))
    b = _beta_at(tab, coeffs, space, beta_nodal)
    conv = _reduce_elements(tab, np.einsum("q,qa,qb->qab", w, N, np.einsum("qc,qbc->qb", b, dN)))
    K = _reduce_elements(tab, np.einsum("q,qac,qbd->qcdab", w, dN, dN))
    P = _reduce_elements(tab, np.einsum("q,qad,qb->qdab", w, dN, N))

    reaction = _Builder(n)
    reaction.add_vector_identity(dofs, dofs, coeffs.sigma * mass)
    convection = _Builder(n)
    convection.add_vector_identity(dofs, dofs, conv)
    viscous = _Builder(n)
    lap = K[:, 0, 0] + K[:, 1, 1]
    for d in range(2):
        for c in range(2):
            blk = coeffs.mu * K[:, c, d]
            if c == d:
                blk = blk + coeffs.mu * lap
            viscous.add(2 * dofs + d, 2 * dofs + c, blk)
    pressure = _Builder(n)
    pdofs = space.pressure_index(dofs)
    for d in range(2):
        pressure.add(2 * dofs + d, pdofs, -P[:, d])
        pressure.add(pdofs, 2 * dofs + d, P[:, d].transpose(0, 2, 1))

    f = _field_at(coeffs.f, tab.points, (2,))
    Fq = np.einsum("q,qa,qc->qac", w, N, f)
    Fe = _reduce_elements(tab, Fq)
    for c in range(2):
        np.add.at(rhs, 2 * dofs + c, Fe[:, :, c])

    blocks = {
        "galerkin_reaction": reaction.tocsr(),
        "galerkin_convection": convection.tocsr(),
        "galerkin_viscous": viscous.tocsr(),
        "galerkin_pressure": pressure.tocsr(),
    }
    return blocks, rhs


def mean_constraint(disc: CutDiscretization) -> np.ndarray:
    """``m_i = ∫_Ω N_i dx`` for the pressure mean constraint."""
    tab = disc.volume
    vec = np.zeros(disc.space.n_dofs)
    if len(tab.elements):
        np.add.at(vec, disc.space.cell_dofs[tab.elements], tab.weights[:, None] * tab.N)
    return vec


# ---------------------------------------------------------------------------
# Nitsche boundary terms on the embedded interface


def assemble_nitsche(disc: CutDiscretization, coeffs: OseenCoefficients, stab: StabilizationConfig, beta_nodal=None):
    space = disc.space
    n = space.n_mixed
    tab = disc.surface
    h = disc.h
    rhs = _empty_rhs(space)
    names = (
        "nitsche_inflow",
        "nitsche_penalty_viscous",
        "nitsche_penalty_normal",
        "nitsche_consistency",
        "nitsche_pressure",
    )
    if len(tab.elements) == 0:
        return {k: sp.csr_matrix((n, n)) for k in names}, rhs
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    phi_u, _, _ = stabilization_parameters(element_beta_norm(space, beta_nodal), h, coeffs, stab)

    dofs = space.cell_dofs[tab.groups]
    pdofs = space.pressure_index(dofs)
    w, N, dN, nrm = tab.weights, tab.N, tab.dN, tab.normals
    mu = coeffs.mu
    dnN = np.einsum("qac,qc->qa", dN, nrm)
    b = _beta_at(tab, coeffs, space, beta_nodal)
    inflow = np.maximum(-np.einsum("qc,qc->q", b, nrm), 0.0)
    pen_n = stab.gamma * phi_u[tab.elements] / h
    pen_v = stab.gamma * mu / h

    NN = np.einsum("qa,qb->qab", N, N)
    M_in = _reduce_elements(tab, (w * inflow)[:, None, None] * NN)
    M_v = _reduce_elements(tab, (w * pen_v)[:, None, None] * NN)
    M_n = _reduce_elements(tab, np.einsum("q,qab,qd,qc->qdcab", w * pen_n, NN, nrm, nrm))
    # -(2 mu eps(u) n, v): test (a,d), trial (b,c)
    cons_dn = _reduce_elements(tab, np.einsum("q,qa,qb->qab", w * mu, N, dnN))
    cons_x = _reduce_elements(tab, np.einsum("q,qa,qc,qbd->qdcab", w * mu, N, nrm, dN))
    NNn = _reduce_elements(tab, np.einsum("q,qab,qd->qdab", w, NN, nrm))

    B_in = _Builder(n)
    B_in.add_vector_identity(dofs, dofs, M_in)
    B_v = _Builder(n)
    B_v.add_vector_identity(dofs, dofs, M_v)
    B_n = _Builder(n)
    B_c = _Builder(n)
    B_p = _Builder(n)
    for d in range(2):
        for c in range(2):
            B_n.add(2 * dofs + d, 2 * dofs + c, M_n[:, d, c])
            blk = -cons_x[:, d, c]
            if c == d:
                blk = blk - cons_dn
            B_c.add(2 * dofs + d, 2 * dofs + c, blk)
            B_c.add(2 * dofs + c, 2 * dofs + d, blk.transpose(0, 2, 1))
        B_p.add(2 * dofs + d, pdofs, NNn[:, d])
        B_p.add(pdofs, 2 * dofs + d, -NNn[:, d].transpose(0, 2, 1))

    g = _field_at(coeffs.g, tab.points, (2,))
    gn = np.einsum("qc,qc->q", g, nrm)
    vel = (
        np.einsum("q,qa,qd->qad", w * (inflow + pen_v), N, g)
        + np.einsum("q,qa,qd->qad", w * pen_n * gn, N, nrm)
        - np.einsum("q,qa,qd->qad", w * mu, dnN, g)
        - np.einsum("q,qac,qc,qd->qad", w * mu, dN, g, nrm)
    )
    Fv = _reduce_elements(tab, vel)
    Fp = _reduce_elements(tab, -(w * gn)[:, None] * N)
    for d in range(2):
        np.add.at(rhs, 2 * dofs + d, Fv[:, :, d])
    np.add.at(rhs, pdofs, Fp)

    blocks = {
        "nitsche_inflow": B_in.tocsr(),
        "nitsche_penalty_viscous": B_v.tocsr(),
        "nitsche_penalty_normal": B_n.tocsr(),
        "nitsche_consistency": B_c.tocsr(),
        "nitsche_pressure": B_p.tocsr(),
    }
    return blocks, rhs


# ---------------------------------------------------------------------------
# facet jump penalties


@dataclass
class _FacetData:
    """Jumps of normal derivatives and beta-weighted derivatives per facet point."""

    dn: list
    beta_grad: list
    div: list
    weights: np.ndarray
    beta_f: np.ndarray
    phi_u: np.ndarray
    phi_beta: np.ndarray
    phi_p: np.ndarray


def _facet_data(disc: CutDiscretization, coeffs, stab, beta_nodal) -> _FacetData:
    space = disc.space
    ft = disc.facets
    nrm = ft.normals
    nq = len(ft.weights)
    if nq:
        bq = np.einsum("na,nac->nc", space.tabulate(np.repeat(ft.plus, ft.n_points), ft.points)[0],
                       space.gather(beta_nodal, np.repeat(ft.plus, ft.n_points)))
    else:
        bq = np.zeros((0, 2))
    jg = ft.jump_grad
    dn = [None, np.einsum("qac,qc->qa", jg, nrm)]
    beta_grad = [np.einsum("qac,qc->qa", jg, bq)]
    div = [jg]
    if space.k >= 2:
        Hn = np.einsum("qacd,qd->qac", ft.jump_hess, nrm)
        dn.append(np.einsum("qac,qc->qa", Hn, nrm))
        beta_grad.append(np.einsum("qac,qc->qa", Hn, bq))
        div.append(Hn)
    phi_u, phi_b, phi_p = stabilization_parameters(element_beta_norm(space, beta_nodal), disc.h, coeffs, stab)
    return _FacetData(
        dn=dn,
        beta_grad=beta_grad,
        div=div,
        weights=ft.weights,
        beta_f=facet_beta_norm(space, beta_nodal, ft),
        phi_u=facet_average(phi_u, ft),
        phi_beta=facet_average(phi_b, ft),
        phi_p=facet_average(phi_p, ft),
    )


def _facet_scalar(disc, sel, scale, X):
    """Per-facet ``sum_q w scale X_a X_b`` over the selected facets."""
    ft = disc.facets
    nq = ft.n_points
    qsel = (sel[:, None] * nq + np.arange(nq)).ravel()
    w = ft.weights[qsel] * np.repeat(scale, nq)
    Xs = X[qsel]
    E = np.einsum("q,qa,qb->qab", w, Xs, Xs)
    return E.reshape((len(sel), nq) + E.shape[1:]).sum(axis=1)


def _facet_vector(disc, sel, scale, V):
    """Per-facet ``sum_q w scale V_a[d] V_b[c]`` ordered ``(f, d, c, a, b)``."""
    ft = disc.facets
    nq = ft.n_points
    qsel = (sel[:, None] * nq + np.arange(nq)).ravel()
    w = ft.weights[qsel] * np.repeat(scale, nq)
    Vs = V[qsel]
    E = np.einsum("q,qad,qbc->qdcab", w, Vs, Vs)
    return E.reshape((len(sel), nq) + E.shape[1:]).sum(axis=1)


def _add_vel_scalar(builder, dofs, E):
    builder.add_vector_identity(dofs, dofs, E)


def _add_vel_div(builder, dofs, E):
    for d in range(2):
        for c in range(2):
            builder.add(2 * dofs + d, 2 * dofs + c, E[:, d, c])


def assemble_cip(disc: CutDiscretization, coeffs: OseenCoefficients, stab: StabilizationConfig, beta_nodal=None):
    """Continuous interior penalty on all interior facets of the active mesh."""
    space = disc.space
    n = space.n_mixed
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    ft = disc.facets
    sel = np.arange(len(ft.facets))
    dofs = ft.dofs
    h = disc.h
    blocks = {}
    if len(sel) == 0:
        return {}
    fd = _facet_data(disc, coeffs, stab, beta_nodal)
    if stab.simplified(space.k):
        B = _Builder(n)
        scale = stab.gamma_beta * fd.beta_f**2 * fd.phi_beta * h
        _add_vel_scalar(B, dofs, _facet_scalar(disc, sel, scale, fd.dn[1]))
        blocks["cip_beta_simplified"] = B.tocsr()
    else:
        B = _Builder(n)
        _add_vel_scalar(B, dofs, _facet_scalar(disc, sel, stab.gamma_beta * fd.phi_beta * h, fd.beta_grad[0]))
        blocks["cip_beta"] = B.tocsr()
        B = _Builder(n)
        _add_vel_div(B, dofs, _facet_vector(disc, sel, stab.gamma_u * fd.phi_u * h, fd.div[0]))
        blocks["cip_u"] = B.tocsr()
    B = _Builder(n)
    pd = space.pressure_index(dofs)
    B.add(pd, pd, _facet_scalar(disc, sel, stab.gamma_p * fd.phi_p * h, fd.dn[1]))
    blocks["cip_p"] = B.tocsr()
    return blocks


def assemble_ghost_penalties(
    disc: CutDiscretization, coeffs: OseenCoefficients, stab: StabilizationConfig, beta_nodal=None
):
    """Higher-order normal-derivative jump penalties on the ghost facets."""
    space = disc.space
    n = space.n_mixed
    k = space.k
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    ft = disc.facets
    sel = np.flatnonzero(ft.ghost)
    if len(sel) == 0:
        return {}
    dofs = ft.dofs[sel]
    pd = space.pressure_index(dofs)
    h = disc.h
    fd = _facet_data(disc, coeffs, stab, beta_nodal)
    terms = set(stab.ghost_terms)
    blocks = {}

    if stab.simplified(k):
        if "beta" in terms:
            B = _Builder(n)
            phib = fd.beta_f[sel] ** 2 * fd.phi_beta[sel]
            for j in range(1, k + 1):
                E = _facet_scalar(disc, sel, stab.gamma_beta * phib * h ** (2 * j - 1), fd.dn[j])
                _add_vel_scalar(B, dofs, E)
            blocks["gp_beta_simplified"] = B.tocsr()
    else:
        if "beta" in terms:
            B = _Builder(n)
            for j in range(k):
                E = _facet_scalar(disc, sel, stab.gamma_beta * fd.phi_beta[sel] * h ** (2 * j + 1), fd.beta_grad[j])
                _add_vel_scalar(B, dofs, E)
            blocks["gp_beta"] = B.tocsr()
        if "u" in terms:
            B = _Builder(n)
            for j in range(k):
                E = _facet_vector(disc, sel, stab.gamma_u * fd.phi_u[sel] * h ** (2 * j + 1), fd.div[j])
                _add_vel_div(B, dofs, E)
            blocks["gp_u"] = B.tocsr()
    if "p" in terms:
        B = _Builder(n)
        for j in range(1, k + 1):
            B.add(pd, pd, _facet_scalar(disc, sel, stab.gamma_p * fd.phi_p[sel] * h ** (2 * j - 1), fd.dn[j]))
        blocks["gp_p"] = B.tocsr()
    ones = np.ones(len(sel))
    if "sigma" in terms:
        B = _Builder(n)
        for j in range(1, k + 1):
            E = _facet_scalar(disc, sel, stab.gamma_sigma * coeffs.sigma * h ** (2 * j + 1) * ones, fd.dn[j])
            _add_vel_scalar(B, dofs, E)
        blocks["gp_sigma"] = B.tocsr()
    if "mu" in terms:
        B = _Builder(n)
        for j in range(1, k + 1):
            E = _facet_scalar(disc, sel, stab.gamma_mu * coeffs.mu * h ** (2 * j - 1) * ones, fd.dn[j])
            _add_vel_scalar(B, dofs, E)
        blocks["gp_mu"] = B.tocsr()
    return blocks


# ---------------------------------------------------------------------------
# full system


@dataclass
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    space: FESpace
    blocks: dict
    mean: np.ndarray | None

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    @property
    def has_constraint(self) -> bool:
        return self.mean is not None

    def block_sum(self, *prefixes) -> sp.csr_matrix:
        n = self.space.n_mixed
        out = sp.csr_matrix((n, n))
        for name, mat in self.blocks.items():
            if any(name.startswith(p) for p in prefixes):
                out = out + mat
        return out

    @property
    def stabilization(self) -> sp.csr_matrix:
        return self.block_sum("cip_")

    @property
    def ghost_penalty(self) -> sp.csr_matrix:
        return self.block_sum("gp_")

    @property
    def operator(self) -> sp.csr_matrix:
        return self.block_sum("galerkin_", "nitsche_")


def assemble_system(
    disc: CutDiscretization,
    coeffs: OseenCoefficients,
    stab: StabilizationConfig | None = None,
    constraint: bool = True,
    beta_nodal=None,
) -> LinearSystem:
    """``A_h + S_h + G_h`` with right-hand side ``L_h`` and the pressure-mean multiplier."""
    stab = StabilizationConfig() if stab is None else stab
    space = disc.space
    if space.n_dofs == 0:
        raise EmptyDomainError("no active degrees of freedom")
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    blocks, rhs = assemble_galerkin(disc, coeffs, beta_nodal)
    nb, nrhs = assemble_nitsche(disc, coeffs, stab, beta_nodal)
    blocks.update(nb)
    blocks.update(assemble_cip(disc, coeffs, stab, beta_nodal))
    blocks.update(assemble_ghost_penalties(disc, coeffs, stab, beta_nodal))
    rhs = rhs + nrhs
    A = sum(blocks.values(), sp.csr_matrix((space.n_mixed, space.n_mixed)))
    mean = None
    if constraint:
        mean = mean_constraint(disc)
        col = np.zeros(space.n_mixed)
        col[2 * space.n_dofs:] = mean
        col = sp.csr_matrix(col[:, None])
        A = sp.bmat([[A, col], [col.T, None]], format="csr")
        rhs = np.append(rhs, 0.0)
    return LinearSystem(matrix=A.tocsr(), rhs=rhs, space=space, blocks=blocks, mean=mean)


def norm_matrices(disc: CutDiscretization, coeffs: OseenCoefficients, stab: StabilizationConfig, beta_nodal=None) -> dict:
    """Velocity quadratic forms that appear in the energy norms but not in ``A_h``."""
    space = disc.space
    n = space.n_mixed
    if beta_nodal is None:
        beta_nodal = coeffs.discrete_beta(space)
    out = {}
    tab = disc.volume
    dofs = space.cell_dofs[tab.groups]
    M = _Builder(n)
    K = _Builder(n)
    if len(tab.elements):
        M.add_vector_identity(dofs, dofs, _reduce_elements(tab, np.einsum("q,qa,qb->qab", tab.weights, tab.N, tab.N)))
        K.add_vector_identity(dofs, dofs, _reduce_elements(tab, np.einsum("q,qac,qbc->qab", tab.weights, tab.dN, tab.dN)))
    out["mass"] = M.tocsr()
    out["stiffness"] = K.tocsr()
    tab = disc.surface
    Bm = _Builder(n)
    Bb = _Builder(n)
    if len(tab.elements):
        dofs = space.cell_dofs[tab.groups]
        NN = np.einsum("qa,qb->qab", tab.N, tab.N)
        b = _beta_at(tab, coeffs, space, beta_nodal)
        bn = np.abs(np.einsum("qc,qc->q", b, tab.normals))
        Bm.add_vector_identity(dofs, dofs, _reduce_elements(tab, tab.weights[:, None, None] * NN))
        Bb.add_vector_identity(dofs, dofs, _reduce_elements(tab, (tab.weights * bn)[:, None, None] * NN))
    out["boundary_mass"] = Bm.tocsr()
    out["boundary_beta"] = Bb.tocsr()
    return out


def jump_and_average(space: FESpace, facet: int, field, j: int = 0, degree: int | None = None):
    """Jump ``v+ - v-`` and average of the j-th normal derivative on a facet.

    ``field`` is a global coefficient vector or broken element-local
    coefficients of shape ``(n_elements, n_local)``. Traces are taken from
    the lower-index (plus) and higher-index (minus) neighbours; the normal
    points out of the plus element. Returns ``(points, weights, jump, average)``.
    """
    mesh = space.mesh
    ft = mesh.facets
    plus, minus = ft.elements[facet]
    if minus < 0:
        raise InvalidInputError(f"facet {facet} is a boundary facet")
    if j > 2:
        raise InvalidInputError("normal derivatives above order 2 are not available")
    degree = 2 * space.k if degree is None else degree
    s, w = line_rule(degree)
    v = mesh.vertices[ft.vertices[facet]]
    pts = v[0] + s[:, None] * (v[1] - v[0])
    wts = ft.lengths[facet] * w
    nrm = ft.normals[facet]
    field = np.asarray(field, dtype=float)
    if field.ndim == 2 and field.shape == (mesh.n_triangles, space.n_local):
        local = {plus: field[plus], minus: field[minus]}
    else:
        local = {plus: field[space.cell_dofs[plus]], minus: field[space.cell_dofs[minus]]}

    def trace(e):
        N, dN, H = space.tabulate(np.full(len(pts), e), pts, derivatives=2)
        if j == 0:
            return N @ local[e]
        if j == 1:
            return np.einsum("qac,c,a->q", dN, nrm, local[e])
        return np.einsum("qacd,c,d,a->q", H, nrm, nrm, local[e])

    tp, tm = trace(plus), trace(minus)
    return pts, wts, tp - tm, 0.5 * (tp + tm)


def export_matrix_market(system: LinearSystem, path) -> None:
    """Write the assembled matrix in Matrix Market coordinate format."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(system.matrix), comment="cutoseen mixed Oseen system")
