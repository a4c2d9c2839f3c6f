import numpy as np
import pytest
import scipy.sparse as sp

from cutoseen.cut_geometry import LevelSet, circle_level_set
from cutoseen.forms import (
    EmptyDomainError,
    OseenCoefficients,
    StabilizationConfig,
    assemble_cip,
    assemble_galerkin,
    assemble_ghost_penalties,
    assemble_nitsche,
    assemble_system,
    discretize,
    export_matrix_market,
    jump_and_average,
    stabilization_parameters,
)
from cutoseen.mesh import InvalidInputError, build_structured_mesh
from cutoseen.solver import SingularSystemError, estimate_condition, ritz_values
from cutoseen.spaces import interpolate
from cutoseen.verification import patch_case


def _full_disc(N=4, k=1):
    mesh = build_structured_mesh(N, N)
    return discretize(mesh, LevelSet.on_mesh(mesh, lambda x: -np.ones(len(x))), k)


def _mixed(space, vel=None, pres=None):
    n = space.n_dofs
    U = np.zeros(3 * n)
    if vel is not None:
        U[: 2 * n] = interpolate(vel, space).ravel()
    if pres is not None:
        U[2 * n :] = interpolate(pres, space)
    return U


def _const_beta(b):
    return lambda x: np.tile(np.asarray(b, dtype=float), (len(x), 1))


def test_stabilization_parameter_values():
    c = OseenCoefficients(sigma=1.0, mu=0.1)
    phi_u, phi_b, phi_p = stabilization_parameters(np.array([1.0]), 0.1, c, StabilizationConfig())
    assert phi_u[0] == pytest.approx(0.1 + 0.1 / 6 + 0.01 / 12)
    assert phi_u[0] == pytest.approx(0.1175)
    assert phi_b[0] == pytest.approx(0.01 / 0.1175) and phi_p[0] == phi_b[0]
    stokes = OseenCoefficients(sigma=0.0, mu=0.3)
    pu, pb, _ = stabilization_parameters(np.array([0.0]), 0.2, stokes, StabilizationConfig())
    assert pu[0] == pytest.approx(0.3) and pb[0] == pytest.approx(0.04 / 0.3)


def test_default_constants():
    s = StabilizationConfig()
    assert (s.gamma, s.gamma_beta, s.gamma_p, s.gamma_mu, s.gamma_sigma) == (30.0, 0.05, 0.05, 0.05, 0.001)
    assert s.gamma_u == pytest.approx(0.05 * 0.05)
    assert s.c_u == pytest.approx(1 / 6) and s.c_sigma == pytest.approx(1 / 12)
    assert s.simplified(2) and not s.simplified(1)
    with pytest.raises(ValueError):
        StabilizationConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        StabilizationConfig(ghost_terms=("nope",))


def test_coefficient_validation():
    with pytest.raises(ValueError):
        OseenCoefficients(mu=0.0)
    with pytest.raises(ValueError):
        OseenCoefficients(sigma=-1.0)


def test_jump_and_average(circle_disc_p1):
    space = circle_disc_p1.space
    ft = space.mesh.facets
    f = int(circle_disc_p1.facets.facets[3])
    c = interpolate(lambda x: np.sin(3 * x[:, 0]) + x[:, 1], space)
    _, _, jump, avg = jump_and_average(space, f, c, 0)
    assert np.allclose(jump, 0.0, atol=1e-14)
    broken = np.zeros((space.mesh.n_triangles, 3))
    plus, minus = ft.elements[f]
    broken[plus], broken[minus] = 1.0, -1.0
    _, _, jump, avg = jump_and_average(space, f, broken, 0)
    assert np.allclose(jump, 2.0) and np.allclose(avg, 0.0)
    lin = interpolate(lambda x: 2 * x[:, 0] - x[:, 1], space)
    assert np.allclose(jump_and_average(space, f, lin, 1)[2], 0.0, atol=1e-12)
    boundary = int(np.flatnonzero(~ft.interior)[0])
    with pytest.raises(InvalidInputError):
        jump_and_average(space, boundary, c, 0)


def test_galerkin_mass_of_constants(circle_disc_p1):
    d = circle_disc_p1
    blocks, _ = assemble_galerkin(d, OseenCoefficients(sigma=1.0, mu=1.0))
    area = d.quad.domain_area
    M = blocks["galerkin_reaction"]
    for e in ([1.0, 0.0], [0.0, 1.0]):
        U = _mixed(d.space, _const_beta(e))
        assert U @ (M @ U) == pytest.approx(area, rel=1e-12)
    U0 = _mixed(d.space, _const_beta([1.0, 0.0]))
    U1 = _mixed(d.space, _const_beta([0.0, 1.0]))
    assert abs(U0 @ (M @ U1)) < 1e-14


def test_galerkin_convection_analytic():
    d = _full_disc(5)
    c = OseenCoefficients(mu=1.0, beta=_const_beta([1.0, 2.0]))
    blocks, _ = assemble_galerkin(d, c)
    U = _mixed(d.space, lambda x: np.column_stack([x[:, 0] + x[:, 1], 3 * x[:, 0]]))
    V = _mixed(d.space, lambda x: np.column_stack([x[:, 0], x[:, 1]]))
    # beta.grad u = (3, 3); integral of 3x + 3y over the unit square
    assert V @ (blocks["galerkin_convection"] @ U) == pytest.approx(3.0, abs=1e-12)


def test_pressure_of_constant_vs_solenoidal(circle_disc_p1):
    d = circle_disc_p1
    blocks, _ = assemble_galerkin(d, OseenCoefficients(mu=1.0))
    P = _mixed(d.space, pres=lambda x: np.ones(len(x)))
    V = _mixed(d.space, lambda x: np.column_stack([x[:, 1], x[:, 0]]))
    assert abs(V @ (blocks["galerkin_pressure"] @ P)) < 1e-13
    assert abs(P @ (blocks["galerkin_pressure"] @ V)) < 1e-13


@pytest.mark.parametrize("k", [1, 2])
def test_patch_residual(k, circle_disc_p1, circle_disc_p2):
    d = circle_disc_p1 if k == 1 else circle_disc_p2
    case = patch_case()
    s = assemble_system(d, case.coefficients(), constraint=False)
    U = _mixed(d.space, case.u)
    r = s.matrix @ U - s.rhs
    assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(s.rhs)


def test_no_inflow_for_outgoing_beta(circle_disc_p1):
    c = OseenCoefficients(mu=1.0, beta=lambda x: x - np.array([0.5123, 0.4987]))
    blocks, _ = assemble_nitsche(circle_disc_p1, c, StabilizationConfig())
    assert blocks["nitsche_inflow"].count_nonzero() == 0 or abs(blocks["nitsche_inflow"]).max() == 0.0
    c_in = OseenCoefficients(mu=1.0, beta=lambda x: np.array([0.5123, 0.4987]) - x)
    blocks, _ = assemble_nitsche(circle_disc_p1, c_in, StabilizationConfig())
    assert abs(blocks["nitsche_inflow"]).max() > 0.0


def test_cip_vanishes_on_linear_fields(circle_disc_p1):
    d = circle_disc_p1
    c = OseenCoefficients(sigma=1.0, mu=0.1, beta=lambda x: np.column_stack([x[:, 1], -x[:, 0]]))
    blocks = assemble_cip(d, c, StabilizationConfig())
    U = _mixed(d.space, lambda x: np.column_stack([1 + x[:, 0] - 2 * x[:, 1], 3 * x[:, 0]]), lambda x: x[:, 0] - x[:, 1])
    for name in ("cip_beta", "cip_u", "cip_p"):
        assert abs(U @ (blocks[name] @ U)) < 1e-12


def test_cip_pressure_single_facet_hand_calculation():
    d = _full_disc(4)
    h = d.h
    mu = 1.0
    c = OseenCoefficients(sigma=0.0, mu=mu)
    stab = StabilizationConfig()
    space = d.space
    hat = np.zeros(space.n_dofs)
    hat[12] = 1.0  # vertex (0.5, 0.5)
    ft = d.mesh.facets
    # horizontal facet from (0.5, 0.5) to (0.75, 0.5)
    f = int(np.flatnonzero((ft.vertices == [12, 13]).all(axis=1))[0])
    _, w, jump, _ = jump_and_average(space, f, hat, 1)
    phi_p = h * h / mu
    energy = stab.gamma_p * phi_p * h * np.dot(w, jump**2)
    # the hat gradient jumps by 1/h across the facet
    assert energy == pytest.approx(stab.gamma_p * phi_p * h * (1 / h) ** 2 * h, rel=1e-12)
    # the assembled form is the sum of such facet contributions
    S = assemble_cip(d, c, stab)["cip_p"]
    P = np.concatenate([np.zeros(2 * space.n_dofs), hat])
    total = sum(
        stab.gamma_p * phi_p * h * np.dot(jw, jj**2)
        for jw, jj in (jump_and_average(space, int(g), hat, 1)[1:3] for g in d.facets.facets)
    )
    assert P @ (S @ P) == pytest.approx(total, rel=1e-12)


def test_ghost_penalty_empty_when_uncut():
    d = _full_disc(4)
    assert assemble_ghost_penalties(d, OseenCoefficients(sigma=1.0, mu=1.0), StabilizationConfig()) == {}


@pytest.mark.parametrize("k", [1, 2])
def test_ghost_penalties_vanish_on_linear_fields(k, circle_disc_p1, circle_disc_p2):
    d = circle_disc_p1 if k == 1 else circle_disc_p2
    blocks = assemble_ghost_penalties(d, OseenCoefficients(sigma=1.0, mu=0.1), StabilizationConfig())
    U = _mixed(d.space, lambda x: np.column_stack([x[:, 0] - 2 * x[:, 1], 3 * x[:, 0]]), lambda x: x[:, 0] - x[:, 1])
    for name in ("gp_sigma", "gp_mu", "gp_p"):
        assert abs(U @ (blocks[name] @ U)) < 1e-12


def test_ghost_beta_equals_cip_beta_on_ghost_facets(circle_disc_p1):
    d = circle_disc_p1
    c = OseenCoefficients(sigma=1.0, mu=0.1, beta=lambda x: np.column_stack([np.sin(3 * x[:, 1]), x[:, 0] ** 2]))
    stab = StabilizationConfig()
    gp = assemble_ghost_penalties(d, c, stab)["gp_beta"]
    restricted = assemble_cip(d.restrict_facets(d.facets.ghost), c, stab)["cip_beta"]
    assert abs(gp - restricted).max() <= 1e-12 * max(abs(gp).max(), 1.0)
    assert gp.nnz > 0


@pytest.mark.parametrize("k", [1, 2])
def test_stabilization_symmetric_psd(k, circle_disc_p1, circle_disc_p2):
    d = circle_disc_p1 if k == 1 else circle_disc_p2
    c = OseenCoefficients(sigma=1.0, mu=0.1, beta=lambda x: np.column_stack([x[:, 1], -x[:, 0]]))
    s = assemble_system(d, c)
    for M in (s.stabilization, s.ghost_penalty, s.blocks["nitsche_penalty_normal"], s.blocks["nitsche_penalty_viscous"]):
        scale = abs(M).max()
        assert abs(M - M.T).max() <= 1e-12 * scale
        assert ritz_values(M, 20).min() >= -1e-10 * scale


def test_skew_symmetry_of_convection(circle_disc_p1, rng):
    d = circle_disc_p1
    b = np.array([0.7, -0.4])
    blocks, _ = assemble_galerkin(d, OseenCoefficients(mu=1.0, beta=_const_beta(b)))
    C = blocks["galerkin_convection"]
    n = d.space.n_dofs
    U = np.concatenate([rng.standard_normal(2 * n), np.zeros(n)])
    tab = d.surface
    u = np.einsum("qa,qac->qc", tab.N, d.space.gather(U[: 2 * n].reshape(n, 2), tab.elements))
    boundary = 0.5 * np.dot(tab.weights * (tab.normals @ b), (u**2).sum(1))
    assert U @ (C @ U) == pytest.approx(boundary, rel=1e-10, abs=1e-12)


def test_system_size_and_constraint(circle_disc_p1):
    d = circle_disc_p1
    c = patch_case().coefficients()
    s = assemble_system(d, c)
    assert s.matrix.shape == (3 * d.space.n_dofs + 1,) * 2
    assert s.mean @ np.ones(d.space.n_dofs) == pytest.approx(d.quad.domain_area)
    loose = assemble_system(d, c, constraint=False)
    try:
        cond = estimate_condition(loose)
    except SingularSystemError:
        cond = np.inf
    assert cond > 1e12


def test_empty_domain():
    mesh = build_structured_mesh(3, 3)
    with pytest.raises(EmptyDomainError):
        discretize(mesh, LevelSet.on_mesh(mesh, lambda x: np.ones(len(x))), 1)


def test_ghost_terms_can_be_disabled(circle_disc_p1):
    c = OseenCoefficients(sigma=1.0, mu=0.1)
    blocks = assemble_ghost_penalties(circle_disc_p1, c, StabilizationConfig().without_ghost("p", "mu"))
    assert set(blocks) == {"gp_beta", "gp_u", "gp_sigma"}


def test_matrix_market_export(tmp_path, circle_disc_p1):
    from scipy.io import mmread

    s = assemble_system(circle_disc_p1, patch_case().coefficients())
    export_matrix_market(s, tmp_path / "A.mtx")
    A = sp.csr_matrix(mmread(str(tmp_path / "A.mtx")))
    assert abs(A - s.matrix).max() < 1e-12 * abs(s.matrix).max()
