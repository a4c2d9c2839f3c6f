import numpy as np
import pytest

from cutoseen.cut_geometry import circle_level_set
from cutoseen.forms import StabilizationConfig, assemble_system, discretize
from cutoseen.navier_stokes import (
    FlowProblem,
    PicardError,
    TransientState,
    cavity_lid,
    mass_imbalance,
    ramp,
    run_transient,
    square_level_set,
    stationary_picard,
    step,
)
from cutoseen.mesh import build_structured_mesh
from cutoseen.solver import SolutionField, solve
from cutoseen.spaces import interpolate
from cutoseen.verification import compute_errors, taylor_case



def _taylor_problem(disc, mu=0.1, **kw):
    case = taylor_case(mu, sigma=0.0, center=(0.5123, 0.4987), radius=0.4)
    return case, FlowProblem(disc, mu, f=lambda t, x: case.f(x), g=lambda t, x: case.g(x), **kw)


def test_ramp_values():
    assert ramp(0.0, 0.1) == 0.0
    assert ramp(0.05, 0.1) == pytest.approx(0.5)
    assert ramp(0.2, 0.1) == 1.0
    assert ramp(0.0, None) == 1.0


def test_state_validation(circle_disc_p1):
    z = SolutionField.zeros(circle_disc_p1.space)
    with pytest.raises(ValueError):
        TransientState(0.0, z, 0.1, theta=0.0)
    with pytest.raises(ValueError):
        TransientState(0.0, z, -0.1)


def test_quadratic_fixed_point_is_reproduced(circle_disc_p2):
    # u = (y, x), p = -|x|^2/2 solves steady Navier-Stokes with zero forcing
    d = circle_disc_p2
    u = lambda x: np.column_stack([x[:, 1], x[:, 0]])  # noqa: E731
    prob = FlowProblem(d, 0.1, g=lambda t, x: u(x))
    sol, rep = stationary_picard(prob, tol=1e-11)
    assert np.abs(sol.velocity - interpolate(u, d.space).reshape(-1, 2)).max() < 1e-9
    p = interpolate(lambda x: -0.5 * (x**2).sum(1), d.space)
    shift = np.dot(sol.pressure - p, np.ones_like(p)) / len(p)
    assert np.abs(sol.pressure - p - shift).max() < 1e-8
    assert rep.residual <= 1e-10 and rep.mass_imbalance < 1e-10


def test_stokes_limit_converges_in_one_iteration(circle_disc_p1):
    _, prob = _taylor_problem(circle_disc_p1, convection=0.0)
    _, rep = stationary_picard(prob)
    assert rep.picard_iterations == 1


def test_zero_data_gives_zero(circle_disc_p1):
    sol, rep = stationary_picard(FlowProblem(circle_disc_p1, 0.1))
    assert rep.picard_iterations == 1
    assert not sol.velocity.any() and not sol.pressure.any()


def test_picard_cap_raises_with_history(circle_disc_p1):
    _, prob = _taylor_problem(circle_disc_p1)
    with pytest.raises(PicardError) as info:
        stationary_picard(prob, max_iter=2, tol=1e-14)
    assert len(info.value.history) == 2


def test_stationary_taylor_close_to_oseen():
    mesh = build_structured_mesh(20, 20)
    d = discretize(mesh, circle_level_set(mesh, (0.5123, 0.4987), 0.4), 1)
    case, prob = _taylor_problem(d)
    sol, rep = stationary_picard(prob)
    oseen = solve(assemble_system(d, case.coefficients()))
    e_ns = compute_errors(sol, case, d)
    e_os = compute_errors(oseen, case, d)
    assert e_ns.u_L2 <= 2.0 * e_os.u_L2 and e_ns.p_L2 <= 2.0 * e_os.p_L2
    assert rep.mass_imbalance <= 1e-3


def test_stationary_state_is_a_fixed_point_of_step(circle_disc_p1):
    # sigma-free stabilization, so the steady and the transient discretizations coincide
    stab = StabilizationConfig(c_sigma=0.0, gamma_sigma=0.0)
    _, prob = _taylor_problem(circle_disc_p1)
    sol, _ = stationary_picard(prob, stab, tol=1e-12)
    new, rep = step(TransientState(0.0, sol, dt=0.05, theta=0.5, tol=1e-12), prob, stab)
    change = np.linalg.norm(new.solution.velocity - sol.velocity) / np.linalg.norm(sol.velocity)
    assert change < 1e-8
    assert np.abs(new.solution.pressure - sol.pressure).max() < 1e-8
    assert new.time == pytest.approx(0.05) and rep.residual <= 1e-10


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_exact_quadratic_state_is_a_fixed_point_of_step(theta, circle_disc_p2):
    d = circle_disc_p2
    u = lambda x: np.column_stack([x[:, 1], x[:, 0]])  # noqa: E731
    prob = FlowProblem(d, 0.1, g=lambda t, x: u(x))
    sol, _ = stationary_picard(prob, tol=1e-12)
    new, _ = step(TransientState(0.0, sol, dt=0.01, theta=theta, tol=1e-12), prob)
    assert np.abs(new.solution.velocity - sol.velocity).max() < 1e-9
    assert np.abs(new.solution.pressure - sol.pressure).max() < 1e-8


def test_backward_euler_stokes_step_is_linear(circle_disc_p1, rng):
    d = circle_disc_p1
    prob = FlowProblem(d, 0.1, convection=0.0)
    n = d.space.n_dofs
    U = SolutionField(d.space, rng.standard_normal((n, 2)), np.zeros(n), 0.0)
    U3 = SolutionField(d.space, 3.0 * U.velocity, np.zeros(n), 0.0)
    a, _ = step(TransientState(0.0, U, 0.01, theta=1.0), prob)
    b, _ = step(TransientState(0.0, U3, 0.01, theta=1.0), prob)
    assert np.allclose(b.solution.velocity, 3.0 * a.solution.velocity, rtol=1e-10, atol=1e-12)


def test_short_cavity_run():
    mesh = build_structured_mesh(12, 12)
    c = (0.513, 0.507)
    d = discretize(mesh, square_level_set(mesh, c, 0.4), 1)
    prob = FlowProblem(d, 0.008, g=cavity_lid(c, 0.4), ramp_time=0.1)
    seen = []
    state, reps = run_transient(prob, 0.01, 3, callback=lambda s, r: seen.append(r.time))
    assert seen == pytest.approx([0.01, 0.02, 0.03])
    assert all(r.picard_iterations <= 50 and r.residual <= 1e-10 for r in reps)
    assert np.abs(state.solution.velocity).max() > 0.0
    assert mass_imbalance(state.solution, d) == pytest.approx(reps[-1].mass_imbalance)


def test_cavity_lid_profile():
    g = cavity_lid((0.5, 0.5), 0.4)
    x = np.array([[0.5, 0.9], [0.1, 0.9], [0.5, 0.1], [0.9, 0.5]])
    out = g(0.0, x)
    assert out[0, 0] == pytest.approx(1.0)
    assert np.allclose(out[1:], 0.0) and np.allclose(out[:, 1], 0.0)
