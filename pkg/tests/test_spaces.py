import numpy as np
import pytest

from cutoseen.cut_geometry import LevelSet, circle_level_set, classify
from cutoseen.mesh import build_structured_mesh
from cutoseen.spaces import (
    UnsupportedOrderError,
    build_space,
    eval_basis,
    evaluate,
    interpolate,
)
from cutoseen.quadrature import map_triangle_rule


def _full(N=10):
    mesh = build_structured_mesh(N, N)
    return classify(mesh, LevelSet.on_mesh(mesh, lambda x: -np.ones(len(x))))


def _random_points(space, rng, n_el=20, n_pts=200):
    act = space.topo.active
    el = rng.choice(act, size=n_el, replace=False)
    el = np.repeat(el, n_pts)
    r = rng.random((len(el), 2))
    flip = r.sum(axis=1) > 1
    r[flip] = 1 - r[flip]
    x = space.mesh.element_coordinates(el)
    pts = x[:, 0] + r[:, :1] * (x[:, 1] - x[:, 0]) + r[:, 1:] * (x[:, 2] - x[:, 0])
    return el, pts


def test_full_mesh_counts():
    s = build_space(_full(), 1)
    assert s.n_dofs == 121 and s.n_mixed == 363


def test_single_triangle_p2():
    mesh = build_structured_mesh(1, 1)
    topo = classify(mesh, LevelSet.on_mesh(mesh, lambda x: -np.ones(len(x))))
    s = build_space(topo, 2)
    assert s.n_local == 6
    assert len(np.unique(s.cell_dofs[0])) == 6


def test_circle_restricts_dofs():
    mesh = build_structured_mesh(10, 10)
    topo = classify(mesh, circle_level_set(mesh))
    assert build_space(topo, 1).n_dofs < 121
    assert np.all(build_space(topo, 1).cell_dofs[topo.labels == 1] == -1)


def test_unsupported_order():
    with pytest.raises(UnsupportedOrderError):
        build_space(_full(3), 3)


@pytest.mark.parametrize("k", [1, 2])
def test_partition_of_unity_and_reproduction(k, rng):
    s = build_space(_full(6), k)
    el, pts = _random_points(s, rng)
    N, dN, _ = s.tabulate(el, pts)
    assert np.allclose(N.sum(axis=1), 1.0, atol=1e-13)
    polys = [lambda x: 1 + 2 * x[:, 0] - 3 * x[:, 1]]
    grads = [lambda x: np.tile([2.0, -3.0], (len(x), 1))]
    if k == 2:
        polys.append(lambda x: x[:, 0] ** 2 - 2 * x[:, 0] * x[:, 1] + 0.5 * x[:, 1] ** 2)
        grads.append(lambda x: np.column_stack([2 * x[:, 0] - 2 * x[:, 1], -2 * x[:, 0] + x[:, 1]]))
    for f, g in zip(polys, grads):
        c = interpolate(f, s)
        assert np.allclose(evaluate(s, c, el, pts), f(pts), atol=1e-12)
        assert np.allclose(evaluate(s, c, el, pts, 1), g(pts), atol=1e-12)


def test_p1_barycenter_and_constant_gradients():
    s = build_space(_full(4), 1)
    assert np.allclose(eval_basis(s, 5, [[1 / 3, 1 / 3]]), 1 / 3)
    g = eval_basis(s, 5, [[0.1, 0.2], [0.6, 0.3]], 1)
    assert np.allclose(g[0], g[1])
    assert np.allclose(eval_basis(s, 5, [[0.1, 0.2]], 2), 0.0)
    assert eval_basis(s, 5, [[0.1, 0.2]], 3).shape == (1, 3, 2, 2, 2)


def test_p2_hessian_finite_differences(rng):
    s = build_space(_full(5), 2)
    el, pts = _random_points(s, rng, 10, 3)
    _, _, H = s.tabulate(el, pts, 2)
    eps = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = eps
        _, gp, _ = s.tabulate(el, pts + e)
        _, gm, _ = s.tabulate(el, pts - e)
        assert np.allclose((gp - gm) / (2 * eps), H[:, :, :, d], atol=1e-6)


def test_interpolation_error_rate():
    def u(x):
        return np.column_stack([-np.cos(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1]),
                                np.sin(2 * np.pi * x[:, 0]) * np.cos(2 * np.pi * x[:, 1])])

    errs = []
    for N in (10, 20, 40):
        s = build_space(_full(N), 1)
        c = interpolate(u, s)
        pts, w = map_triangle_rule(s.mesh.element_coordinates(), 4)
        el = np.repeat(np.arange(s.mesh.n_triangles), pts.shape[1])
        pts = pts.reshape(-1, 2)
        errs.append(np.sqrt(np.dot(w.ravel(), ((evaluate(s, c, el, pts) - u(pts)) ** 2).sum(1))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 3.5) & (ratios < 4.5))
