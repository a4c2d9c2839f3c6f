"""Level-set classification, ghost facets and cut-cell quadrature.

The embedded boundary is the zero contour of the piecewise-linear
interpolant of the level set, either on the background triangles or on a
uniform sub-triangulation of each cut triangle. Negative values are inside
the fluid domain.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .mesh import BackgroundMesh, InvalidInputError
from .quadrature import line_rule, map_triangle_rule, triangle_rule

SNAP_TOLERANCE = 1e-12
DEGENERATE_AREA = 1e-14


class ElementLabel(IntEnum):
    INSIDE = 0
    OUTSIDE = 1
    CUT = 2


@dataclass(frozen=True)
class LevelSet:
    """Signed distance-like function with its nodal values on a mesh."""

    func: Callable[[np.ndarray], np.ndarray]
    nodal: np.ndarray
    gradient: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def on_mesh(cls, mesh: BackgroundMesh, func, gradient=None) -> "LevelSet":
        nodal = np.asarray(func(mesh.vertices), dtype=float)
        return cls(func=func, nodal=nodal, gradient=gradient)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.func(np.atleast_2d(x)), dtype=float)


def circle(center=(0.5, 0.5), radius=0.45):
    """Level set and gradient of a disc, negative inside."""
    c = np.asarray(center, dtype=float)

    def func(x):
        x = np.atleast_2d(x)
        return np.hypot(x[:, 0] - c[0], x[:, 1] - c[1]) - radius

    def gradient(x):
        x = np.atleast_2d(x)
        d = x - c
        r = np.hypot(d[:, 0], d[:, 1])
        r = np.where(r == 0.0, 1.0, r)
        return d / r[:, None]

    return func, gradient


def circle_level_set(mesh: BackgroundMesh, center=(0.5, 0.5), radius=0.45) -> LevelSet:
    func, grad = circle(center, radius)
    return LevelSet.on_mesh(mesh, func, grad)


@dataclass(frozen=True)
class CutTopology:
    mesh: BackgroundMesh
    labels: np.ndarray
    active: np.ndarray
    cut: np.ndarray
    interior_facets: np.ndarray
    ghost_facets: np.ndarray
    subdivision: int = 0
    lattice_values: np.ndarray = field(repr=False, default=None)

    @property
    def inside(self) -> np.ndarray:
        return np.flatnonzero(self.labels == ElementLabel.INSIDE)

    @property
    def active_mask(self) -> np.ndarray:
        return self.labels != ElementLabel.OUTSIDE

    @property
    def fictitious_area(self) -> float:
        """Area of the union of active elements."""
        return float(self.mesh.signed_areas()[self.active].sum())


@lru_cache(maxsize=None)
def _lattice(m: int):
    """Reference lattice points and sub-triangles of a uniform m-refinement."""
    index = {}
    pts = []
    for j in range(m + 1):
        for i in range(m + 1 - j):
            index[i, j] = len(pts)
            pts.append((i / m, j / m))
    tris = []
    for j in range(m):
        for i in range(m - j):
            tris.append((index[i, j], index[i + 1, j], index[i, j + 1]))
            if i + j < m - 1:
                tris.append((index[i + 1, j], index[i + 1, j + 1], index[i, j + 1]))
    # lattice points on each reference edge (edge opposite local vertex v)
    edges = []
    for v in range(3):
        if v == 0:
            on = [index[i, m - i] for i in range(m + 1)]
        elif v == 1:
            on = [index[0, j] for j in range(m + 1)]
        else:
            on = [index[i, 0] for i in range(m + 1)]
        edges.append(on)
    return np.array(pts), np.array(tris, dtype=np.int64), np.array(edges, dtype=np.int64)


def _lattice_coordinates(mesh: BackgroundMesh, m: int, elements=None) -> np.ndarray:
    ref, _, _ = _lattice(m)
    x = mesh.element_coordinates(elements)
    e1 = x[:, 1] - x[:, 0]
    e2 = x[:, 2] - x[:, 0]
    return x[:, None, 0] + ref[None, :, 0, None] * e1[:, None] + ref[None, :, 1, None] * e2[:, None]


def _snap(values: np.ndarray, h: float) -> np.ndarray:
    values = np.array(values, dtype=float)
    values[np.abs(values) < SNAP_TOLERANCE * h] = 0.0
    return values


def lattice_values(mesh: BackgroundMesh, ls: LevelSet, subdivision: int = 0) -> np.ndarray:
    """Snapped level-set samples on each element's sub-lattice, ``(nt, npts)``."""
    if subdivision == 0:
        vals = ls.nodal[mesh.triangles]
    else:
        m = 2**subdivision
        pts = _lattice_coordinates(mesh, m)
        vals = ls.func(pts.reshape(-1, 2)).reshape(pts.shape[:2])
        # lattice corners coincide with vertices; keep nodal values there
        ref, _, _ = _lattice(m)
        corner = [0, int(np.flatnonzero((ref[:, 0] == 1) & (ref[:, 1] == 0))[0]),
                  int(np.flatnonzero((ref[:, 0] == 0) & (ref[:, 1] == 1))[0])]
        vals[:, corner] = ls.nodal[mesh.triangles]
    return _snap(vals, mesh.h)


def classify(mesh: BackgroundMesh, ls: LevelSet, subdivision: int = 0) -> CutTopology:
    """Label elements Inside/Outside/Cut from the signs of the interpolant.

    A sample with ``|phi| < 1e-12 h`` is snapped to zero and counts as
    inside. An element with all samples non-positive is still Cut when one
    of its edges lies on the zero contour and the element across that edge
    has outside samples.
    """
    m = 2**subdivision
    vals = lattice_values(mesh, ls, subdivision)
    has_pos = (vals > 0.0).any(axis=1)
    has_nonpos = (vals <= 0.0).any(axis=1)
    labels = np.full(mesh.n_triangles, ElementLabel.INSIDE, dtype=np.int8)
    labels[~has_nonpos] = ElementLabel.OUTSIDE
    labels[has_pos & has_nonpos] = ElementLabel.CUT

    _, _, edge_pts = _lattice(m)
    facets = mesh.facets
    inside = np.flatnonzero(labels == ElementLabel.INSIDE)
    for t in inside:
        if np.count_nonzero(vals[t] == 0.0) < 2:
            continue
        for v in range(3):
            if np.all(vals[t, edge_pts[v]] == 0.0):
                f = facets.element_facets[t, v]
                nb = facets.elements[f]
                other = nb[1] if nb[0] == t else nb[0]
                if other >= 0 and has_pos[other]:
                    labels[t] = ElementLabel.CUT

    active = np.flatnonzero(labels != ElementLabel.OUTSIDE)
    cut = np.flatnonzero(labels == ElementLabel.CUT)
    adj = facets.elements
    both = (adj[:, 1] >= 0)
    both[both] &= (labels[adj[both, 0]] != ElementLabel.OUTSIDE) & (
        labels[adj[both, 1]] != ElementLabel.OUTSIDE
    )
    interior = np.flatnonzero(both)
    topo = CutTopology(
        mesh=mesh,
        labels=labels,
        active=active,
        cut=cut,
        interior_facets=interior,
        ghost_facets=np.empty(0, dtype=np.int64),
        subdivision=subdivision,
        lattice_values=vals,
    )
    object.__setattr__(topo, "ghost_facets", ghost_facets(topo))
    return topo


def ghost_facets(topo: CutTopology) -> np.ndarray:
    """Interior active facets with at least one cut neighbour."""
    adj = topo.mesh.facets.elements[topo.interior_facets]
    is_cut = topo.labels == ElementLabel.CUT
    touch = is_cut[adj[:, 0]] | is_cut[adj[:, 1]]
    return topo.interior_facets[touch]


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_triangle(tri: np.ndarray, phi: np.ndarray):
    poly, zeros = [], []
    for a in range(3):
        b = (a + 1) % 3
        pa, pb = phi[a], phi[b]
        if pa <= 0.0:
            poly.append(tri[a])
        if pa == 0.0:
            zeros.append(tri[a])
        if (pa < 0.0 < pb) or (pb < 0.0 < pa):
            t = pa / (pa - pb)
            x = tri[a] + t * (tri[b] - tri[a])
            poly.append(x)
            zeros.append(x)
    poly = np.array(poly, dtype=float).reshape(-1, 2)
    segment = None
    if len(zeros) == 2 and _polygon_area(poly) > 0.0:
        seg = np.array(zeros)
        if np.linalg.norm(seg[1] - seg[0]) > 0.0:
            segment = seg
    return poly, segment


def _linear_gradient(tri: np.ndarray, phi: np.ndarray) -> np.ndarray:
    J = np.array([tri[1] - tri[0], tri[2] - tri[0]])
    return np.linalg.solve(J, np.array([phi[1] - phi[0], phi[2] - phi[0]]))


def clip_cut_element(tri, ls_nodal):
    """Clip a triangle against ``{phi_h <= 0}`` for a linear ``phi_h``.

    Returns the (possibly empty) convex polygon of the inside part and the
    interface segment, or ``None`` when the zero set inside the triangle has
    no length.
    """
    tri = np.asarray(tri, dtype=float)
    phi = np.asarray(ls_nodal, dtype=float)
    if np.all(phi > 0.0) or np.all(phi < 0.0):
        raise InvalidInputError("level set does not change sign on the element")
    poly, segment = _clip_triangle(tri, phi)
    if _polygon_area(poly) <= 0.0:
        poly = np.empty((0, 2))
    return poly, segment


def volume_quadrature(polygon, order: int, h: float = 1.0):
    """Fan-triangulated rule on a convex polygon, weights summing to its area."""
    poly = np.asarray(polygon, dtype=float).reshape(-1, 2)
    if len(poly) < 3 or _polygon_area(poly) < DEGENERATE_AREA * h * h:
        return np.empty((0, 2)), np.empty(0)
    fan = np.stack([np.repeat(poly[None, 0], len(poly) - 2, axis=0), poly[1:-1], poly[2:]], axis=1)
    pts, wts = map_triangle_rule(fan, order)
    return pts.reshape(-1, 2), wts.ravel()


def surface_quadrature(segment, order: int, direction=None):
    """Gauss-Legendre rule on a segment with a unit normal.

    The normal is oriented along ``direction`` (typically the level-set
    gradient, i.e. out of the domain).
    """
    seg = np.asarray(segment, dtype=float)
    t = seg[1] - seg[0]
    length = float(np.hypot(*t))
    if length == 0.0:
        return np.empty((0, 2)), np.empty(0), np.zeros(2)
    s, w = line_rule(order)
    pts = seg[0] + s[:, None] * t
    normal = np.array([t[1], -t[0]]) / length
    if direction is not None and np.dot(normal, direction) < 0.0:
        normal = -normal
    return pts, w * length, normal


@dataclass(frozen=True)
class CutQuadrature:
    """Flat quadrature on ``T ∩ Ω`` for active elements and on ``Γ ∩ T``.

    Points are grouped by element in increasing element order.
    """

    volume_points: np.ndarray
    volume_weights: np.ndarray
    volume_elements: np.ndarray
    surface_points: np.ndarray
    surface_weights: np.ndarray
    surface_normals: np.ndarray
    surface_elements: np.ndarray
    order: int
    surface_order: int
    polygons: dict = field(default_factory=dict, repr=False)
    segments: list = field(default_factory=list, repr=False)

    def element_volumes(self, n_elements: int) -> np.ndarray:
        return np.bincount(self.volume_elements, self.volume_weights, minlength=n_elements)

    @property
    def domain_area(self) -> float:
        return float(self.volume_weights.sum())

    @property
    def interface_length(self) -> float:
        return float(self.surface_weights.sum())


def build_cut_quadrature(topo: CutTopology, order: int, surface_order: int | None = None) -> CutQuadrature:
    mesh = topo.mesh
    h = mesh.h
    surface_order = order if surface_order is None else surface_order
    m = 2**topo.subdivision
    ref, subtris, _ = _lattice(m)

    inside = topo.inside
    corners = mesh.element_coordinates(inside)
    ipts, iwts = map_triangle_rule(corners, order)
    vol_tris = [corners]
    vol_owner = [inside]

    polygons: dict[int, list] = {}
    segments: list = []
    fan_tris, fan_owner = [], []
    s_pts, s_wts, s_nrm, s_own = [], [], [], []
    if len(topo.cut):
        latt = _lattice_coordinates(mesh, m, topo.cut)
    for c, t in enumerate(topo.cut):
        vals = topo.lattice_values[t]
        pieces = []
        for st in subtris:
            tri = latt[c, st]
            phi = vals[st]
            if np.all(phi <= 0.0) and np.count_nonzero(phi == 0.0) < 2:
                poly, seg = tri, None
            elif np.all(phi > 0.0):
                continue
            else:
                poly, seg = _clip_triangle(tri, phi)
            if len(poly) >= 3 and _polygon_area(poly) >= DEGENERATE_AREA * h * h:
                pieces.append(poly)
                for i in range(1, len(poly) - 1):
                    fan_tris.append((poly[0], poly[i], poly[i + 1]))
                    fan_owner.append(t)
            if seg is not None:
                grad = _linear_gradient(tri, phi)
                p, w, n = surface_quadrature(seg, surface_order, grad)
                s_pts.append(p)
                s_wts.append(w)
                s_nrm.append(np.repeat(n[None], len(w), axis=0))
                s_own.append(np.full(len(w), t))
                segments.append((int(t), seg, n))
        polygons[int(t)] = pieces

    if fan_tris:
        vol_tris.append(np.array(fan_tris))
        vol_owner.append(np.array(fan_owner))
    tris = np.concatenate(vol_tris)
    owner = np.repeat(np.concatenate(vol_owner), len(triangle_rule(order)[1]))
    pts, wts = map_triangle_rule(tris, order)
    pts = pts.reshape(-1, 2)
    wts = wts.ravel()
    perm = np.argsort(owner, kind="stable")

    if s_pts:
        sp = np.concatenate(s_pts)
        sw = np.concatenate(s_wts)
        sn = np.concatenate(s_nrm)
        so = np.concatenate(s_own)
        sperm = np.argsort(so, kind="stable")
        sp, sw, sn, so = sp[sperm], sw[sperm], sn[sperm], so[sperm]
    else:
        sp, sw, sn, so = np.empty((0, 2)), np.empty(0), np.empty((0, 2)), np.empty(0, dtype=np.int64)

    return CutQuadrature(
        volume_points=pts[perm],
        volume_weights=wts[perm],
        volume_elements=owner[perm],
        surface_points=sp,
        surface_weights=sw,
        surface_normals=sn,
        surface_elements=so,
        order=order,
        surface_order=surface_order,
        polygons=polygons,
        segments=segments,
    )


@dataclass(frozen=True)
class GeometryReport:
    max_walk: int
    walk_distance: dict
    unreachable: list
    multiple_crossings: list

    @property
    def ok(self) -> bool:
        return not self.unreachable


def check_geometry_assumptions(topo: CutTopology) -> GeometryReport:
    """Facet-walk distance from every cut element to the nearest Inside one.

    Breadth-first search over interior active facets. Also lists facets whose
    sampled level set changes sign more than once along the facet.
    """
    mesh = topo.mesh
    adj = mesh.facets.elements[topo.interior_facets]
    neighbours: dict[int, list[int]] = {int(t): [] for t in topo.active}
    for a, b in adj:
        neighbours[int(a)].append(int(b))
        neighbours[int(b)].append(int(a))

    dist = {int(t): 0 for t in topo.inside}
    queue = deque(dist)
    while queue:
        t = queue.popleft()
        for nb in neighbours[t]:
            if nb not in dist:
                dist[nb] = dist[t] + 1
                queue.append(nb)
    walk = {int(t): dist[int(t)] for t in topo.cut if int(t) in dist}
    unreachable = [int(t) for t in topo.cut if int(t) not in dist]

    multiple = []
    if topo.lattice_values is not None:
        m = 2**topo.subdivision
        _, _, edge_pts = _lattice(m)
        for t in topo.cut:
            for v in range(3):
                s = np.sign(topo.lattice_values[t, edge_pts[v]])
                s[s == 0] = -1
                if np.count_nonzero(np.diff(s)) > 1:
                    multiple.append(int(mesh.facets.element_facets[t, v]))
    return GeometryReport(
        max_walk=max(walk.values(), default=0),
        walk_distance=walk,
        unreachable=unreachable,
        multiple_crossings=sorted(set(multiple)),
    )


def write_cut_vtk(path, quad: CutQuadrature) -> Path:
    """Legacy VTK polydata-style unstructured grid of cut polygons and interface segments."""
    path = Path(path)
    points, cells, types = [], [], []
    for polys in quad.polygons.values():
        for poly in polys:
            start = len(points)
            points.extend(poly.tolist())
            cells.append([len(poly)] + list(range(start, start + len(poly))))
            types.append(7)
    for _, seg, _ in quad.segments:
        start = len(points)
        points.extend(seg.tolist())
        cells.append([2, start, start + 1])
        types.append(3)
    lines = [
        "# vtk DataFile Version 3.0",
        "cutoseen cut geometry",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(points)} double",
    ]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in points]
    lines.append(f"CELLS {len(cells)} {sum(len(c) for c in cells)}")
    lines += [" ".join(str(i) for i in c) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(t) for t in types]
    path.write_text("\n".join(lines) + "\n")
    return path
