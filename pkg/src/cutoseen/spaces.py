"""Continuous Lagrange P1/P2 spaces on the active mesh."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cut_geometry import CutTopology
from .mesh import BackgroundMesh


class UnsupportedOrderError(ValueError):
    pass


# local edge i joins local vertices _EDGE[i] (opposite vertex i)
_EDGE = np.array([[1, 2], [2, 0], [0, 1]])


def _barycentric_maps(mesh: BackgroundMesh) -> np.ndarray:
    """Affine maps ``lambda = B[:, :, 0] + B[:, :, 1:] @ x`` for every triangle."""
    x = mesh.element_coordinates()
    A = np.ones((len(x), 3, 3))
    A[:, :, 1:] = x
    # rows of A are [1, x_i, y_i]; lambda_j(x_i) = delta_ij
    return np.linalg.inv(A).transpose(0, 2, 1)


@dataclass(frozen=True)
class FESpace:
    k: int
    topo: CutTopology
    cell_dofs: np.ndarray
    dof_coords: np.ndarray
    bary: np.ndarray = field(repr=False)

    @property
    def mesh(self) -> BackgroundMesh:
        return self.topo.mesh

    @property
    def n_dofs(self) -> int:
        return len(self.dof_coords)

    @property
    def n_local(self) -> int:
        return 3 if self.k == 1 else 6

    @property
    def n_mixed(self) -> int:
        """Velocity (2 interleaved components) plus pressure unknowns."""
        return 3 * self.n_dofs

    def velocity_index(self, dofs, component):
        return 2 * np.asarray(dofs) + component

    def pressure_index(self, dofs):
        return 2 * self.n_dofs + np.asarray(dofs)

    def barycentric(self, elements, points) -> np.ndarray:
        B = self.bary[elements]
        return B[:, :, 0] + np.einsum("nij,nj->ni", B[:, :, 1:], points)

    def tabulate(self, elements, points, derivatives: int = 1):
        """Basis values and physical derivatives at points in given elements.

        Returns ``(N, dN, H)`` with shapes ``(n, nloc)``, ``(n, nloc, 2)``
        and ``(n, nloc, 2, 2)``; ``H`` is ``None`` when ``derivatives < 2``.
        """
        elements = np.asarray(elements)
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        lam = self.barycentric(elements, points)
        G = self.bary[elements][:, :, 1:]
        return _basis(self.k, lam, G, derivatives)

    def gather(self, coefficients, elements) -> np.ndarray:
        """Local coefficient arrays ``(n, nloc, ...)`` of a global field."""
        return np.asarray(coefficients)[self.cell_dofs[elements]]


def _basis(k: int, lam: np.ndarray, G: np.ndarray, derivatives: int):
    n = len(lam)
    if k == 1:
        N = lam.copy()
        dN = G.copy()
        H = np.zeros((n, 3, 2, 2)) if derivatives >= 2 else None
        return N, dN, H
    N = np.empty((n, 6))
    dN = np.empty((n, 6, 2))
    N[:, :3] = lam * (2.0 * lam - 1.0)
    dN[:, :3] = (4.0 * lam - 1.0)[:, :, None] * G
    a, b = _EDGE[:, 0], _EDGE[:, 1]
    N[:, 3:] = 4.0 * lam[:, a] * lam[:, b]
    dN[:, 3:] = 4.0 * (lam[:, b, None] * G[:, a] + lam[:, a, None] * G[:, b])
    H = None
    if derivatives >= 2:
        H = np.empty((n, 6, 2, 2))
        H[:, :3] = 4.0 * np.einsum("nia,nib->niab", G, G)
        Ga, Gb = G[:, a], G[:, b]
        H[:, 3:] = 4.0 * (np.einsum("nia,nib->niab", Ga, Gb) + np.einsum("nia,nib->niab", Gb, Ga))
    return N, dN, H


def build_space(topo: CutTopology, k: int) -> FESpace:
    if k not in (1, 2):
        raise UnsupportedOrderError(f"polynomial order {k} is not supported (use 1 or 2)")
    mesh = topo.mesh
    if len(topo.active) == 0:
        raise ValueError("active mesh is empty")
    tris = mesh.triangles
    active_vertices = np.unique(tris[topo.active])
    vmap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    vmap[active_vertices] = np.arange(len(active_vertices))
    coords = [mesh.vertices[active_vertices]]

    nloc = 3 if k == 1 else 6
    cell_dofs = np.full((mesh.n_triangles, nloc), -1, dtype=np.int64)
    cell_dofs[topo.active, :3] = vmap[tris[topo.active]]
    if k == 2:
        ef = mesh.facets.element_facets
        active_edges = np.unique(ef[topo.active])
        emap = np.full(len(mesh.facets), -1, dtype=np.int64)
        emap[active_edges] = len(active_vertices) + np.arange(len(active_edges))
        cell_dofs[topo.active, 3:] = emap[ef[topo.active]]
        ev = mesh.facets.vertices[active_edges]
        coords.append(0.5 * (mesh.vertices[ev[:, 0]] + mesh.vertices[ev[:, 1]]))
    return FESpace(
        k=k,
        topo=topo,
        cell_dofs=cell_dofs,
        dof_coords=np.concatenate(coords),
        bary=_barycentric_maps(mesh),
    )


def eval_basis(space: FESpace, element: int, ref_points, j: int = 0) -> np.ndarray:
    """Basis values (j=0), gradients (j=1) or Hessians (j=2) in physical coordinates.

    ``ref_points`` are coordinates on the reference triangle (0,0),(1,0),(0,1).
    Derivatives of order above ``k`` are returned as zero tensors.
    """
    ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
    x = space.mesh.element_coordinates([element])[0]
    phys = x[0] + ref[:, :1] * (x[1] - x[0]) + ref[:, 1:] * (x[2] - x[0])
    elements = np.full(len(ref), element)
    N, dN, H = space.tabulate(elements, phys, derivatives=max(j, 1))
    if j == 0:
        return N
    if j == 1:
        return dN
    if j == 2:
        return H
    return np.zeros(N.shape + (2,) * j)


def interpolate(f, space: FESpace) -> np.ndarray:
    """Nodal interpolant; vector-valued ``f`` gives shape ``(n_dofs, d)``."""
    return np.asarray(f(space.dof_coords), dtype=float)


def evaluate(space: FESpace, coefficients, elements, points, derivative: int = 0) -> np.ndarray:
    """Point values (or gradients) of a discrete field given on ``space``."""
    N, dN, _ = space.tabulate(elements, points)
    local = space.gather(coefficients, elements)
    if derivative == 0:
        return np.einsum("na,na...->n...", N, local)
    return np.einsum("nad,na...->n...d", dN, local)
