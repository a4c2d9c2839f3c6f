"""Structured background triangulations with facet topology."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class InvalidInputError(ValueError):
    """Raised when geometric input is degenerate or out of range."""


class TopologyError(RuntimeError):
    """Raised when a triangulation is not a valid 2-manifold."""


@dataclass(frozen=True)
class FacetTable:
    """Edge adjacency of a triangulation.

    ``elements[f] = (plus, minus)`` with ``plus < minus``; boundary facets
    carry ``minus = -1``. ``normals[f]`` is the unit normal pointing out of
    the ``plus`` element. ``element_facets[t, i]`` is the facet opposite the
    local vertex ``i`` of triangle ``t``.
    """

    vertices: np.ndarray
    elements: np.ndarray
    normals: np.ndarray
    lengths: np.ndarray
    element_facets: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return self.elements[:, 1] >= 0

    def __len__(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class BackgroundMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    h: float
    bbox: tuple[tuple[float, float], tuple[float, float]]
    shape: tuple[int, int] = (0, 0)
    facets: FacetTable = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "facets", build_facets(self))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def element_coordinates(self, elements=None) -> np.ndarray:
        """Vertex coordinates, shape ``(n, 3, 2)``."""
        tris = self.triangles if elements is None else self.triangles[elements]
        return self.vertices[tris]

    def signed_areas(self) -> np.ndarray:
        x = self.element_coordinates()
        e1 = x[:, 1] - x[:, 0]
        e2 = x[:, 2] - x[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def build_structured_mesh(nx: int, ny: int, bbox=((0.0, 0.0), (1.0, 1.0))) -> BackgroundMesh:
    """Right-angled triangulation of a rectangle.

    Every cell is split along its lower-left to upper-right diagonal, which
    gives ``2 nx ny`` counter-clockwise triangles. The mesh size is the
    larger cell side length.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidInputError(f"cell counts must be positive integers, got ({nx}, {ny})")
    (x0, y0), (x1, y1) = bbox
    if not (x1 - x0 > 0.0 and y1 - y0 > 0.0):
        raise InvalidInputError(f"degenerate bounding box {bbox}")
    nx, ny = int(nx), int(ny)

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    h = max((x1 - x0) / nx, (y1 - y0) / ny)
    return BackgroundMesh(
        vertices=vertices,
        triangles=triangles,
        h=float(h),
        bbox=((float(x0), float(y0)), (float(x1), float(y1))),
        shape=(nx, ny),
    )


def build_facets(mesh: BackgroundMesh) -> FacetTable:
    tris = np.asarray(mesh.triangles)
    nt = len(tris)
    # local edge i is opposite local vertex i
    local = np.array([[1, 2], [2, 0], [0, 1]])
    edges = tris[:, local].reshape(-1, 2)
    owners = np.repeat(np.arange(nt), 3)
    slots = np.tile(np.arange(3), nt)
    keys = np.sort(edges, axis=1)

    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        bad = uniq[counts > 2][0]
        raise TopologyError(f"edge {tuple(bad)} is shared by more than two triangles")

    nf = len(uniq)
    adj = np.full((nf, 2), -1, dtype=np.int64)
    order = np.lexsort((owners, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    adj[inverse[order][first], 0] = owners[order][first]
    adj[inverse[order][~first], 1] = owners[order][~first]

    element_facets = np.empty((nt, 3), dtype=np.int64)
    element_facets[owners, slots] = inverse

    xv = mesh.vertices
    tangent = xv[uniq[:, 1]] - xv[uniq[:, 0]]
    lengths = np.linalg.norm(tangent, axis=1)
    normals = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / lengths[:, None]
    # orient out of the plus (lower-index) element
    centroid = xv[tris[adj[:, 0]]].mean(axis=1)
    midpoint = 0.5 * (xv[uniq[:, 0]] + xv[uniq[:, 1]])
    flip = np.einsum("ij,ij->i", normals, midpoint - centroid) < 0.0
    normals[flip] *= -1.0

    return FacetTable(
        vertices=uniq,
        elements=adj,
        normals=normals,
        lengths=lengths,
        element_facets=element_facets,
    )


def write_vtk(path, mesh: BackgroundMesh, cells=None, cell_data=None, point_data=None) -> Path:
    """Legacy ASCII VTK unstructured grid of (a subset of) the triangles."""
    path = Path(path)
    cells = np.arange(mesh.n_triangles) if cells is None else np.asarray(cells)
    tris = mesh.triangles[cells]
    lines = [
        "# vtk DataFile Version 3.0",
        "cutoseen background mesh",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_vertices} double",
    ]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {len(tris)} {4 * len(tris)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in tris]
    lines.append(f"CELL_TYPES {len(tris)}")
    lines += ["5"] * len(tris)
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        lines += _vtk_arrays(point_data)
    if cell_data:
        lines.append(f"CELL_DATA {len(tris)}")
        lines += _vtk_arrays({k: np.asarray(v)[cells] for k, v in cell_data.items()})
    path.write_text("\n".join(lines) + "\n")
    return path


def _vtk_arrays(data: dict) -> list[str]:
    out = []
    for name, values in data.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [f"{v:.17g}" for v in values]
        else:
            vec = np.zeros((len(values), 3))
            vec[:, : values.shape[1]] = values
            out.append(f"VECTORS {name} double")
            out += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in vec]
    return out
