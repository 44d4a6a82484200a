"""Conforming triangular meshes of polygonal domains.

Meshes are immutable: coordinate and connectivity arrays are marked
read-only after validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DIRICHLET = 1


class MeshError(ValueError):
    """A mesh violates one of the structural invariants."""


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""


@dataclass(frozen=True)
class MeshMetrics:
    h_max: float
    h_min: float
    quasi_uniformity_ratio: float
    min_angle_deg: float


def _freeze(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulation with counterclockwise triangles and marked boundary edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, 0-based vertex indices
    boundary_edges : (nb, 2) int array
    boundary_markers : (nb,) int array
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _freeze(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _freeze(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _freeze(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_markers", _freeze(self.boundary_markers, np.int64).reshape(-1))
        validate(self)
        edges, tri_edges = _edge_table(self.triangles)
        object.__setattr__(self, "_edges", _freeze(edges, np.int64))
        object.__setattr__(self, "_tri_edges", _freeze(tri_edges, np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted (min, max) pairs, in lexicographic order."""
        return self._edges

    @property
    def triangle_edges(self) -> np.ndarray:
        """(nt, 3) edge indices; local edge i is opposite local vertex i."""
        return self._tri_edges

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def h_max(self) -> float:
        return float(_diameters(self).max())

    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def boundary_edge_ids(self) -> np.ndarray:
        """Indices into `edges` of the boundary edges."""
        be = np.sort(self.boundary_edges, axis=1)
        return _lookup_edges(self._edges, be)

    def __repr__(self):
        return f"Mesh({self.n_vertices} vertices, {self.n_triangles} triangles)"


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_table(triangles):
    # local edge i joins the two vertices other than i
    local = np.array([[1, 2], [2, 0], [0, 1]])
    all_edges = np.sort(triangles[:, local].reshape(-1, 2), axis=1)
    edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _lookup_edges(edges, pairs):
    nv = int(edges.max()) + 1 if len(edges) else 1
    keys = edges[:, 0] * nv + edges[:, 1]
    q = pairs[:, 0] * nv + pairs[:, 1]
    idx = np.searchsorted(keys, q)
    idx = np.clip(idx, 0, len(keys) - 1)
    if not np.array_equal(keys[idx], q):
        raise MeshError("boundary edge is not an edge of any triangle")
    return idx


def _diameters(mesh):
    p = mesh.vertices[mesh.triangles]
    lengths = np.stack(
        [np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
         np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
         np.linalg.norm(p[:, 0] - p[:, 1], axis=1)], axis=1)
    return lengths.max(axis=1)


def validate(mesh: Mesh) -> None:
    """Raise MeshError unless `mesh` satisfies every structural invariant."""
    nv = len(mesh.vertices)
    tri = mesh.triangles
    be = mesh.boundary_edges
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshError("vertex coordinates must be finite")
    for k, t in enumerate(tri):
        if t.min() < 0 or t.max() >= nv:
            raise MeshError(f"triangle {k} references vertex index out of range: {t.tolist()}")
        if len(set(t.tolist())) != 3:
            raise MeshError(f"triangle {k} has repeated vertices: {t.tolist()}")
    for k, e in enumerate(be):
        if e.min() < 0 or e.max() >= nv:
            raise MeshError(f"boundary edge {k} references vertex index out of range: {e.tolist()}")
    if len(mesh.boundary_markers) != len(be):
        raise MeshError("one marker is required per boundary edge")
    areas = _signed_areas(mesh.vertices, tri)
    bad = np.flatnonzero(areas <= 0)
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has non-positive signed area {areas[bad[0]]:.3e}")

    local = np.array([[1, 2], [2, 0], [0, 1]])
    all_edges = np.sort(tri[:, local].reshape(-1, 2), axis=1)
    edges, counts = np.unique(all_edges, axis=0, return_counts=True)
    over = np.flatnonzero(counts > 2)
    if len(over):
        e = edges[over[0]]
        raise MeshError(f"conformity violated: edge ({e[0]}, {e[1]}) is shared by {counts[over[0]]} triangles")
    # a directed edge appearing twice means two triangles overlap with the same orientation
    directed = tri[:, local].reshape(-1, 2)
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    if np.any(dcounts > 1):
        raise MeshError("conformity violated: inconsistent triangle orientation across an edge")

    exposed = {tuple(e) for e in edges[counts == 1].tolist()}
    declared = [tuple(sorted(e)) for e in be.tolist()]
    if len(set(declared)) != len(declared):
        raise MeshError("duplicate boundary edge")
    declared_set = set(declared)
    if declared_set != exposed:
        missing = sorted(exposed - declared_set)
        extra = sorted(declared_set - exposed)
        if missing:
            raise MeshError(f"edge {missing[0]} lies on the boundary but is not listed in boundary_edges")
        raise MeshError(f"boundary edge {extra[0]} is interior or not an edge of any triangle")
    # closed loops: every boundary vertex has even degree in the boundary graph
    deg = np.bincount(be.reshape(-1), minlength=nv)
    odd = np.flatnonzero(deg % 2)
    if len(odd):
        raise MeshError(f"boundary edges do not form closed loops at vertex {int(odd[0])}")


def generate_structured_square(n: int) -> Mesh:
    """Uniform n-by-n mesh of the unit square.

    Every cell is split along its bottom-left to top-right diagonal.
    Vertex (i, j) sits at (i/n, j/n) and has index j*(n+1) + i.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    x = np.arange(n + 1) / n
    X, Y = np.meshgrid(x, x)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    k = np.arange(n)
    bottom = np.column_stack([k, k + 1])
    right = np.column_stack([k * (n + 1) + n, (k + 1) * (n + 1) + n])
    top = np.column_stack([n * (n + 1) + k + 1, n * (n + 1) + k])
    left = np.column_stack([(k + 1) * (n + 1), k * (n + 1)])
    boundary = np.vstack([bottom, right, top, left])
    return Mesh(vertices, triangles, boundary, np.full(len(boundary), DIRICHLET))


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children through edge midpoints.

    New vertex for edge k gets index ``n_vertices + k``.
    """
    nv = mesh.n_vertices
    edges = mesh.edges
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])

    t = mesh.triangles
    m = nv + mesh.triangle_edges  # m[:, i] is the midpoint opposite vertex i
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mbc, mca, mab = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mab, mbc, mca]),
    ], axis=1).reshape(-1, 3)

    eid = mesh.boundary_edge_ids()
    be = mesh.boundary_edges
    bm = nv + eid
    boundary = np.stack([np.column_stack([be[:, 0], bm]),
                         np.column_stack([bm, be[:, 1]])], axis=1).reshape(-1, 2)
    markers = np.repeat(mesh.boundary_markers, 2)
    return Mesh(vertices, children, boundary, markers)


def mesh_metrics(mesh: Mesh) -> MeshMetrics:
    diam = _diameters(mesh)
    p = mesh.vertices[mesh.triangles]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cosang = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    h_max, h_min = float(diam.max()), float(diam.min())
    return MeshMetrics(h_max, h_min, h_max / h_min, float(np.min(angles)))


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(f"boundary_edges {len(mesh.boundary_edges)}")
    lines += [f"{i} {j} {m}" for (i, j), m in zip(mesh.boundary_edges.tolist(), mesh.boundary_markers.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    text = Path(path).read_text().splitlines()
    pos = 0

    def header(name):
        nonlocal pos
        while pos < len(text) and not text[pos].strip():
            pos += 1
        if pos >= len(text):
            raise MeshFormatError(f"line {pos + 1}: expected '{name} <count>', found end of file")
        parts = text[pos].split()
        if len(parts) != 2 or parts[0] != name or not parts[1].isdigit():
            raise MeshFormatError(f"line {pos + 1}: expected '{name} <count>', found {text[pos]!r}")
        pos += 1
        return int(parts[1])

    def rows(count, width, conv, what):
        nonlocal pos
        out = []
        for _ in range(count):
            if pos >= len(text):
                raise MeshFormatError(f"line {pos + 1}: unexpected end of file in {what} section")
            parts = text[pos].split()
            if len(parts) != width:
                raise MeshFormatError(f"line {pos + 1}: expected {width} fields in {what} section, got {len(parts)}")
            try:
                out.append([conv(s) for s in parts])
            except ValueError:
                raise MeshFormatError(f"line {pos + 1}: cannot parse {what} entry {text[pos]!r}") from None
            pos += 1
        return out

    verts = rows(header("vertices"), 2, float, "vertices")
    tris = rows(header("triangles"), 3, int, "triangles")
    bnd = rows(header("boundary_edges"), 3, int, "boundary_edges")
    while pos < len(text):
        if text[pos].strip():
            raise MeshFormatError(f"line {pos + 1}: unexpected trailing content {text[pos]!r}")
        pos += 1
    bnd = np.array(bnd, dtype=np.int64).reshape(-1, 3)
    return Mesh(np.array(verts).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3),
                bnd[:, :2], bnd[:, 2])
