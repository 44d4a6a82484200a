"""Reference elements, quadrature, and the mixed velocity/pressure spaces.

Local basis functions are written in barycentric coordinates
``(l0, l1, l2)`` of the reference triangle (0,0), (1,0), (0,1), with
``l1 = xi`` and ``l2 = eta``.  Gradients are returned with respect to the
reference coordinates ``(xi, eta)``.

Velocity coefficient vectors store all x-components first, then all
y-components: dof ``c * n_scalar + i`` is component ``c`` of scalar node ``i``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh import Mesh

# d(lambda_i)/d(xi, eta)
_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


class ElementFamily(enum.Enum):
    P1 = ("P1", 1, 1, 0, 0)
    P2 = ("P2", 2, 1, 1, 0)
    BUBBLE = ("Bubble", 3, 0, 0, 1)
    MINI_VELOCITY = ("MINI_velocity", 3, 1, 0, 1)

    def __init__(self, label, degree, per_vertex, per_edge, per_cell):
        self.label = label
        self.polynomial_degree = degree
        self.dofs_per_vertex = per_vertex
        self.dofs_per_edge = per_edge
        self.dofs_per_cell = per_cell

    @property
    def n_local(self) -> int:
        return 3 * self.dofs_per_vertex + 3 * self.dofs_per_edge + self.dofs_per_cell


class Pair(enum.Enum):
    TAYLOR_HOOD = "taylor-hood"
    MINI = "mini"
    P1P1 = "p1p1"  # equal order, not inf-sup stable; diagnostics only

    @classmethod
    def parse(cls, name) -> "Pair":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"th": "taylor-hood", "taylorhood": "taylor-hood", "p2p1": "taylor-hood",
                   "p1-p1": "p1p1", "equal-order": "p1p1"}
        key = aliases.get(key, key)
        for p in cls:
            if p.value == key:
                return p
        raise ValueError(f"unknown element pair {name!r}; expected one of {[p.value for p in cls]}")

    @property
    def velocity_family(self) -> ElementFamily:
        return {Pair.TAYLOR_HOOD: ElementFamily.P2, Pair.MINI: ElementFamily.MINI_VELOCITY,
                Pair.P1P1: ElementFamily.P1}[self]

    @property
    def velocity_order(self) -> int:
        """Approximation order k of the velocity gradient."""
        return 2 if self is Pair.TAYLOR_HOOD else 1

    @property
    def default_quadrature_degree(self) -> int:
        # TH: trilinear term 2+1+2; MINI: bubble mass 6, convection 3+2+3
        return {Pair.TAYLOR_HOOD: 5, Pair.MINI: 8, Pair.P1P1: 3}[self]


def _check_point(bary):
    b = np.asarray(bary, dtype=float)
    if b.shape[-1] != 3:
        raise ValueError("barycentric point must have three coordinates")
    tol = 1e-12
    if np.any(b < -tol) or np.any(np.abs(b.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"point {b.tolist()} is outside the reference triangle")
    return b


def _basis(family: ElementFamily, lam):
    """Values (..., nloc) and reference gradients (..., nloc, 2) at points `lam`."""
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    shape = lam.shape[:-1]
    if family is ElementFamily.P1:
        vals = lam.copy()
        grads = np.broadcast_to(_DL, shape + (3, 2)).copy()
        return vals, grads
    if family is ElementFamily.P2:
        vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                         4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1], axis=-1)
        dl = _DL
        g = [(4 * l0 - 1)[..., None] * dl[0], (4 * l1 - 1)[..., None] * dl[1], (4 * l2 - 1)[..., None] * dl[2],
             4 * (l1[..., None] * dl[2] + l2[..., None] * dl[1]),
             4 * (l2[..., None] * dl[0] + l0[..., None] * dl[2]),
             4 * (l0[..., None] * dl[1] + l1[..., None] * dl[0])]
        return vals, np.stack(g, axis=-2)
    bubble = 27 * l0 * l1 * l2
    dbubble = 27 * (l1 * l2)[..., None] * _DL[0] + 27 * (l2 * l0)[..., None] * _DL[1] \
        + 27 * (l0 * l1)[..., None] * _DL[2]
    if family is ElementFamily.BUBBLE:
        return bubble[..., None], dbubble[..., None, :]
    vals = np.concatenate([lam, bubble[..., None]], axis=-1)
    grads = np.concatenate([np.broadcast_to(_DL, shape + (3, 2)), dbubble[..., None, :]], axis=-2)
    return vals, grads


def reference_basis_eval(family: ElementFamily, point):
    """Evaluate all local basis functions of `family` at a barycentric point."""
    lam = _check_point(point)
    return _basis(family, lam)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sum 1/2
    exact_degree: int


def _duffy_rule(degree):
    ns = math.ceil((degree + 2) / 2)
    nt = math.ceil((degree + 1) / 2)
    xs, ws = np.polynomial.legendre.leggauss(ns)
    xt, wt = np.polynomial.legendre.leggauss(nt)
    s, ws = 0.5 * (xs + 1), 0.5 * ws
    t, wt = 0.5 * (xt + 1), 0.5 * wt
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws * (1 - s), wt)
    xi = S.ravel()
    eta = (T * (1 - S)).ravel()
    pts = np.column_stack([1 - xi - eta, xi, eta])
    return pts, W.ravel()


MAX_QUADRATURE_DEGREE = 10


@lru_cache(maxsize=None)
def quadrature_rule(exact_degree: int) -> QuadratureRule:
    """Positive-weight rule on the reference triangle exact to `exact_degree`.

    Degrees 1, 2 and 5 use the classical centroid, 3-point and 7-point rules;
    the others use a collapsed Gauss-Legendre product rule.
    """
    if int(exact_degree) != exact_degree or not 1 <= exact_degree <= MAX_QUADRATURE_DEGREE:
        raise ValueError(f"unsupported quadrature degree {exact_degree!r} "
                         f"(supported: 1..{MAX_QUADRATURE_DEGREE})")
    d = int(exact_degree)
    if d == 1:
        pts = np.array([[1 / 3, 1 / 3, 1 / 3]])
        w = np.array([0.5])
    elif d == 2:
        a, b = 2 / 3, 1 / 6
        pts = np.array([[a, b, b], [b, a, b], [b, b, a]])
        w = np.full(3, 1 / 6)
    elif d == 5:
        r15 = math.sqrt(15)
        a1, a2 = (6 - r15) / 21, (6 + r15) / 21
        w1, w2 = (155 - r15) / 2400, (155 + r15) / 2400
        pts = [[1 / 3, 1 / 3, 1 / 3]]
        w = [9 / 80]
        for a, wi in ((a1, w1), (a2, w2)):
            b = 1 - 2 * a
            pts += [[b, a, a], [a, b, a], [a, a, b]]
            w += [wi] * 3
        pts, w = np.array(pts), np.array(w)
    else:
        pts, w = _duffy_rule(d)
    pts.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(pts, w, d)


@dataclass(frozen=True, eq=False)
class Geometry:
    """Affine maps of all triangles."""

    detJ: np.ndarray   # (nt,)
    invJ: np.ndarray   # (nt, 2, 2), maps reference gradients to physical ones
    origin: np.ndarray  # (nt, 2)
    J: np.ndarray

    @classmethod
    def of(cls, mesh: Mesh) -> "Geometry":
        p = mesh.vertices[mesh.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns d/dxi, d/deta
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / det
        inv[:, 1, 1] = J[:, 0, 0] / det
        inv[:, 0, 1] = -J[:, 0, 1] / det
        inv[:, 1, 0] = -J[:, 1, 0] / det
        return cls(det, inv, p[:, 0].copy(), J)

    def map_points(self, bary):
        """Physical coordinates (nt, nq, 2) of barycentric reference points."""
        ref = np.asarray(bary)[:, 1:]
        return self.origin[:, None, :] + np.einsum("tij,qj->tqi", self.J, ref)

    def physical_gradients(self, ref_grads):
        """(nq, nloc, 2) reference gradients -> (nt, nq, nloc, 2) physical."""
        return np.einsum("qlj,tjk->tqlk", ref_grads, self.invJ)


class FESpacePair:
    """Velocity space X_h (vector valued) and pressure space Q_h on a mesh.

    Attributes
    ----------
    vel_cells : (nt, nloc_u) global scalar velocity node of each local basis function
    pres_cells : (nt, 3) global pressure dof of each local P1 basis function
    dirichlet_dofs : sorted velocity dofs (both components) located on the boundary
    """

    def __init__(self, mesh: Mesh, pair):
        self.mesh = mesh
        self.pair = Pair.parse(pair)
        self.velocity_family = self.pair.velocity_family
        self.pressure_family = ElementFamily.P1
        nv, ne, nt = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        tri = mesh.triangles
        bverts = mesh.boundary_vertices()
        if self.velocity_family is ElementFamily.P2:
            self.vel_cells = np.hstack([tri, nv + mesh.triangle_edges])
            self.n_scalar = nv + ne
            boundary_nodes = np.concatenate([bverts, nv + mesh.boundary_edge_ids()])
            edges = mesh.edges
            self.scalar_nodes = np.vstack([
                mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])
        elif self.velocity_family is ElementFamily.MINI_VELOCITY:
            self.vel_cells = np.hstack([tri, nv + np.arange(nt)[:, None]])
            self.n_scalar = nv + nt
            boundary_nodes = bverts
            self.scalar_nodes = np.vstack([mesh.vertices, mesh.vertices[tri].mean(axis=1)])
        else:
            self.vel_cells = tri.copy()
            self.n_scalar = nv
            boundary_nodes = bverts
            self.scalar_nodes = mesh.vertices.copy()
        self.pres_cells = tri.copy()
        self.n_vel_dofs = 2 * self.n_scalar
        self.n_pres_dofs = nv
        boundary_nodes = np.unique(boundary_nodes)
        self.boundary_scalar_nodes = boundary_nodes
        self.dirichlet_dofs = np.concatenate([boundary_nodes, boundary_nodes + self.n_scalar])
        self.free_dofs = np.setdiff1d(np.arange(self.n_vel_dofs), self.dirichlet_dofs)
        self.geometry = Geometry.of(mesh)
        for a in (self.vel_cells, self.pres_cells, self.dirichlet_dofs, self.free_dofs):
            a.setflags(write=False)

    def __repr__(self):
        return (f"FESpacePair({self.pair.value}, n_vel_dofs={self.n_vel_dofs}, "
                f"n_pres_dofs={self.n_pres_dofs})")

    @property
    def n_free_vel(self) -> int:
        return len(self.free_dofs)

    def tabulate(self, which: str, rule: QuadratureRule):
        """Reference values (nq, nloc) and physical gradients (nt, nq, nloc, 2)."""
        fam = self.velocity_family if which == "velocity" else self.pressure_family
        vals, grads = _basis(fam, np.asarray(rule.points))
        return vals, self.geometry.physical_gradients(grads)

    def evaluate(self, coeffs, which: str, rule: QuadratureRule):
        """Values and gradients of a finite element function at quadrature points.

        Returns arrays shaped (nt, nq, ncomp) and (nt, nq, ncomp, 2); ncomp is 2
        for velocity and 1 for pressure.
        """
        coeffs = np.asarray(coeffs, dtype=float)
        vals, grads = self.tabulate(which, rule)
        if which == "velocity":
            if coeffs.shape != (self.n_vel_dofs,):
                raise ValueError(f"expected {self.n_vel_dofs} velocity coefficients, got {coeffs.shape}")
            local = coeffs.reshape(2, self.n_scalar)[:, self.vel_cells]  # (2, nt, nloc)
        else:
            if coeffs.shape != (self.n_pres_dofs,):
                raise ValueError(f"expected {self.n_pres_dofs} pressure coefficients, got {coeffs.shape}")
            local = coeffs[self.pres_cells][None]
        v = np.einsum("ql,ctl->tqc", vals, local)
        g = np.einsum("tqlk,ctl->tqck", grads, local)
        return v, g

    def quadrature_points(self, rule: QuadratureRule):
        """Physical points (nt, nq, 2) and weights (nt, nq) including |det J|."""
        return self.geometry.map_points(rule.points), np.abs(self.geometry.detJ)[:, None] * rule.weights


def build_space(mesh: Mesh, pair) -> FESpacePair:
    return FESpacePair(mesh, pair)


def interpolate(space: FESpacePair, field, t: float = 0.0, which: str = "velocity"):
    """Nodal (Lagrange) interpolant coefficients of ``field(x, y, t)``.

    For velocity, `field` returns a pair of component arrays; for pressure, one
    array.  The MINI bubble coefficient makes the interpolant exact at the
    triangle centroid.
    """
    if which == "pressure":
        x = space.mesh.vertices
        return np.asarray(field(x[:, 0], x[:, 1], t), dtype=float) * np.ones(len(x))
    nodes = space.scalar_nodes
    vals = np.asarray(field(nodes[:, 0], nodes[:, 1], t), dtype=float)
    vals = np.broadcast_to(vals, (2, len(nodes))).copy()
    if space.velocity_family is ElementFamily.MINI_VELOCITY:
        nv = space.mesh.n_vertices
        linear_at_centroid = vals[:, space.mesh.triangles].mean(axis=2)
        vals[:, nv:] -= linear_at_centroid
    return vals.reshape(-1)
