"""Global finite element operators for the mixed Navier-Stokes discretization.

Sign convention: the momentum equation is tested as
``(d_t u, v) + b(w, u, v) + nu (grad u, grad v) - (p, div v) = (f, v)``,
so with ``B[i, j] = (q_i, div phi_j)`` the saddle-point block reads
``[[K, -B^T], [-B, 0]]`` (symmetric whenever K is).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .elements import FESpacePair, QuadratureRule, quadrature_rule


def _rule(space: FESpacePair, rule):
    if rule is None:
        return quadrature_rule(space.pair.default_quadrature_degree)
    if isinstance(rule, QuadratureRule):
        return rule
    return quadrature_rule(int(rule))


def _scatter(rows, cols, data, shape):
    m = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _pairs(cells_r, cells_c):
    r = np.broadcast_to(cells_r[:, :, None], (len(cells_r), cells_r.shape[1], cells_c.shape[1]))
    c = np.broadcast_to(cells_c[:, None, :], r.shape)
    return r, c


def _vector_block(space, local):
    """Assemble the same scalar local matrix on both velocity components."""
    ns = space.n_scalar
    r, c = _pairs(space.vel_cells, space.vel_cells)
    rows = np.concatenate([r.ravel(), r.ravel() + ns])
    cols = np.concatenate([c.ravel(), c.ravel() + ns])
    data = np.concatenate([local.ravel(), local.ravel()])
    return _scatter(rows, cols, data, (2 * ns, 2 * ns))


def assemble_gram(space: FESpacePair, form: str, which: str, rule=None) -> sp.csr_matrix:
    """Mass (``form='mass'``) or stiffness (``form='stiffness'``) matrix.

    For velocity the matrix acts on both components (block diagonal).
    """
    rule = _rule(space, rule)
    if form not in ("mass", "stiffness"):
        raise ValueError(f"unknown form {form!r}")
    if which not in ("velocity", "pressure"):
        raise ValueError(f"unknown space {which!r}")
    vals, grads = space.tabulate(which, rule)
    W = np.abs(space.geometry.detJ)[:, None] * rule.weights  # (nt, nq)
    if form == "mass":
        local = np.einsum("tq,qi,qj->tij", W, vals, vals)
    else:
        g = grads.transpose(0, 2, 1, 3).reshape(len(W), grads.shape[2], -1)  # (nt, nloc, nq*2)
        gw = (grads * W[:, :, None, None]).transpose(0, 2, 1, 3).reshape(g.shape)
        local = np.matmul(g, gw.transpose(0, 2, 1))
    if which == "velocity":
        return _vector_block(space, local)
    r, c = _pairs(space.pres_cells, space.pres_cells)
    n = space.n_pres_dofs
    return _scatter(r, c, local, (n, n))


def assemble_divergence(space: FESpacePair, rule=None) -> sp.csr_matrix:
    """B[i, j] = (q_i, div phi_j), shape (n_pres, n_vel)."""
    rule = _rule(space, rule)
    qv, _ = space.tabulate("pressure", rule)
    _, ug = space.tabulate("velocity", rule)
    W = np.abs(space.geometry.detJ)[:, None] * rule.weights
    ns = space.n_scalar
    r, c = _pairs(space.pres_cells, space.vel_cells)
    rows, cols, data = [], [], []
    for comp in range(2):
        local = np.einsum("tq,qi,tqj->tij", W, qv, ug[..., comp])
        rows.append(r.ravel())
        cols.append(c.ravel() + comp * ns)
        data.append(local.ravel())
    return _scatter(np.concatenate(rows), np.concatenate(cols), np.concatenate(data),
                    (space.n_pres_dofs, space.n_vel_dofs))


def assemble_convection(space: FESpacePair, w, rule=None) -> sp.csr_matrix:
    """N(w)[i, j] = b(w, phi_j, phi_i) with the skew form
    ``b(u, v, z) = (u.grad v, z)/2 - (u.grad z, v)/2``.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (space.n_vel_dofs,):
        raise ValueError(f"convecting field has length {w.shape}, expected ({space.n_vel_dofs},)")
    rule = _rule(space, rule)
    vals, grads = space.tabulate("velocity", rule)
    W = np.abs(space.geometry.detJ)[:, None] * rule.weights
    wl = w.reshape(2, space.n_scalar)[:, space.vel_cells]
    wq = np.einsum("ql,ctl->tqc", vals, wl)
    adv = np.einsum("tqc,tqlc->tql", wq, grads)  # w . grad(phi_l)
    half = 0.5 * np.matmul(vals.T, W[:, :, None] * adv)
    local = half - half.transpose(0, 2, 1)
    return _vector_block(space, local)


def assemble_load(space: FESpacePair, f, t: float, rule=None) -> np.ndarray:
    """Entries (f(., t), phi_i) for a vector forcing ``f(x, y, t) -> (fx, fy)``."""
    rule = _rule(space, rule)
    x, W = space.quadrature_points(rule)
    fv = np.asarray(f(x[..., 0], x[..., 1], t), dtype=float)
    fv = np.broadcast_to(fv, (2,) + W.shape)
    vals, _ = space.tabulate("velocity", rule)
    ns = space.n_scalar
    out = np.zeros(space.n_vel_dofs)
    for comp in range(2):
        local = np.einsum("tq,tq,ql->tl", W, fv[comp], vals)
        out[comp * ns:(comp + 1) * ns] = np.bincount(space.vel_cells.ravel(), local.ravel(), minlength=ns)
    return out


def assemble_pressure_mean(space: FESpacePair, rule=None) -> np.ndarray:
    """Entries (1, q_i)."""
    rule = _rule(space, rule)
    qv, _ = space.tabulate("pressure", rule)
    W = np.abs(space.geometry.detJ)[:, None] * rule.weights
    local = np.einsum("tq,ql->tl", W, qv)
    return np.bincount(space.pres_cells.ravel(), local.ravel(), minlength=space.n_pres_dofs)


@dataclass(eq=False)
class AssembledSystem:
    """All operators of the scheme except convection, which depends on the state."""

    space: FESpacePair
    rule: QuadratureRule
    A_visc: sp.csr_matrix
    M_vel: sp.csr_matrix
    B_div: sp.csr_matrix
    M_pres: sp.csr_matrix
    mean_vec: np.ndarray

    def N_conv(self, w) -> sp.csr_matrix:
        return assemble_convection(self.space, w, self.rule)

    def load(self, f, t) -> np.ndarray:
        return assemble_load(self.space, f, t, self.rule)


def assemble_system(space: FESpacePair, rule=None) -> AssembledSystem:
    rule = _rule(space, rule)
    return AssembledSystem(
        space=space,
        rule=rule,
        A_visc=assemble_gram(space, "stiffness", "velocity", rule),
        M_vel=assemble_gram(space, "mass", "velocity", rule),
        B_div=assemble_divergence(space, rule),
        M_pres=assemble_gram(space, "mass", "pressure", rule),
        mean_vec=assemble_pressure_mean(space, rule),
    )


def constrain_symmetric(mat, dirichlet_dofs) -> sp.csr_matrix:
    """Zero Dirichlet rows and columns, put 1 on their diagonal."""
    n = mat.shape[0]
    keep = np.ones(n)
    keep[dirichlet_dofs] = 0.0
    D = sp.diags(keep)
    out = (D @ mat @ D + sp.diags(1.0 - keep)).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def constrain_columns(B, dirichlet_dofs) -> sp.csr_matrix:
    keep = np.ones(B.shape[1])
    keep[dirichlet_dofs] = 0.0
    out = (B @ sp.diags(keep)).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


class ConstrainedSaddle:
    """Symmetric Dirichlet elimination plus a zero-mean multiplier for pressure.

    Unknown layout: ``[u (n_vel), p (n_pres), lambda (1)]``.  The matrix is

        [[K_c,   -B_c^T, 0],
         [-B_c,   0,     m],
         [0,      m^T,   0]]

    where ``K_c`` and ``B_c`` have Dirichlet rows/columns removed.
    """

    def __init__(self, K, B, mean_vec, dirichlet_dofs):
        self.n_vel = K.shape[0]
        self.n_pres = B.shape[0]
        self.dirichlet_dofs = np.asarray(dirichlet_dofs)
        Kc = constrain_symmetric(K, self.dirichlet_dofs)
        Bc = constrain_columns(B, self.dirichlet_dofs)
        m = sp.csr_matrix(np.asarray(mean_vec).reshape(-1, 1))
        self.matrix = sp.bmat([[Kc, -Bc.T, None], [-Bc, None, m], [None, m.T, None]], format="csr")
        self.matrix.sort_indices()

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def rhs(self, F_u, g_p=None) -> np.ndarray:
        b = np.zeros(self.size)
        b[:self.n_vel] = F_u
        b[self.dirichlet_dofs] = 0.0
        if g_p is not None:
            b[self.n_vel:self.n_vel + self.n_pres] = g_p
        return b

    def split(self, x):
        return x[:self.n_vel], x[self.n_vel:self.n_vel + self.n_pres], x[-1]


def apply_constraints(system: AssembledSystem, dirichlet_dofs=None, K=None) -> ConstrainedSaddle:
    """Constrained saddle operator with velocity block `K` (default: stiffness)."""
    if dirichlet_dofs is None:
        dirichlet_dofs = system.space.dirichlet_dofs
    if K is None:
        K = system.A_visc
    return ConstrainedSaddle(K, system.B_div, system.mean_vec, dirichlet_dofs)


def dump_matrix(mat, path) -> None:
    """Write `mat` as 0-based ``row col value`` lines."""
    coo = sp.coo_matrix(mat)
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{r} {c} {v!r}" for r, c, v in zip(coo.row[order].tolist(), coo.col[order].tolist(), coo.data[order].tolist())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
