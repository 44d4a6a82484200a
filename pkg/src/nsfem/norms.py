"""Norms, discrete dual norms, and the discrete stability constants.

The dual norms are exact discrete suprema computed through Riesz
representers in the ``(grad u, grad v)`` inner product:

    ||w||_{X_h*}^2 = w^T A^{-1} w
    ||w||_{V_h*}^2 = w^T z,   A z - B^T mu = w,  B z = 0

where ``w`` holds the pairings ``(w, phi_i)`` on the free velocity dofs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import AssembledSystem, apply_constraints, assemble_gram, assemble_load, constrain_symmetric
from .elements import FESpacePair, quadrature_rule
from .sparse_linalg import check_cap, factorize, nullspace_basis, sym_generalized_eigs

ERROR_QUADRATURE_DEGREE = 7


def norm(system: AssembledSystem, coeffs, kind: str = "L2", which: str = "velocity") -> float:
    """sqrt(x^T G x) with G the mass (``L2``) or stiffness (``H1semi``) Gram matrix."""
    coeffs = np.asarray(coeffs, dtype=float)
    space = system.space
    n = space.n_vel_dofs if which == "velocity" else space.n_pres_dofs
    if coeffs.shape != (n,):
        raise ValueError(f"expected {n} {which} coefficients, got shape {coeffs.shape}")
    if which == "velocity":
        G = {"L2": system.M_vel, "H1semi": system.A_visc}.get(kind)
    elif which == "pressure":
        if kind == "H1semi":
            G = assemble_gram(space, "stiffness", "pressure", system.rule)
        else:
            G = system.M_pres if kind == "L2" else None
    else:
        raise ValueError(f"unknown space {which!r}")
    if G is None:
        raise ValueError(f"unknown norm kind {kind!r}")
    return float(np.sqrt(max(coeffs @ (G @ coeffs), 0.0)))


class DualNormContext:
    """Factorized operators for the discrete dual norms on X_h and V_h."""

    def __init__(self, system: AssembledSystem):
        self.system = system
        self.space = system.space
        self.dirichlet = system.space.dirichlet_dofs
        self.A = constrain_symmetric(system.A_visc, self.dirichlet)
        self.A_factor = factorize(self.A)
        self.stokes = apply_constraints(system)
        self._stokes_factor = None

    @property
    def stokes_factor(self):
        # lazy: the Stokes saddle is singular for pairs that fail inf-sup
        if self._stokes_factor is None:
            self._stokes_factor = factorize(self.stokes.matrix)
        return self._stokes_factor

    def _restrict(self, w_vec):
        w = np.array(w_vec, dtype=float)
        if w.shape != (self.space.n_vel_dofs,):
            raise ValueError(f"functional has shape {w.shape}, expected ({self.space.n_vel_dofs},)")
        w[self.dirichlet] = 0.0
        return w

    def riesz_Xh(self, w_vec):
        return self.A_factor.solve(self._restrict(w_vec))

    def riesz_Vh(self, w_vec):
        x = self.stokes_factor.solve(self.stokes.rhs(self._restrict(w_vec)))
        return self.stokes.split(x)[0]

    def dual_norm_Xh(self, w_vec) -> float:
        w = self._restrict(w_vec)
        return float(np.sqrt(max(w @ self.A_factor.solve(w), 0.0)))

    def dual_norm_Vh(self, w_vec) -> float:
        w = self._restrict(w_vec)
        return float(np.sqrt(max(w @ self.riesz_Vh(w), 0.0)))

    def pairing(self, u_coeffs):
        """Functional vector v -> (u_h, v) of a velocity field, restricted to X_h."""
        return self._restrict(self.system.M_vel @ np.asarray(u_coeffs, dtype=float))


def dual_norm_Xh(ctx: DualNormContext, w_vec) -> float:
    return ctx.dual_norm_Xh(w_vec)


def dual_norm_Vh(ctx: DualNormContext, w_vec) -> float:
    return ctx.dual_norm_Vh(w_vec)


def triple_bar(series, dt: float, p) -> float:
    """Discrete-in-time norm of per-step spatial norms.

    ``p=inf`` is the maximum; ``p=2`` is ``sqrt(dt * sum(v_n**2))`` over the
    whole series.
    """
    v = np.asarray(series, dtype=float)
    if v.size == 0:
        raise ValueError("empty series")
    if p in (np.inf, "inf", "infinity"):
        return float(np.max(np.abs(v)))
    if p == 2:
        return float(np.sqrt(dt * np.sum(v ** 2)))
    if p == 1:
        return float(dt * np.sum(np.abs(v)))
    raise ValueError(f"unsupported p={p!r}")


def _zero_mean_basis(mean_vec):
    return sla.null_space(np.asarray(mean_vec, dtype=float)[None, :])


def _schur_pencil(system: AssembledSystem, ctx, cap):
    space = system.space
    check_cap(space.n_pres_dofs - 1, "inf-sup eigenproblem", cap)
    ctx = ctx or DualNormContext(system)
    Bc = (system.B_div.tocsr() @ sp.diags(_free_mask(space))).tocsr()
    S = Bc @ ctx.A_factor.solve(Bc.T.toarray())
    S = 0.5 * (S + S.T)
    Z = _zero_mean_basis(system.mean_vec)
    return Z.T @ S @ Z, Z.T @ system.M_pres.toarray() @ Z, Z


def inf_sup_constant(system: AssembledSystem, ctx: DualNormContext | None = None,
                     return_mode=False, cap=None):
    """Discrete inf-sup constant of the pair.

    Smallest eigenvalue of ``B A^{-1} B^T q = lam M_p q`` over zero-mean
    pressures; alpha = sqrt(lam).  With ``return_mode=True`` the minimizing
    pressure coefficients are returned as well.
    """
    S, M, Z = _schur_pencil(system, ctx, cap)
    res = sym_generalized_eigs(S, M, k=1, which="smallest", cap=cap)
    alpha = float(np.sqrt(max(res.eigenvalues[0], 0.0)))
    if return_mode:
        return alpha, Z @ res.eigenvectors[:, 0]
    return alpha


@dataclass
class InfSupSpectrum:
    alpha: float            # over all zero-mean pressures
    n_spurious: int         # zero-mean pressures q with B^T q = 0
    reduced_alpha: float    # over the complement of the spurious modes


def inf_sup_spectrum(system: AssembledSystem, ctx: DualNormContext | None = None,
                     rel_tol=1e-10, cap=None) -> InfSupSpectrum:
    """Full Schur spectrum, split into spurious (numerically zero) and regular parts.

    For stable pairs ``n_spurious == 0`` and both constants coincide; for
    equal-order pairs the reduced constant shows the h-decay hidden by the
    exact zero modes.
    """
    S, M, _ = _schur_pencil(system, ctx, cap)
    lam = sym_generalized_eigs(S, M, cap=cap).eigenvalues
    zero = lam <= rel_tol * max(lam.max(), 0.0)
    regular = lam[~zero]
    return InfSupSpectrum(float(np.sqrt(max(lam[0], 0.0))), int(zero.sum()),
                          float(np.sqrt(regular[0])) if regular.size else 0.0)


def _free_mask(space):
    mask = np.zeros(space.n_vel_dofs)
    mask[space.free_dofs] = 1.0
    return mask


def divergence_free_basis(system: AssembledSystem, cap=None):
    return nullspace_basis(system.B_div, system.space.free_dofs, cap=cap)


def equivalence_constant(system: AssembledSystem, ctx: DualNormContext | None = None,
                         Z=None, cap=None) -> float:
    """Largest C with ``C ||w||_{X_h*} <= ||w||_{V_h*}`` for every w in V_h."""
    ctx = ctx or DualNormContext(system)
    if Z is None:
        Z = divergence_free_basis(system, cap=cap)
    check_cap(Z.shape[1], "norm-equivalence eigenproblem", cap)
    free = system.space.free_dofs
    MZ = np.asarray(system.M_vel @ Z)
    MZ[system.space.dirichlet_dofs] = 0.0
    S_X = MZ.T @ ctx.A_factor.solve(MZ)
    Zf = Z[free]
    Af = system.A_visc[free][:, free]
    A_Z = Zf.T @ (Af @ Zf)
    G = Z.T @ MZ  # Z^T M Z
    S_V = G @ sla.solve(A_Z, G, assume_a="pos")
    S_X = 0.5 * (S_X + S_X.T)
    S_V = 0.5 * (S_V + S_V.T)
    res = sym_generalized_eigs(S_V, S_X, k=1, which="smallest", cap=cap)
    return float(np.sqrt(max(res.eigenvalues[0], 0.0)))


def _h1_seminorm_exact(space: FESpacePair, grad_u, t, degree=10):
    rule = quadrature_rule(degree)
    x, W = space.quadrature_points(rule)
    g = np.asarray(grad_u(x[..., 0], x[..., 1], t), dtype=float)  # (2, 2, nt, nq)
    return float(np.sqrt(np.sum(W * np.sum(g ** 2, axis=(0, 1)))))


def l2_project_Vh(system: AssembledSystem, u, grad_u, t: float = 0.0, stokes_mass=None):
    """L2-orthogonal projection of ``u(x, y, t)`` onto V_h.

    Returns the coefficients and ``||grad Pu|| / ||grad u||`` with the
    denominator integrated from the exact gradient.
    """
    space = system.space
    if stokes_mass is None:
        stokes_mass = apply_constraints(system, K=system.M_vel)
    rhs = assemble_load(space, u, t, quadrature_rule(ERROR_QUADRATURE_DEGREE))
    x = factorize(stokes_mass.matrix).solve(stokes_mass.rhs(rhs))
    coeffs = stokes_mass.split(x)[0]
    num = norm(system, coeffs, "H1semi")
    den = _h1_seminorm_exact(space, grad_u, t)
    return coeffs, num / den


def calibrate_c1(system: AssembledSystem, n_samples: int = 20, seed: int = 0, cap=None):
    """Sampled lower bound for the trilinear constant.

    For each random convecting field u the supremum of
    ``b(u, v, w) / (||grad v|| ||grad w||)`` over v, w in X_h is the largest
    singular value of ``L^-1 N(u) L^-T`` (``A = L L^T``); the sample maximum of
    that supremum divided by ``||grad u||`` is returned, together with the
    sampled fields.
    """
    space = system.space
    free = space.free_dofs
    check_cap(len(free), "trilinear calibration", cap)
    Af = system.A_visc[free][:, free].toarray()
    L = sla.cholesky(Af, lower=True)
    rng = np.random.default_rng(seed)
    best = 0.0
    fields = []
    for _ in range(n_samples):
        u = np.zeros(space.n_vel_dofs)
        u[free] = rng.standard_normal(len(free))
        Nf = system.N_conv(u)[free][:, free].toarray()
        T = sla.solve_triangular(L, sla.solve_triangular(L, Nf, lower=True).T, lower=True).T
        sup = sla.svdvals(T)[0]
        ratio = sup / norm(system, u, "H1semi")
        fields.append((u, ratio))
        best = max(best, ratio)
    return float(best), fields


def velocity_errors(space: FESpacePair, coeffs, u, grad_u, t: float, degree=ERROR_QUADRATURE_DEGREE):
    """(||u - u_h||, ||grad(u - u_h)||) against the exact field at quadrature points."""
    rule = quadrature_rule(degree)
    x, W = space.quadrature_points(rule)
    vh, gh = space.evaluate(coeffs, "velocity", rule)
    ue = np.moveaxis(np.asarray(u(x[..., 0], x[..., 1], t), dtype=float), 0, -1)
    ge = np.asarray(grad_u(x[..., 0], x[..., 1], t), dtype=float)  # (comp, dir, nt, nq)
    ge = np.moveaxis(np.moveaxis(ge, 0, -1), 0, -1)  # (nt, nq, comp, dir)
    l2 = np.sqrt(np.sum(W * np.sum((ue - vh) ** 2, axis=-1)))
    h1 = np.sqrt(np.sum(W * np.sum((ge - gh) ** 2, axis=(-1, -2))))
    return float(l2), float(h1)


def pressure_error(space: FESpacePair, coeffs, p, t: float, degree=ERROR_QUADRATURE_DEGREE) -> float:
    rule = quadrature_rule(degree)
    x, W = space.quadrature_points(rule)
    ph, _ = space.evaluate(coeffs, "pressure", rule)
    pe = np.asarray(p(x[..., 0], x[..., 1], t), dtype=float)
    return float(np.sqrt(np.sum(W * (pe - ph[..., 0]) ** 2)))


@dataclass
class ConstantsReport:
    level: int
    h_max: float
    alpha: float
    c_star: float
    c1_sample: float
    projection_ratio: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)
