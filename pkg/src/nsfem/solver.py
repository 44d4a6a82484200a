"""Linearly implicit Backward Euler for the incompressible Navier-Stokes equations.

Each step solves one linear saddle-point problem

    (M/dt + nu A + N(u^n)) u^{n+1} - B^T p^{n+1} = M u^n / dt + F^{n+1}
    -B u^{n+1} + lambda m = 0,   m^T p^{n+1} = 0

with homogeneous Dirichlet velocity and zero-mean pressure.  The
time-independent part ``M/dt + nu A`` is factorized once; each step is
solved by GMRES preconditioned with that factorization, falling back to a
fresh sparse LU of the full matrix if the residual target is missed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import AssembledSystem, ConstrainedSaddle, assemble_system, constrain_columns
from .elements import FESpacePair, Pair, build_space, interpolate, quadrature_rule
from .mesh import Mesh, generate_structured_square
from .norms import ERROR_QUADRATURE_DEGREE, DualNormContext, norm
from .sparse_linalg import factorize

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
DIRECT_SIZE_LIMIT = 4000


class StepError(RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"time step {step} failed: {cause}")
        self.step = step


def _zero_field(x, y, t):
    return np.zeros((2,) + np.shape(x))


@dataclass
class SolverConfig:
    nu: float = 1.0
    dt: float = 0.01
    n_steps: int = 100
    pair: Pair | str = Pair.TAYLOR_HOOD
    n: int = 8                       # structured mesh level (cells per side)
    mesh: Optional[Mesh] = None      # overrides `n` when given
    initial_condition: str = "interpolant"
    u0: Callable = _zero_field       # u0(x, y, t) evaluated at t = 0
    forcing: Callable = _zero_field  # f(x, y, t)
    quadrature_degree: Optional[int] = None
    linear_solver: str = "auto"      # auto | direct | iterative
    keep_snapshots: bool = False

    def __post_init__(self):
        self.pair = Pair.parse(self.pair)
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        self.n_steps = int(self.n_steps)
        if self.initial_condition not in ("interpolant", "l2_projection"):
            raise ValueError(f"unknown initial_condition {self.initial_condition!r}")
        if self.linear_solver not in ("auto", "direct", "iterative"):
            raise ValueError(f"unknown linear_solver {self.linear_solver!r}")

    @property
    def t_final(self) -> float:
        return self.n_steps * self.dt


@dataclass(frozen=True, eq=False)
class State:
    u: np.ndarray
    p: np.ndarray
    t: float
    n: int


TRAJECTORY_COLUMNS = ["t", "l2_u", "h1semi_u", "l2_p", "increment_l2",
                      "dtu_dual_Xh", "dtu_dual_Vh", "f_dual"]


@dataclass
class Trajectory:
    """Per-step diagnostics of a run; row n describes time level n.

    Quantities that only exist from step 1 on (pressure, increments, dual
    norms of the discrete time derivative and of the residual) are NaN in row 0.
    """

    nu: float
    dt: float
    records: dict = field(default_factory=dict)
    u0: Optional[np.ndarray] = None
    final: Optional[State] = None
    snapshots: list = field(default_factory=list)
    initial_in_Vh: bool = False

    def __len__(self):
        return len(self.records["t"])

    def column(self, name) -> np.ndarray:
        return np.asarray(self.records[name], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for i in range(len(self)):
                w.writerow([repr(float(self.records[c][i])) for c in TRAJECTORY_COLUMNS])


class LIBESolver:
    """Operators, factorizations and diagnostics for one configuration."""

    def __init__(self, config: SolverConfig):
        self.config = config
        mesh = config.mesh if config.mesh is not None else generate_structured_square(config.n)
        self.space: FESpacePair = build_space(mesh, config.pair)
        self.system: AssembledSystem = assemble_system(self.space, config.quadrature_degree)
        self.ctx = DualNormContext(self.system)
        dt, nu = config.dt, config.nu
        self.base = ConstrainedSaddle(self.system.M_vel / dt + nu * self.system.A_visc,
                                      self.system.B_div, self.system.mean_vec,
                                      self.space.dirichlet_dofs)
        self._base_factor = None
        self._Bc = constrain_columns(self.system.B_div, self.space.dirichlet_dofs)
        self._keep = np.ones(self.space.n_vel_dofs)
        self._keep[self.space.dirichlet_dofs] = 0.0
        self._D = sp.diags(self._keep)
        self.fallbacks = 0

    @property
    def base_factor(self):
        if self._base_factor is None:
            self._base_factor = factorize(self.base.matrix)
        return self._base_factor

    def _use_direct(self):
        mode = self.config.linear_solver
        return mode == "direct" or (mode == "auto" and self.base.size <= DIRECT_SIZE_LIMIT)

    def divergence(self, u) -> float:
        return float(np.linalg.norm(self._Bc @ u))

    def initialize(self) -> State:
        cfg = self.config
        if cfg.initial_condition == "interpolant":
            u = interpolate(self.space, cfg.u0, 0.0)
            u[self.space.dirichlet_dofs] = 0.0
        else:
            from .assembly import apply_constraints, assemble_load
            sad = apply_constraints(self.system, K=self.system.M_vel)
            rhs = assemble_load(self.space, cfg.u0, 0.0, quadrature_rule(ERROR_QUADRATURE_DEGREE))
            u = sad.split(factorize(sad.matrix).solve(sad.rhs(rhs)))[0].copy()
            u[self.space.dirichlet_dofs] = 0.0
        return State(u, np.zeros(self.space.n_pres_dofs), 0.0, 0)

    def step_matrix(self, u_prev):
        N = self.system.N_conv(u_prev)
        Nc = (self._D @ N @ self._D).tocsr()
        n_extra = self.base.size - self.space.n_vel_dofs
        return (self.base.matrix + sp.block_diag([Nc, sp.csr_matrix((n_extra, n_extra))], format="csr")).tocsr(), N

    def _solve(self, K, b):
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b), 0.0
        if not self._use_direct():
            F = self.base_factor
            P = spla.LinearOperator(K.shape, F.solve, dtype=float)
            x, info = spla.gmres(K, b, x0=F.solve(b), M=P, rtol=1e-13, atol=0.0, restart=40, maxiter=2)
            res = np.linalg.norm(K @ x - b) / bnorm
            if res <= RESIDUAL_TOL:
                return x, res
            self.fallbacks += 1
            log.info("preconditioned GMRES missed the residual target (%.2e); using direct LU", res)
        x = factorize(K).solve(b)
        return x, np.linalg.norm(K @ x - b) / bnorm

    def step(self, state: State):
        """Advance one step; returns the new state and the step diagnostics."""
        cfg = self.config
        dt, nu = cfg.dt, cfg.nu
        t_new = (state.n + 1) * dt
        K, N = self.step_matrix(state.u)
        F = self.system.load(cfg.forcing, t_new)
        F[self.space.dirichlet_dofs] = 0.0
        rhs = self.base.rhs(self.system.M_vel @ state.u / dt + F)
        x, res = self._solve(K, rhs)
        u, p, _ = self.base.split(x)
        u = u.copy()
        u[self.space.dirichlet_dofs] = 0.0
        p = p.copy()
        if not np.isfinite(res) or res > RESIDUAL_TOL:
            raise np.linalg.LinAlgError(f"step {state.n + 1}: linear residual {res:.3e} above {RESIDUAL_TOL}")
        new = State(u, p, t_new, state.n + 1)

        ctx = self.ctx
        dtu = (u - state.u) / dt
        dtu_fun = ctx.pairing(dtu)
        conv_fun = N @ u
        visc_fun = nu * (self.system.A_visc @ u)
        resid_fun = dtu_fun + conv_fun + visc_fun - F
        diag = {
            "t": t_new,
            "l2_u": norm(self.system, u, "L2"),
            "h1semi_u": norm(self.system, u, "H1semi"),
            "l2_p": norm(self.system, p, "L2", "pressure"),
            "increment_l2": norm(self.system, u - state.u, "L2"),
            "dtu_dual_Xh": ctx.dual_norm_Xh(dtu_fun),
            "dtu_dual_Vh": ctx.dual_norm_Vh(dtu_fun),
            "f_dual": ctx.dual_norm_Xh(F),
            "residual_dual_Xh": ctx.dual_norm_Xh(resid_fun),
            "conv_dual_Xh": ctx.dual_norm_Xh(conv_fun),
            "f_pairing": float(F @ u),
            "div_u": self.divergence(u),
            "div_u_prev": self.divergence(state.u),
            "p_mean": float(self.system.mean_vec @ p),
            "solve_residual": res,
        }
        return new, diag

    def run(self, observer=None) -> Trajectory:
        cfg = self.config
        state = self.initialize()
        traj = Trajectory(cfg.nu, cfg.dt)
        traj.u0 = state.u.copy()
        traj.initial_in_Vh = self.divergence(state.u) <= RESIDUAL_TOL
        recs = {k: [] for k in ("t", "l2_u", "h1semi_u", "l2_p", "increment_l2", "dtu_dual_Xh",
                                "dtu_dual_Vh", "f_dual", "residual_dual_Xh", "conv_dual_Xh",
                                "f_pairing", "div_u", "div_u_prev", "p_mean", "solve_residual")}
        nan = float("nan")
        first = dict.fromkeys(recs, nan)
        first.update(t=0.0, l2_u=norm(self.system, state.u, "L2"),
                     h1semi_u=norm(self.system, state.u, "H1semi"), div_u=self.divergence(state.u))
        for k in recs:
            recs[k].append(first[k])
        if observer is not None:
            observer(state)
        if cfg.keep_snapshots:
            traj.snapshots.append(state)
        for _ in range(cfg.n_steps):
            try:
                state, diag = self.step(state)
            except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
                raise StepError(state.n + 1, exc) from exc
            for k in recs:
                recs[k].append(diag[k])
            if observer is not None:
                observer(state)
            if cfg.keep_snapshots:
                traj.snapshots.append(state)
        traj.records = recs
        traj.final = state
        return traj


def initialize(config: SolverConfig) -> State:
    return LIBESolver(config).initialize()


def step(state: State, config: SolverConfig, solver: LIBESolver | None = None) -> State:
    solver = solver or LIBESolver(config)
    return solver.step(state)[0]


def run(config: SolverConfig, observer=None) -> Trajectory:
    return LIBESolver(config).run(observer)
