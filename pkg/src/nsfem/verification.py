"""Manufactured solutions, stability budgets and convergence studies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .elements import Pair, build_space
from .mesh import generate_structured_square
from .norms import (ConstantsReport, inf_sup_constant, l2_project_Vh, norm,
                    pressure_error, triple_bar, velocity_errors)
from .assembly import assemble_system
from .solver import LIBESolver, SolverConfig, Trajectory

PI = math.pi


@dataclass(frozen=True)
class ManufacturedSolution:
    """Exact velocity/pressure pair with the forcing that makes it solve the PDE.

    All callables take ``(x, y, t)``.  ``u`` and ``f`` return ``(2, ...)``
    arrays, ``grad_u`` returns ``(2, 2, ...)`` with ``grad_u[c, d] = d u_c / d x_d``.
    """

    name: str
    nu: float
    u: Callable
    grad_u: Callable
    u_t: Callable
    laplace_u: Callable
    p: Callable
    grad_p: Callable
    f: Callable


def _g(s):
    return s ** 2 * (1 - s) ** 2


def _g1(s):
    return 2 * s * (1 - s) * (1 - 2 * s)


def _g2(s):
    return 2 - 12 * s + 12 * s ** 2


def _g3(s):
    return 24 * s - 12


def _stream_vortex(nu):
    def u(x, y, t):
        c = np.cos(t)
        return np.stack([_g(x) * _g1(y) * c, -_g1(x) * _g(y) * c])

    def grad_u(x, y, t):
        c = np.cos(t)
        return np.stack([
            np.stack([_g1(x) * _g1(y) * c, _g(x) * _g2(y) * c]),
            np.stack([-_g2(x) * _g(y) * c, -_g1(x) * _g1(y) * c]),
        ])

    def u_t(x, y, t):
        s = -np.sin(t)
        return np.stack([_g(x) * _g1(y) * s, -_g1(x) * _g(y) * s])

    def laplace_u(x, y, t):
        c = np.cos(t)
        return np.stack([(_g2(x) * _g1(y) + _g(x) * _g3(y)) * c,
                         -(_g3(x) * _g(y) + _g1(x) * _g2(y)) * c])

    def p(x, y, t):
        # sin(pi x) cos(pi y) already has zero mean on the unit square
        return np.sin(PI * x) * np.cos(PI * y) * np.cos(t)

    def grad_p(x, y, t):
        c = np.cos(t)
        return np.stack([PI * np.cos(PI * x) * np.cos(PI * y) * c,
                         -PI * np.sin(PI * x) * np.sin(PI * y) * c])

    def f(x, y, t):
        uu = u(x, y, t)
        g = grad_u(x, y, t)
        adv = np.einsum("d...,cd...->c...", uu, g)
        return u_t(x, y, t) + adv - nu * laplace_u(x, y, t) + grad_p(x, y, t)

    return ManufacturedSolution("stream_vortex", nu, u, grad_u, u_t, laplace_u, p, grad_p, f)


def _stokes_poly(nu):
    zero2 = lambda x, y, t: np.zeros((2,) + np.shape(x))

    def grad_u(x, y, t):
        return np.zeros((2, 2) + np.shape(x))

    def p(x, y, t):
        return x + 2 * y - 1.5

    def grad_p(x, y, t):
        return np.stack([np.ones(np.shape(x)), 2 * np.ones(np.shape(x))])

    return ManufacturedSolution("stokes_poly", nu, zero2, grad_u, zero2, zero2, p, grad_p, grad_p)


def _zero(nu):
    zero2 = lambda x, y, t: np.zeros((2,) + np.shape(x))
    return ManufacturedSolution("zero", nu, zero2, lambda x, y, t: np.zeros((2, 2) + np.shape(x)), zero2,
                                zero2, lambda x, y, t: np.zeros(np.shape(x)), zero2, zero2)


MANUFACTURED = {"stream_vortex": _stream_vortex, "stokes_poly": _stokes_poly, "zero": _zero}


def manufactured_solution(name: str, nu: float = 1.0) -> ManufacturedSolution:
    try:
        return MANUFACTURED[name](nu)
    except KeyError:
        raise ValueError(f"unknown manufactured solution {name!r}; "
                         f"expected one of {sorted(MANUFACTURED)}") from None


# --------------------------------------------------------------------------
# stability report

@dataclass
class Check:
    name: str
    left: float
    right: float
    tolerance: float
    status: str  # pass | fail | not_applicable | informational
    note: str = ""

    @property
    def margin(self) -> float:
        return self.right - self.left

    def as_dict(self):
        return {"name": self.name, "left": _clean(self.left), "right": _clean(self.right),
                "margin": _clean(self.margin), "tolerance": self.tolerance,
                "status": self.status, "note": self.note}


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


@dataclass
class StabilityReport:
    checks: list = field(default_factory=list)
    per_step_margins: list = field(default_factory=list)
    quantities: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def failed(self):
        return [c for c in self.checks if c.status == "fail"]

    def check(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"passed": self.passed,
                "checks": [c.as_dict() for c in self.checks],
                "per_step_pressure_margins": [_clean(m) for m in self.per_step_margins],
                "quantities": {k: _clean(v) for k, v in self.quantities.items()}}

    def to_json(self, **extra) -> str:
        d = dict(extra)
        d.update(self.to_dict())
        return json.dumps(d, indent=2, sort_keys=True)


ENERGY_TOL = 1e-9
IDENTITY_TOL = 1e-9
PRESSURE_STEP_TOL = 1e-8
TRANSFER_TOL = 1e-8
BUDGET_TOL = 1e-8


def stability_report(trajectory: Trajectory, constants: ConstantsReport, nu: float, dt: float) -> StabilityReport:
    """Evaluate the velocity energy bound, the per-step pressure bound, the
    dual-norm transfer, and both pressure budgets from a stored trajectory.

    Time sums over the solution run over steps 1..N; ``||f^{n}||_{-1}`` is
    replaced by the discrete dual norm on X_h.
    """
    tr = trajectory
    required = ("l2_u", "h1semi_u", "l2_p", "increment_l2", "dtu_dual_Xh", "dtu_dual_Vh",
                "f_dual", "residual_dual_Xh", "conv_dual_Xh", "f_pairing", "div_u_prev")
    missing = [k for k in required if k not in tr.records]
    if missing:
        raise ValueError(f"trajectory lacks diagnostics: {missing}")
    l2u = tr.column("l2_u")
    h1 = tr.column("h1semi_u")
    l2p = tr.column("l2_p")[1:]
    inc = tr.column("increment_l2")[1:]
    fX = tr.column("f_dual")[1:]
    N = len(l2u) - 1
    t_star = N * dt
    alpha = constants.alpha
    c_star = constants.c_star
    rep = StabilityReport()

    # velocity energy bound
    lhs = l2u[-1] ** 2 + np.sum(inc ** 2) + nu * dt * np.sum(h1[1:] ** 2)
    rhs = dt * np.sum(fX ** 2) / nu + l2u[0] ** 2
    scale = max(lhs, rhs, np.finfo(float).tiny)
    rep.checks.append(Check("energy_bound", lhs, rhs, ENERGY_TOL,
                            _status(rhs - lhs >= -ENERGY_TOL * scale)))

    # discrete energy identity
    fpair = tr.column("f_pairing")[1:]
    terms = [l2u[-1] ** 2, np.sum(inc ** 2), 2 * nu * dt * np.sum(h1[1:] ** 2),
             -2 * dt * np.sum(fpair), -l2u[0] ** 2]
    imbalance = float(np.sum(terms))
    iscale = max(sum(abs(x) for x in terms), np.finfo(float).tiny)
    rel = abs(imbalance) / iscale
    rep.checks.append(Check("energy_identity", rel, IDENTITY_TOL, IDENTITY_TOL,
                            _status(rel <= IDENTITY_TOL), "relative imbalance"))

    # per-step pressure bound: alpha ||p^{n+1}|| <= ||R^{n+1}||_{X_h*}
    resX = tr.column("residual_dual_Xh")[1:]
    margins = resX + PRESSURE_STEP_TOL - alpha * l2p
    rep.per_step_margins = margins.tolist()
    worst = int(np.argmin(margins)) if len(margins) else 0
    rep.checks.append(Check("per_step_pressure_bound", alpha * l2p[worst], resX[worst], PRESSURE_STEP_TOL,
                            _status(bool(np.all(margins >= 0))),
                            f"worst step {worst + 1} of {N}"))

    dtX = tr.column("dtu_dual_Xh")[1:]
    dtV = tr.column("dtu_dual_Vh")[1:]
    in_Vh = np.concatenate([[tr.initial_in_Vh], np.ones(N - 1, bool)])
    have_cstar = c_star is not None and math.isfinite(c_star) and c_star > 0
    if have_cstar:
        lhs_t = c_star * dtX
        ok = lhs_t <= dtV + TRANSFER_TOL * np.maximum(dtX, 1e-300) + 1e-14
        applicable = in_Vh
        worst_t = int(np.argmax(np.where(applicable, lhs_t - dtV, -np.inf))) if applicable.any() else 0
        note = "" if tr.initial_in_Vh else "step 1 skipped: initial velocity is not discretely divergence-free"
        rep.checks.append(Check("dual_norm_transfer", lhs_t[worst_t], dtV[worst_t], TRANSFER_TOL,
                                _status(bool(np.all(ok[applicable]))), note))
    else:
        rep.checks.append(Check("dual_norm_transfer", math.nan, math.nan, TRANSFER_TOL, "not_applicable",
                                "norm-equivalence constant not computed"))

    # pressure budgets
    convX = tr.column("conv_dual_Xh")[1:]
    denom = h1[:-1] * h1[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        c1_steps = np.where(denom > 0, convX / np.where(denom > 0, denom, 1.0), 0.0)
    c1_eff = float(np.max(c1_steps)) if len(c1_steps) else 0.0
    C_h = float(np.max(h1[:-1]))
    grad_tb = triple_bar(h1, dt, 2)
    f_tb = triple_bar(fX, dt, 2)
    u0 = l2u[0]
    rep.quantities.update(alpha=alpha, c_star=c_star if have_cstar else math.nan,
                          c1_sample=constants.c1_sample, c1_realized=c1_eff, C_h=C_h,
                          grad_u_triple_bar=grad_tb, f_triple_bar=f_tb, t_star=t_star)
    p_l1 = alpha * dt * np.sum(l2p)
    p_l2 = alpha * math.sqrt(dt * np.sum(l2p ** 2))
    if have_cstar:
        k = 1 + 1 / c_star
        r1 = k * ((c1_eff * grad_tb + nu * math.sqrt(t_star)) * grad_tb + math.sqrt(t_star) * f_tb)
        s = c1_eff ** 2 * dt * np.sum(denom ** 2) + nu ** 2 * grad_tb ** 2 + f_tb ** 2
        r2 = math.sqrt(3) * k * math.sqrt(s)
        applicable = tr.initial_in_Vh
        why = "" if applicable else "initial velocity is not discretely divergence-free"
        for name, left, right in (("pressure_budget_l1_realized", p_l1, r1), ("pressure_budget_l2_realized", p_l2, r2)):
            ok = right - left >= -BUDGET_TOL * max(left, right, 1e-300)
            rep.checks.append(Check(name, left, right, BUDGET_TOL,
                                    _status(ok) if applicable else "not_applicable", why))
        c1 = constants.c1_sample
        if c1 is not None and math.isfinite(c1):
            r1c = k * ((c1 * f_tb / nu ** 2 + 2 * math.sqrt(t_star)) * f_tb
                       + (c1 * u0 / nu + math.sqrt(nu * t_star)) * u0)
            r2c = math.sqrt(3) * k * (math.sqrt(c1 ** 2 * C_h ** 2 / nu ** 2 + 1) * f_tb
                                      + math.sqrt(c1 ** 2 * C_h ** 2 / nu + nu) * u0)
            rep.checks.append(Check("pressure_budget_l1_calibrated", p_l1, r1c, 0.0, "informational",
                                    "uses the sampled trilinear constant"))
            rep.checks.append(Check("pressure_budget_l2_calibrated", p_l2, r2c, 0.0, "informational",
                                    "uses the sampled trilinear constant"))
    return rep


# --------------------------------------------------------------------------
# convergence studies

COUPLINGS = ("dt_h2", "dt_h", "fixed_dt", "fixed_h_dt_halving")


@dataclass
class ConvergenceTable:
    pair: str
    coupling: str
    rows: list = field(default_factory=list)
    stability: list = field(default_factory=list)

    ERROR_KEYS = ("err_u_final", "grad_err_u_l2", "err_p_l2", "err_p_l1")
    # fixed-mesh time-step studies only: distance between the solutions at
    # dt and dt/2 on the coarser time grid, which isolates the time error
    TEMPORAL_KEYS = ("dt_diff_grad_u_l2", "dt_diff_p_l2")

    @property
    def rate_keys(self):
        return self.ERROR_KEYS + (self.TEMPORAL_KEYS if self.coupling == "fixed_h_dt_halving" else ())

    def rates(self, key) -> list:
        e = [r.get(key, math.nan) for r in self.rows]
        return [math.log2(a / b) if a > 0 and b > 0 else math.nan for a, b in zip(e[:-1], e[1:])]

    def final_rate(self, key) -> float:
        r = self.rates(key)
        return r[-1] if r else math.nan

    def columns(self):
        cols = ["level", "n", "h", "dt", "n_steps", *self.rate_keys, "init_err_u", "init_grad_err_u"]
        return cols + [f"rate_{k}" for k in self.rate_keys]

    def csv_rows(self):
        base = self.columns()[: -len(self.rate_keys)]
        rates = {k: [math.nan] + self.rates(k) for k in self.rate_keys}
        return [[row.get(c, math.nan) for c in base] + [rates[k][i] for k in self.rate_keys]
                for i, row in enumerate(self.rows)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for vals in self.csv_rows():
                w.writerow([_fmt(v) for v in vals])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def level_schedule(levels: int, coupling: str, n0: int = 4, dt0: float = 0.1, t_final: float = 1.0):
    """(n, dt) per level for the given time-step coupling."""
    if coupling not in COUPLINGS:
        raise ValueError(f"unknown coupling {coupling!r}; expected one of {COUPLINGS}")
    out = []
    for j in range(levels):
        if coupling == "fixed_h_dt_halving":
            n, dt = n0, dt0 / 2 ** j
        else:
            n = n0 * 2 ** j
            dt = {"dt_h2": 1.0 / n ** 2, "dt_h": 1.0 / n, "fixed_dt": dt0}[coupling]
        n_steps = int(round(t_final / dt))
        if abs(n_steps * dt - t_final) > 1e-12 * t_final:
            raise ValueError(f"dt={dt} does not divide t*={t_final}")
        out.append((n, dt, n_steps))
    return out


def convergence_study(pair="taylor-hood", levels: int = 4, coupling: str = "dt_h2", nu: float = 1.0,
                      t_final: float = 1.0, n0: int = 4, dt0: float = 0.1,
                      solution: str = "stream_vortex", initial_condition: str = "interpolant",
                      quadrature_degree: Optional[int] = None, with_stability: bool = False,
                      progress: Optional[Callable] = None) -> ConvergenceTable:
    """Run the scheme against a manufactured solution on a sequence of levels.

    Errors are integrated against the exact fields at degree-7 quadrature
    points.  With ``with_stability`` each level also gets a stability report
    (inf-sup constant computed on that level, no norm-equivalence constant).
    """
    if levels < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    pair = Pair.parse(pair)
    ms = manufactured_solution(solution, nu)
    table = ConvergenceTable(pair.value, coupling)
    temporal = coupling == "fixed_h_dt_halving"
    previous = None
    for level, (n, dt, n_steps) in enumerate(level_schedule(levels, coupling, n0, dt0, t_final)):
        cfg = SolverConfig(nu=nu, dt=dt, n_steps=n_steps, pair=pair, n=n, initial_condition=initial_condition,
                           u0=ms.u, forcing=ms.f, quadrature_degree=quadrature_degree)
        solver = LIBESolver(cfg)
        space = solver.space
        grad_e, p_e = [], []
        last = {}
        history = []

        def observe(state):
            if temporal:
                history.append((state.u, state.p))
            l2, h1 = velocity_errors(space, state.u, ms.u, ms.grad_u, state.t)
            grad_e.append(h1)
            if state.n == 0:
                last["init"] = (l2, h1)
            else:
                p_e.append(pressure_error(space, state.p, ms.p, state.t))
            last["l2"] = l2

        try:
            traj = solver.run(observe)
        except Exception as exc:
            raise RuntimeError(f"level {level} (n={n}, dt={dt}): {exc}") from exc
        p_e = np.array(p_e)
        table.rows.append({
            "level": level, "n": n, "h": 1.0 / n, "dt": dt, "n_steps": n_steps,
            "err_u_final": last["l2"],
            "grad_err_u_l2": triple_bar(grad_e, dt, 2),
            "err_p_l2": triple_bar(p_e, dt, 2),
            "err_p_l1": float(dt * np.sum(p_e)),
            "init_err_u": last["init"][0], "init_grad_err_u": last["init"][1],
        })
        if temporal:
            du = dp = math.nan
            if previous is not None:
                prev_dt, prev_hist = previous
                sysm = solver.system
                du = triple_bar([norm(sysm, u0 - history[2 * k][0], "H1semi")
                                 for k, (u0, _) in enumerate(prev_hist)], prev_dt, 2)
                dp = triple_bar([norm(sysm, p0 - history[2 * k][1], "L2", "pressure")
                                 for k, (_, p0) in enumerate(prev_hist) if k > 0], prev_dt, 2)
            table.rows[-1].update(dt_diff_grad_u_l2=du, dt_diff_p_l2=dp)
            previous = (dt, history)
        if with_stability:
            alpha = inf_sup_constant(solver.system, solver.ctx)
            consts = ConstantsReport(level, space.mesh.h_max, alpha, None, None, None)
            table.stability.append(stability_report(traj, consts, nu, dt))
        if progress is not None:
            progress(table.rows[-1])
    return table


def projection_stability_sweep(levels=(2, 4, 8, 16), pair="taylor-hood", solution: str = "stream_vortex"):
    """``||grad Pu|| / ||grad u||`` for the stream-function probe at t=0, per mesh level."""
    ms = manufactured_solution(solution)
    out = []
    for n in levels:
        space = build_space(generate_structured_square(n), pair)
        system = assemble_system(space)
        _, ratio = l2_project_Vh(system, ms.u, ms.grad_u, 0.0)
        out.append((1.0 / n, ratio))
    return out
