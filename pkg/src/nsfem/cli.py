"""Command-line front end.

    nsfem <subcommand> [options]

Subcommands: solve, stability, convergence, infsup, equivalence,
project-stability.  Options may also come from an INI-style config file
(``--config``); command-line flags take precedence.  Exit status is 0 when
every pass/fail check passes, 1 when a check fails or a study errors out,
and 2 for invalid configuration.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .elements import Pair

SUBCOMMANDS = ("solve", "stability", "convergence", "infsup", "equivalence", "project-stability")
SOLUTIONS = ("stream_vortex", "stokes_poly", "zero")
COUPLINGS = ("dt_h2", "dt_h", "fixed_dt", "fixed_h_dt_halving")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    pair: str = "taylor-hood"
    n: int = 8
    levels: int = 3
    n0: int = 4
    nu: float = 1.0
    dt: Optional[float] = None
    n_steps: Optional[int] = None
    t_final: float = 1.0
    dt0: float = 0.1
    coupling: str = "dt_h2"
    solution: str = "stream_vortex"
    initial_condition: str = "interpolant"
    output: str = "nsfem-out"
    seed: int = 0
    quad_degree: Optional[int] = None
    dump_matrices: bool = False

    def as_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT = {"n", "levels", "n0", "n_steps", "seed", "quad_degree"}
_FLOAT = {"nu", "dt", "t_final", "dt0"}
_BOOL = {"dump_matrices"}


def _convert(key, value):
    if value is None:
        return None
    try:
        if key in _INT:
            return int(value)
        if key in _FLOAT:
            return float(value)
        if key in _BOOL:
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return str(value)


def _read_config_file(path, subcommand):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in ("run",) + SUBCOMMANDS:
            raise ConfigError(f"unknown section [{section}] in {path}")
    # [run] applies to every subcommand; a section named after the subcommand refines it
    for section in ("run", subcommand):
        if not parser.has_section(section):
            continue
        for key, value in parser.items(section):
            name = key.replace("-", "_")
            if name not in _FIELDS or name == "subcommand":
                raise ConfigError(f"unknown config key {key!r} in section [{section}] of {path}")
            values[name] = _convert(name, value)
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nsfem", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"nsfem {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [run] and/or [%s] sections" % name)
        p.add_argument("--pair", help="taylor-hood | mini | p1p1")
        p.add_argument("--n", type=int, help="mesh cells per side for single-mesh studies")
        p.add_argument("--levels", type=int, help="number of refinement levels")
        p.add_argument("--n0", type=int, help="cells per side on the coarsest level")
        p.add_argument("--nu", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--n-steps", type=int)
        p.add_argument("--t-final", type=float)
        p.add_argument("--dt0", type=float, help="coarsest time step for dt-halving studies")
        p.add_argument("--coupling", help="|".join(COUPLINGS))
        p.add_argument("--solution", help="|".join(SOLUTIONS))
        p.add_argument("--initial-condition", help="interpolant | l2_projection")
        p.add_argument("--output", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--quad-degree", type=int, help="override assembly quadrature degree (debug)")
        p.add_argument("--dump-matrices", action="store_true", default=None,
                       help="write assembled operators in coordinate format")
    return ap


def parse_config(argv=None) -> RunConfig:
    """Resolve a RunConfig from flags and an optional config file."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise ConfigError("invalid command line") from None
    values = {}
    if args.config:
        values.update(_read_config_file(args.config, args.subcommand))
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "subcommand") and v is not None}
    values.update(flags)
    cfg = RunConfig(subcommand=args.subcommand, **values)
    validate(cfg, explicit=set(values))
    return cfg


def validate(cfg: RunConfig, explicit=frozenset()) -> None:
    try:
        cfg.pair = Pair.parse(cfg.pair).value
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("n", "levels", "n0"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be a positive integer, got {getattr(cfg, key)}")
    for key in ("nu", "t_final", "dt0"):
        v = getattr(cfg, key)
        if not (v > 0 and math.isfinite(v)):
            raise ConfigError(f"{key} must be positive, got {v}")
    if cfg.dt is not None and not (cfg.dt > 0 and math.isfinite(cfg.dt)):
        raise ConfigError(f"dt must be positive, got {cfg.dt}")
    if cfg.n_steps is not None and cfg.n_steps < 1:
        raise ConfigError(f"n_steps must be a positive integer, got {cfg.n_steps}")
    if cfg.quad_degree is not None and not 1 <= cfg.quad_degree <= 10:
        raise ConfigError(f"quad_degree must be in 1..10, got {cfg.quad_degree}")
    if cfg.coupling not in COUPLINGS:
        raise ConfigError(f"unknown coupling {cfg.coupling!r}; expected one of {COUPLINGS}")
    if cfg.solution not in SOLUTIONS:
        raise ConfigError(f"unknown solution {cfg.solution!r}; expected one of {SOLUTIONS}")
    if cfg.initial_condition not in ("interpolant", "l2_projection"):
        raise ConfigError(f"unknown initial condition {cfg.initial_condition!r}")
    if cfg.subcommand == "convergence":
        if cfg.levels < 3:
            raise ConfigError("convergence needs levels >= 3")
        if "dt" in explicit and cfg.coupling in ("dt_h2", "dt_h"):
            raise ConfigError(f"--dt conflicts with coupling {cfg.coupling} (the step is tied to h)")
    if {"dt", "n_steps", "t_final"} <= set(explicit):
        if abs(cfg.dt * cfg.n_steps - cfg.t_final) > 1e-12 * cfg.t_final:
            raise ConfigError("dt, n_steps and t_final are inconsistent; give at most two")
    out = Path(cfg.output)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")


def _time_grid(cfg: RunConfig):
    if cfg.dt is not None and cfg.n_steps is not None:
        return cfg.dt, cfg.n_steps
    if cfg.dt is not None:
        n = int(round(cfg.t_final / cfg.dt))
        return cfg.dt, max(n, 1)
    if cfg.n_steps is not None:
        return cfg.t_final / cfg.n_steps, cfg.n_steps
    return 0.01, int(round(cfg.t_final / 0.01))


def _header(cfg):
    return {"version": __version__, "config": cfg.as_dict()}


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, cfg: RunConfig, header, rows) -> None:
    lines = [f"# nsfem {__version__}", "# config " + json.dumps(cfg.as_dict(), sort_keys=True),
             ",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _levels(cfg):
    return [cfg.n0 * 2 ** j for j in range(cfg.levels)]


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


# --- subcommands ----------------------------------------------------------

def _cmd_solve(cfg, out):
    from .solver import LIBESolver, SolverConfig
    from .verification import manufactured_solution
    dt, n_steps = _time_grid(cfg)
    ms = manufactured_solution(cfg.solution, cfg.nu)
    solver = LIBESolver(SolverConfig(nu=cfg.nu, dt=dt, n_steps=n_steps, pair=cfg.pair, n=cfg.n,
                                     initial_condition=cfg.initial_condition, u0=ms.u, forcing=ms.f,
                                     quadrature_degree=cfg.quad_degree))
    if cfg.dump_matrices:
        _dump(solver.system, out)
    traj = solver.run()
    from .solver import TRAJECTORY_COLUMNS
    rows = [[traj.records[c][i] for c in TRAJECTORY_COLUMNS] for i in range(len(traj))]
    _write_csv(out / "trajectory.csv", cfg, TRAJECTORY_COLUMNS, rows)
    print(f"solved {n_steps} steps; final ||u|| = {traj.records['l2_u'][-1]:.6e}")
    return []


def _dump(system, out):
    from .assembly import dump_matrix
    for name in ("A_visc", "M_vel", "B_div", "M_pres"):
        dump_matrix(getattr(system, name), out / f"{name}.coo")


def _constants_for(system, level, c_star=True, c1=True, seed=0):
    from .norms import ConstantsReport, DualNormContext, calibrate_c1, equivalence_constant, inf_sup_constant
    from .sparse_linalg import DenseCapExceeded
    ctx = DualNormContext(system)
    alpha = inf_sup_constant(system, ctx)
    cs = c1s = None
    if c_star:
        try:
            cs = equivalence_constant(system, ctx)
        except DenseCapExceeded as exc:
            print(f"note: {exc}")
    if c1:
        try:
            c1s, _ = calibrate_c1(system, n_samples=10, seed=seed)
        except DenseCapExceeded as exc:
            print(f"note: {exc}")
    return ConstantsReport(level, system.space.mesh.h_max, alpha, cs, c1s, None)


def _constants_dict(c):
    return {k: _clean(v) if isinstance(v, float) or v is None else v for k, v in dataclasses.asdict(c).items()}


def _cmd_stability(cfg, out):
    from .solver import LIBESolver, SolverConfig
    from .verification import manufactured_solution, stability_report
    dt, n_steps = _time_grid(cfg)
    ms = manufactured_solution(cfg.solution, cfg.nu)
    solver = LIBESolver(SolverConfig(nu=cfg.nu, dt=dt, n_steps=n_steps, pair=cfg.pair, n=cfg.n,
                                     initial_condition=cfg.initial_condition, u0=ms.u, forcing=ms.f,
                                     quadrature_degree=cfg.quad_degree))
    if cfg.dump_matrices:
        _dump(solver.system, out)
    traj = solver.run()
    consts = _constants_for(solver.system, cfg.n, seed=cfg.seed)
    rep = stability_report(traj, consts, cfg.nu, dt)
    _write_json(out / "constants.json", {**_header(cfg), "constants": [_constants_dict(consts)]})
    _write_json(out / "stability.json", {**_header(cfg), **rep.to_dict()})
    for c in rep.checks:
        print(f"{c.name:28s} {c.status:15s} left={c.left:.6e} right={c.right:.6e}")
    return [f"{c.name}: left {c.left:.6e} > right {c.right:.6e}" for c in rep.failed()]


RATE_KEYS_SPATIAL = ("grad_err_u_l2", "err_p_l2", "err_p_l1")


def rate_failures(table, pair: str, coupling: str):
    """Human-readable list of rate targets the table misses."""
    failures = []
    if coupling == "fixed_h_dt_halving":
        for key in table.TEMPORAL_KEYS:
            r = table.final_rate(key)
            if not abs(r - 1.0) <= 0.2:
                failures.append(f"temporal rate of {key} = {r:.3f}, expected 1.0 +/- 0.2")
    elif coupling in ("dt_h2", "dt_h"):
        k = Pair.parse(pair).velocity_order
        target = k - 0.2
        for key in RATE_KEYS_SPATIAL:
            r = table.final_rate(key)
            if not r >= target:
                failures.append(f"rate of {key} = {r:.3f}, expected >= {target:.1f}")
    return failures


def _cmd_convergence(cfg, out):
    from .verification import convergence_study
    try:
        table = convergence_study(cfg.pair, cfg.levels, cfg.coupling, nu=cfg.nu, t_final=cfg.t_final,
                                  n0=cfg.n if cfg.coupling == "fixed_h_dt_halving" else cfg.n0,
                                  dt0=cfg.dt if cfg.dt is not None else cfg.dt0,
                                  solution=cfg.solution, initial_condition=cfg.initial_condition,
                                  quadrature_degree=cfg.quad_degree, with_stability=True,
                                  progress=lambda r: print(
                                      f"level {r['level']}: n={r['n']} dt={r['dt']:.3e} "
                                      f"grad_err_u={r['grad_err_u_l2']:.3e} err_p={r['err_p_l2']:.3e}"))
    except Exception as exc:
        return [f"study failed: {exc}"]
    _write_csv(out / "convergence.csv", cfg, table.columns(), table.csv_rows())
    _write_json(out / "stability.json", {**_header(cfg), "levels": [
        {"n": r["n"], "dt": r["dt"], **rep.to_dict()} for r, rep in zip(table.rows, table.stability)]})
    failures = rate_failures(table, cfg.pair, cfg.coupling)
    for r, rep in zip(table.rows, table.stability):
        failures += [f"level n={r['n']}: {c.name} failed" for c in rep.failed()]
    for k in table.rate_keys:
        print(f"rates {k}: " + " ".join(f"{x:.3f}" for x in table.rates(k)))
    return failures


def _cmd_infsup(cfg, out):
    from .assembly import assemble_system
    from .elements import build_space
    from .mesh import generate_structured_square
    from .norms import inf_sup_spectrum
    rows = []
    for n in _levels(cfg):
        system = assemble_system(build_space(generate_structured_square(n), cfg.pair), cfg.quad_degree)
        spectrum = inf_sup_spectrum(system)
        rows.append({"level": n, "h_max": system.space.mesh.h_max, "alpha": spectrum.alpha,
                     "reduced_alpha": spectrum.reduced_alpha, "n_spurious": spectrum.n_spurious})
        print(f"n={n:4d} h_max={rows[-1]['h_max']:.4f} alpha={spectrum.alpha:.6e} "
              f"reduced_alpha={spectrum.reduced_alpha:.6e} spurious_modes={spectrum.n_spurious}")
    failures = []
    note = ""
    if cfg.pair == Pair.P1P1.value:
        reduced = [r["reduced_alpha"] for r in rows]
        declines = [1 - b / a for a, b in zip(reduced, reduced[1:])]
        note = ("unstable pair: equal-order P1/P1 fails the inf-sup condition; "
                f"{rows[-1]['n_spurious']} spurious pressure mode(s) give alpha = 0 and the "
                "constant on their complement declines per level by "
                + ", ".join(f"{d:.1%}" for d in declines))
        print(note)
    else:
        alphas = np.array([r["alpha"] for r in rows])
        if alphas.min() <= 0:
            failures.append("inf-sup constant is zero")
        elif alphas.max() / alphas.min() >= 1.1:
            failures.append(f"inf-sup constant varies by {alphas.max() / alphas.min() - 1:.1%} across levels")
    _write_json(out / "constants.json", {**_header(cfg), "note": note, "constants": rows})
    return failures


def _cmd_equivalence(cfg, out):
    from .assembly import assemble_system
    from .elements import build_space
    from .mesh import generate_structured_square
    from .norms import ConstantsReport, equivalence_constant
    reports = []
    for n in _levels(cfg):
        system = assemble_system(build_space(generate_structured_square(n), cfg.pair), cfg.quad_degree)
        cs = equivalence_constant(system)
        reports.append(ConstantsReport(n, system.space.mesh.h_max, None, cs, None, None))
        print(f"n={n:4d} h_max={reports[-1].h_max:.4f} C_*={cs:.6e}")
    cs = np.array([r.c_star for r in reports])
    failures = []
    if not (np.all(cs > 0) and np.all(cs <= 1 + 1e-12)):
        failures.append("norm-equivalence constant outside (0, 1]")
    elif cs.max() / cs.min() >= 2:
        failures.append(f"norm-equivalence constant varies by a factor {cs.max() / cs.min():.3f} >= 2")
    _write_json(out / "constants.json", {**_header(cfg), "constants": [_constants_dict(r) for r in reports]})
    return failures


def _cmd_project(cfg, out):
    from .verification import projection_stability_sweep
    sweep = projection_stability_sweep(_levels(cfg), cfg.pair, "stream_vortex")
    _write_csv(out / "projection.csv", cfg, ["h", "stability_ratio"], sweep)
    ratios = np.array([r for _, r in sweep])
    for h, r in sweep:
        print(f"h={h:.5f} ratio={r:.6f}")
    if not (np.all(np.isfinite(ratios)) and np.all(ratios > 0)):
        return ["non-finite or non-positive projection ratio"]
    if ratios.max() / ratios.min() >= 1.5:
        return [f"projection ratios vary by a factor {ratios.max() / ratios.min():.3f} >= 1.5"]
    return []


COMMANDS = {"solve": _cmd_solve, "stability": _cmd_stability, "convergence": _cmd_convergence,
            "infsup": _cmd_infsup, "equivalence": _cmd_equivalence, "project-stability": _cmd_project}


def dispatch(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 1
    try:
        failures = COMMANDS[cfg.subcommand](cfg, out)
    except OSError as exc:
        print(f"error: I/O failure on {getattr(exc, 'filename', None) or out}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        failures = [f"{type(exc).__name__}: {exc}"]
    if failures:
        print("FAILED:", file=sys.stderr)
        for f in failures:
            print(f"  - {f}", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"version": __version__, "config": cfg.as_dict()}, sort_keys=True))
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
