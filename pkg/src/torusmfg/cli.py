"""Command-line front end: ``torusmfg {stationary,evolve,criteria,sweep,verify}``.

Exit codes: 0 success, 1 numerical non-convergence or a failed check,
2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics, measures, oracles
from .config import Scenario, dump_config, load_config
from .coupling import (
    critical_coupling,
    free_energy,
    heat_flow_criterion,
    is_lasry_lions_monotone,
    lambda_upper_bound,
    uniqueness_certified,
)
from .errors import ConfigError, ConvergenceError, DegenerateDensityError, TorusMFGError
from .flow import export_trajectory, solve_mfg
from .stationary import StationaryConfig, default_seeds, solve_stationary_mfg

log = logging.getLogger("torusmfg")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
SCHEMA = 1


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(data):
    return json.dumps(data, indent=2) + "\n"


def _q1(grid, m):
    k = (1,) + (0,) * (grid.dim - 1)
    return float(measures.fourier_moment(grid, m, k).q)


def _seeds(grid, seed):
    # the library is deterministic; --seed adds one random smooth seed in 1-D
    library = default_seeds(grid)
    if grid.dim == 1:
        rng = np.random.default_rng(seed)
        library.append(("random", oracles.random_density(rng, grid, max_degree=4)))
    return library


# -- stationary ---------------------------------------------------------------


def _stationary_summary(sc: Scenario, kernel, solutions):
    grid = sc.grid
    uniform = measures.uniform_density(grid)
    entries = []
    for j, sol in enumerate(solutions):
        entry = {
            "index": j,
            "seed": sol.seed,
            "converged": sol.converged,
            "iterations": sol.iterations,
            "q_1": _q1(grid, sol.m),
            "phi": float(free_energy(grid, kernel, sc.params, sol.m)),
            "residual_hjb": sol.residual_hjb,
            "residual_fp": sol.residual_fp,
            "residual_const": sol.residual_const,
            "message": sol.message,
        }
        if grid.dim == 1:
            entry["w1_uniform"] = float(measures.wasserstein1_circle(grid, sol.m, uniform))
        entries.append(entry)
    return {
        "schema": SCHEMA,
        "kernel": kernel.to_dict(),
        "params": {"rho": sc.params.rho, "nu": sc.params.nu},
        "grid": {"dim": grid.dim, "n": grid.n},
        "all_converged": all(s.converged for s in solutions),
        "distinct_solutions": sum(s.converged for s in solutions),
        "solutions": entries,
    }


def _write_stationary(out, sc, kernel, solutions):
    for j, sol in enumerate(solutions):
        tmp = out / f".solution_{j:02d}.tmp"
        measures.write_density_csv(tmp, sc.grid, sol.m)
        os.replace(tmp, out / f"solution_{j:02d}.csv")
        rows = [(it, repr(step), repr(rh), repr(rf), repr(rc)) for it, step, rh, rf, rc in sol.history]
        _atomic_write(out / f"history_{j:02d}.csv",
                      _csv_text(("iter", "W1_step", "r_hjb", "r_fp", "r_const"), rows))
    summary = _stationary_summary(sc, kernel, solutions)
    _atomic_write(out / "summary.json", _json_text(summary))
    return summary


def cmd_stationary(sc: Scenario, args):
    config = StationaryConfig(**{**sc.stationary.__dict__, "seeds": _seeds(sc.grid, args.seed)})
    solutions = solve_stationary_mfg(sc.grid, sc.kernel, sc.params, config, jobs=args.jobs)
    out = sc.out_dir / "stationary"
    out.mkdir(parents=True, exist_ok=True)
    summary = _write_stationary(out, sc, sc.kernel, solutions)
    for e in summary["solutions"]:
        status = "converged" if e["converged"] else "NOT converged"
        print(f"solution {e['index']} (seed {e['seed']}): {status}, q_1 = {e['q_1']:.6g}, "
              f"residuals hjb {e['residual_hjb']:.2e} fp {e['residual_fp']:.2e}")
    print(f"{summary['distinct_solutions']} distinct stationary solution(s); summary in {out / 'summary.json'}")
    return EXIT_OK if summary["all_converged"] else EXIT_NUMERIC


# -- evolve -------------------------------------------------------------------


def cmd_evolve(sc: Scenario, args):
    m0 = sc.initial_density()
    traj = solve_mfg(sc.grid, sc.kernel, sc.params, m0, sc.mesh, sc.picard, sc.terminal_mode, sc.stationary,
                     sc.scheme)
    out = sc.out_dir / "evolve"
    out.mkdir(parents=True, exist_ok=True)
    if sc.raw["outputs"]["trajectory"]:
        export_trajectory(traj, out / "trajectory", sc.kernel, sc.params,
                          max_frames=int(sc.raw["outputs"]["max_frames"]))
    rows = diagnostics.diagnose(traj, sc.kernel, sc.params)
    tmp = out / ".diagnostics.tmp"
    diagnostics.write_diagnostics_csv(tmp, rows)
    os.replace(tmp, out / "diagnostics.csv")

    solver = sc.raw["solver"]
    margin = float(solver["lyapunov_band_margin"])
    lyap = diagnostics.lyapunov_summary(rows, margin, sc.mesh.horizon - margin)
    grad = diagnostics.gradient_bound_check(traj, sc.kernel, sc.params)
    lower = diagnostics.lyapunov_lower_bound_check(traj, rows, sc.kernel, sc.params)
    mass_err = float(np.max(np.abs(sc.grid.integrate(traj.densities) - 1.0)))
    checks = {
        "converged": traj.converged,
        "mass": mass_err <= 1e-10,
        "lyapunov_residual": lyap.max_relative_residual <= float(solver["lyapunov_tol"]),
        "lyapunov_monotone": lyap.max_increase <= 1e-8,
        "gradient_bound": grad.passes,
        "lyapunov_lower_bound": lower.passes,
    }
    summary = {
        "schema": SCHEMA,
        "converged": traj.converged,
        "picard_iters": traj.picard_iters,
        "picard_steps": traj.step_history,
        "max_clipped_mass": traj.max_clipped_mass,
        "mass_error": mass_err,
        "lyapunov_max_relative_residual": lyap.max_relative_residual,
        "lyapunov_band": list(lyap.band),
        "lyapunov_max_increase": lyap.max_increase,
        "gradient_bound": grad._asdict(),
        "lyapunov_lower_bound": lower._asdict(),
        "q_1_final": _q1(sc.grid, traj.densities[-1]),
    }
    if sc.grid.dim == 1:
        qen = np.array([np.nan] + [r.qen for r in rows] + [np.nan])
        qen[0] = float(diagnostics.q_energy(sc.grid, traj.values[0], traj.densities[0], sc.params.nu))
        qen[-1] = float(diagnostics.q_energy(sc.grid, traj.values[-1], traj.densities[-1], sc.params.nu))
        shift = diagnostics.shift_bound_lattice(traj, diagnostics.index_lattice(traj), qen=qen)
        tmp = out / ".shift_bound.tmp"
        diagnostics.write_shift_bound_csv(tmp, shift)
        os.replace(tmp, out / "shift_bound.csv")
        checks["shift_bound"] = all(r.passes for r in shift)
        uniform = measures.uniform_density(sc.grid)
        summary["w1_uniform_final"] = float(measures.wasserstein1_circle(sc.grid, traj.densities[-1], uniform))
        flat = diagnostics.flattening_report(traj, [1.0]) if sc.mesh.horizon >= 1.0 else []
        summary["flattening_final"] = flat[-1].sup_w1 if flat else None
    summary["checks"] = checks
    _atomic_write(out / "summary.json", _json_text(summary))
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"outputs in {out}")
    return EXIT_OK if all(checks.values()) else EXIT_NUMERIC


# -- criteria -----------------------------------------------------------------


def _fmt(x):
    return f"{x:.6g}"


def cmd_criteria(sc: Scenario, args):
    kernel, params = sc.kernel, sc.params
    lam = lambda_upper_bound(kernel)
    half_c = critical_coupling(params) / 2.0
    monotone = is_lasry_lions_monotone(kernel)
    certified = uniqueness_certified(kernel, params)
    lines = []
    if monotone:
        lines.append("kernel is Lasry-Lions monotone (all c_k >= 0): at most one stationary equilibrium, unique")
    else:
        lines.append("kernel is not Lasry-Lions monotone (some c_k < 0)")
    if lam < half_c:
        lines.append(f"Lambda <= {_fmt(lam)} < {_fmt(half_c)} = kappa_c/2 => uniqueness certified")
    else:
        lines.append(f"Lambda <= {_fmt(lam)} >= {_fmt(half_c)} = kappa_c/2 => no uniqueness certificate")
    report = {
        "schema": SCHEMA,
        "kernel": kernel.to_dict(),
        "params": {"rho": params.rho, "nu": params.nu},
        "lasry_lions_monotone": monotone,
        "lambda_upper_bound": lam,
        "kappa_c": critical_coupling(params),
        "uniqueness_certified": certified,
        "densities": [],
    }
    paths = list(sc.raw["criteria"]["densities"]) + list(args.densities or [])
    for path in paths:
        grid, m = measures.read_density_csv(path)
        res = heat_flow_criterion(grid, kernel, params, m)
        verdict = "passes (cannot exclude)" if res.passes else "fails: not a stationary equilibrium"
        lines.append(f"{path}: heat-flow criterion lhs {_fmt(res.lhs)} vs rhs {_fmt(res.rhs)} {verdict}")
        report["densities"].append({"path": str(path), "lhs": res.lhs, "rhs": res.rhs, "passes": res.passes})
    print("\n".join(lines))
    _atomic_write(sc.out_dir / "criteria.json", _json_text(report))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------


def _sweep_point(task):
    sc, kappa, seed = task
    kernel = sc.kernel_for(kappa)
    config = StationaryConfig(**{**sc.stationary.__dict__, "seeds": _seeds(sc.grid, seed)})
    sols = solve_stationary_mfg(sc.grid, kernel, sc.params, config)
    converged = [s for s in sols if s.converged]
    q1 = max((_q1(sc.grid, s.m) for s in converged), default=float("nan"))
    return kappa, q1, len(converged), all(s.converged for s in sols)


def cmd_sweep(sc: Scenario, args):
    kappas = args.kappas if args.kappas is not None else sc.kappas
    if not kappas:
        raise ConfigError("sweep needs at least one kappa value (use --kappas K [K ...] or sweep.kappas)")
    if any(not k > 0 for k in kappas):
        raise ConfigError("sweep kappa values must be > 0")
    tasks = [(sc, float(k), args.seed) for k in kappas]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = [(repr(k), repr(q), n, int(ok)) for k, q, n, ok in results]
    path = sc.out_dir / "sweep.csv"
    _atomic_write(path, _csv_text(("kappa", "max_q1", "solutions", "all_converged"), rows))
    for k, q, n, ok in results:
        print(f"kappa {k:g}: max q1 {q:.6g} over {n} solution(s){'' if ok else ' (some seeds unconverged)'}")
    print(f"sweep written to {path}")
    return EXIT_OK if all(r[3] for r in results) else EXIT_NUMERIC


# -- verify -------------------------------------------------------------------


def cmd_verify(sc: Scenario, args):
    out = sc.out_dir / "verify"
    out.mkdir(parents=True, exist_ok=True)
    results = oracles.run_suite(seed=args.seed, out_dir=out)
    oracles.write_junit(out / "junit.xml", results)
    text = oracles.summary_text(results)
    _atomic_write(out / "summary.txt", text)
    print(text, end="")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "stationary": cmd_stationary,
    "evolve": cmd_evolve,
    "criteria": cmd_criteria,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML or JSON scenario file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides outputs.directory)")
    common.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    common.add_argument("--kappa", type=float, help="use the Kuramoto kernel with this coupling")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="torusmfg", description="Discounted mean-field games on the torus.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stationary", parents=[common], help="multi-start stationary equilibria")
    sub.add_parser("evolve", parents=[common], help="time-dependent solve with diagnostics")
    p = sub.add_parser("criteria", parents=[common], help="uniqueness and heat-flow criteria")
    p.add_argument("densities", nargs="*", metavar="DENSITY_CSV")
    p = sub.add_parser("sweep", parents=[common], help="bifurcation sweep over kappa")
    p.add_argument("--kappas", type=float, nargs="*", metavar="K", help="coupling values")
    sub.add_parser("verify", parents=[common], help="run the oracle suite")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.out:
        overrides["outputs"] = {"directory": args.out}
    if args.kappa is not None:
        overrides["kernel"] = {"preset": "kuramoto", "kappa": args.kappa}
    try:
        cfg = load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        sc = Scenario.from_dict(cfg)
        return COMMANDS[args.command](sc, args)
    except (ConfigError, DegenerateDensityError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"torusmfg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"torusmfg: did not converge: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TorusMFGError as exc:
        kind = EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_NUMERIC
        print(f"torusmfg: error: {exc}", file=sys.stderr)
        return kind


if __name__ == "__main__":
    sys.exit(main())
