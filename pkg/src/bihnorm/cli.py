"""Command-line interface.

    bihnorm thresholds --N 5 --p 2.5 --mu 1
    bihnorm solve --N 5 --p 2.5 --mu 1 --c-frac 0.5
    bihnorm energy --load out/solution.json --N 5 --p 2.5 --mu 1 --c 281.65
    bihnorm bubbles --N 5 --p 3 --eps 0.2:0.025:geometric
    bihnorm multiplicity --N 5 --p 2.5 --mu auto --m 3 --c-frac 0.5
    bihnorm sweep --N 5 --p 5 --c 1 --mu 100 150 200 --workers 4

Every command accepts --config FILE (YAML) whose keys mirror the long flag
names; flags given on the command line win.  --print-config prints the
resolved configuration and exits.  Output goes to --out, else $BIHNORM_OUT,
else the current directory.

Exit codes: 0 ok, 2 configuration error, 3 non-convergence, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import schemas
from .bubbles import BubbleSpec, fit_orders, ratio_vanishing_check
from .constants import (
    ProblemParams,
    QuadratureError,
    RegimeError,
    StagnationWarning,
    best_constants,
    critical_exponents,
    thresholds,
)
from .functional import FiberError, energy, fiber_coefficients, fiber_curve
from .grid import RadialField, make_grid
from .solvers import (
    ConvergenceError,
    SolverConfig,
    genus_family,
    minimize_subcritical,
    mountain_pass_supercritical,
    sweep,
    write_sweep_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
EXIT_INVARIANT = 4
OUT_ENV = "BIHNORM_OUT"

# grid used by the solvers unless overridden: uniform spacing keeps the
# strong residual meaningful at the origin
SOLVE_GRID = {"R": 40.0, "M": 2000, "stretch": 1.0}

DEFAULTS = {
    "N": 5,
    "p": None,
    "mu": 1.0,
    "c": 1.0,
    "c_frac": None,
    "grad_term": True,
    "R": SOLVE_GRID["R"],
    "M": SOLVE_GRID["M"],
    "stretch": SOLVE_GRID["stretch"],
    "seed": 0,
    "out": None,
    "format": "json",
    "max_iters": 5000,
    "grad_tol": 1e-7,
    "pohozaev_tol": 1e-6,
    "seed_width": 1.0,
}


class ConfigError(ValueError):
    pass


# helpers ----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, payload: dict, schema: str | None = None) -> dict:
    payload = _jsonable(payload)
    if schema is not None:
        schemas.validate(payload, schema)
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def _parse_eps(spec: str) -> list[float]:
    """'0.2:0.025:geometric' (halving) or '0.2:0.025:geometric:8' or '0.2,0.1,0.05'."""
    if "," in spec or ":" not in spec:
        return [float(x) for x in spec.split(",") if x.strip()]
    parts = spec.split(":")
    if len(parts) not in (3, 4) or parts[2] != "geometric":
        raise ConfigError(f"bad --eps {spec!r}; use start:stop:geometric[:count] or a comma list")
    hi, lo = float(parts[0]), float(parts[1])
    if not hi > lo > 0:
        raise ConfigError("--eps needs start > stop > 0")
    if len(parts) == 4:
        n = int(parts[3])
    else:
        n = int(round(np.log2(hi / lo))) + 1
    return [float(x) for x in np.geomspace(hi, lo, n)]


# configuration ----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("problem")
    g.add_argument("--N", type=int, help="dimension (>= 5)")
    g.add_argument("--p", type=float, help="exponent, 2 < p < 4*")
    g.add_argument("--c", type=float, help="prescribed mass")
    g.add_argument("--c-frac", dest="c_frac", type=float, help="set c to this fraction of c* (subcritical p)")
    g.add_argument("--no-grad-term", dest="grad_term", action="store_const", const=False, help="drop the gradient term (functional I_0)")
    g = p.add_argument_group("grid and solver")
    g.add_argument("--R", type=float, help="truncation radius")
    g.add_argument("--M", type=int, help="number of grid intervals")
    g.add_argument("--stretch", type=float, help="grid grading exponent")
    g.add_argument("--seed", type=int, help="RNG seed")
    g.add_argument("--max-iters", dest="max_iters", type=int)
    g.add_argument("--grad-tol", dest="grad_tol", type=float)
    g.add_argument("--pohozaev-tol", dest="pohozaev_tol", type=float)
    g.add_argument("--seed-width", dest="seed_width", type=float)
    g = p.add_argument_group("output")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
    g.add_argument("--format", choices=["json", "csv"])
    g.add_argument("--config", help="YAML file with default values for any flag")
    g.add_argument("--print-config", dest="print_config", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bihnorm",
        description="Normalized solutions of the biharmonic Schroedinger equation with Sobolev critical growth.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 non-convergence, 4 invariant violation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("thresholds", help="best constants and closed-form thresholds")
    _common(p)
    p.add_argument("--mu", type=float)

    p = sub.add_parser("solve", help="compute a normalized solution")
    _common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--regime", choices=["auto", "subcritical", "supercritical"])

    p = sub.add_parser("energy", help="energy breakdown of a stored field")
    _common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--load", help="field file (.json or .npz)")
    p.add_argument("--fiber-range", dest="fiber_range", type=float, help="also emit I(H(u,s)) for |s| <= this value")

    p = sub.add_parser("bubbles", help="bubble asymptotics and the ratio argument")
    _common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--eps", help="start:stop:geometric[:count] or comma list")

    p = sub.add_parser("multiplicity", help="disjoint-bump family and mu_m")
    _common(p)
    p.add_argument("--mu", help="number or 'auto'")
    p.add_argument("--m", type=int)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("sweep", help="solve over a parameter lattice")
    _common(p)
    p.add_argument("--mu", type=float, nargs="+")
    p.add_argument("--p-list", dest="p_list", type=float, nargs="+", help="several exponents")
    p.add_argument("--c-list", dest="c_list", type=float, nargs="+", help="several masses")
    p.add_argument("--workers", type=int)
    return ap


COMMAND_DEFAULTS = {
    "thresholds": {},
    "solve": {"regime": "auto"},
    "energy": {"load": None, "fiber_range": None},
    "bubbles": {"eps": "0.2:0.025:geometric", "mu": 50.0},
    "multiplicity": {"mu": "auto", "m": 3, "samples": 10_000},
    "sweep": {"workers": 1, "p_list": None, "c_list": None},
}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS[args.command])
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        unknown = set(loaded) - set(cfg) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    for k, v in vars(args).items():
        if k in ("config", "print_config", "command") or v is None:
            continue
        cfg[k] = v
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUT_ENV, ".")
    cfg["command"] = args.command
    return cfg


def problem(cfg: dict, mu=None) -> ProblemParams:
    if cfg.get("p") is None:
        raise ConfigError("--p is required")
    mu = cfg["mu"] if mu is None else mu
    if isinstance(mu, list):
        mu = mu[0]
    prm = ProblemParams(int(cfg["N"]), float(cfg["p"]), float(mu), float(cfg["c"]), bool(cfg["grad_term"]))
    if cfg.get("c_frac") is not None:
        th = thresholds(prm)
        if th.c_star is None:
            raise ConfigError("--c-frac needs a mass-subcritical exponent (c* undefined)")
        prm = prm.replace(c=float(cfg["c_frac"]) * th.c_star)
    return prm


def solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(
        max_iters=int(cfg["max_iters"]),
        grad_tol=float(cfg["grad_tol"]),
        pohozaev_tol=float(cfg["pohozaev_tol"]),
        seed=int(cfg["seed"]),
        seed_width=float(cfg["seed_width"]),
    )


def grid_for(cfg: dict, N: int):
    return make_grid(N, float(cfg["R"]), int(cfg["M"]), float(cfg["stretch"]))


# commands ---------------------------------------------------------------------


def cmd_thresholds(cfg: dict) -> int:
    prm = problem(cfg)
    consts = best_constants(prm.N, prm.p)
    th = thresholds(prm, consts)
    out = Path(cfg["out"])
    d = th.to_dict()
    if cfg["format"] == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["symbol", "value"])
        for k, v in d.items():
            if k != "provenance":
                w.writerow([k, json.dumps(_jsonable(v))])
        atomic_write(out / "thresholds.csv", buf.getvalue())
    else:
        write_json(out / "thresholds.json", d, "thresholds")
    for k, v in d.items():
        if k != "provenance":
            print(f"{k:>10}  {v}")
    return EXIT_OK


def _report_exit(converged: bool, violations: list[str], message: str) -> int:
    if not converged:
        print(f"not converged: {message}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    if violations:
        for v in violations:
            print(f"invariant violated: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_solve(cfg: dict) -> int:
    prm = problem(cfg)
    ex = critical_exponents(prm)
    regime = cfg["regime"]
    if regime == "auto":
        regime = "supercritical" if ex.regime == "supercritical" else "subcritical"
    grid = grid_for(cfg, prm.N)
    scfg = solver_config(cfg)
    if regime == "subcritical":
        rep = minimize_subcritical(prm, grid, scfg)
    else:
        rep = mountain_pass_supercritical(prm, grid, scfg)
    out = Path(cfg["out"])
    write_json(out / "solution.json", rep.u.to_dict(), "radial_field")
    d = rep.to_dict(include_field=False)
    d["config"] = {k: v for k, v in cfg.items() if k != "out"}
    write_json(out / "report.json", d, "solver_report")
    # data-only curves: energy along the descent and along the fiber of the result
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["iteration", "I"])
    w.writerows(enumerate(rep.trace))
    atomic_write(out / "trace.csv", buf.getvalue())
    s = np.linspace(-2.0, 2.0, 81)
    vals = fiber_curve(fiber_coefficients(rep.u, prm), prm, s)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["s", "I"])
    w.writerows(zip(s.tolist(), vals.tolist()))
    atomic_write(out / "fiber.csv", buf.getvalue())
    print(f"regime={rep.regime} I={rep.I:.12g} P={rep.P:.3e} lambda={rep.lam:.10g} residual={rep.residual:.3e} converged={rep.converged}")
    if rep.message:
        print(rep.message)
    return _report_exit(rep.converged, rep.invariant_violations(), rep.message)


def cmd_energy(cfg: dict) -> int:
    if not cfg.get("load"):
        raise ConfigError("energy needs --load FILE")
    try:
        u = RadialField.load(cfg["load"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load field: {exc}") from exc
    prm = problem(cfg)
    if prm.N != u.grid.N:
        raise ConfigError(f"field has N={u.grid.N} but --N {prm.N}")
    bd = energy(u, prm)
    fc = fiber_coefficients(u, prm)
    d = {
        "schema": "bihnorm.energy",
        "version": 1,
        "params": asdict(prm),
        "source": str(cfg["load"]),
        "mass": u.grid.integrate(u.values**2),
        "coefficients": asdict(fc),
        "breakdown": bd.to_dict(),
    }
    out = Path(cfg["out"])
    write_json(out / "energy.json", d, "energy")
    if cfg.get("fiber_range"):
        s = np.linspace(-cfg["fiber_range"], cfg["fiber_range"], 201)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["s", "I"])
        w.writerows(zip(s.tolist(), fiber_curve(fc, prm, s).tolist()))
        atomic_write(out / "energy_fiber.csv", buf.getvalue())
    print(f"I={bd.I:.15g} P={bd.P:.6e} lambda={bd.lambda_est:.12g} mass={d['mass']:.15g}")
    return EXIT_OK


def cmd_bubbles(cfg: dict) -> int:
    prm = problem(cfg)
    eps = _parse_eps(str(cfg["eps"]))
    if len(eps) < 4:
        raise ConfigError("need at least 4 values of epsilon")
    fits = fit_orders(prm, eps)
    ratio = None
    if critical_exponents(prm).regime == "supercritical":
        ratio = ratio_vanishing_check(prm, eps).to_dict()
    d = {
        "schema": "bihnorm.bubbles",
        "version": 1,
        "params": asdict(prm),
        "cutoff": asdict(BubbleSpec(1.0)) | {"epsilon": None},
        "fits": [f.to_dict() for f in fits],
        "ratio": ratio,
    }
    out = Path(cfg["out"])
    write_json(out / "bubbles.json", d, "bubbles")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["quantity", "epsilon", "value", "excess"])
    w.writeheader()
    for f in fits:
        w.writerows(f.csv_rows())
    atomic_write(out / "bubbles.csv", buf.getvalue())
    bad = []
    for f in fits:
        print(f"{f.quantity:>12}  order {f.fitted_order:8.4f}  expected {f.expected_order:g}{' (log)' if f.log_factor else ''}  {'pass' if f.passed() else 'FAIL'}")
        if not f.passed():
            bad.append(f.quantity)
    if ratio is not None:
        print(f"ratio decreasing: {ratio['ratio_decreasing']}  combined term negative at smallest eps: {ratio['combined_negative_at_smallest']}")
    return _report_exit(True, bad, "")


def cmd_multiplicity(cfg: dict) -> int:
    mu = cfg["mu"]
    auto = str(mu).lower() == "auto"
    prm = problem(cfg, mu=1.0 if auto else float(mu))
    grid = grid_for(cfg, prm.N)
    fam = genus_family(
        prm, grid, m=int(cfg["m"]), n_samples=int(cfg["samples"]), seed=int(cfg["seed"]), mu_test=None if auto else prm.mu
    )
    d = fam.to_dict()
    d["params"] = asdict(prm)
    d["mu_mode"] = "auto" if auto else "fixed"
    out = Path(cfg["out"])
    write_json(out / "multiplicity.json", d, "multiplicity")
    print(f"mu_1..mu_m = {fam.mu_values}  sup I on T_m at mu={fam.mu_test:.6g}: {fam.sup_I_on_Tm:.6g}")
    bad = []
    if not fam.sup_I_on_Tm < 0:
        bad.append(f"sup I on T_m = {fam.sup_I_on_Tm} is not negative")
    if not fam.max_mass_error <= 1e-12:
        bad.append(f"mass error {fam.max_mass_error}")
    if not fam.max_seminorm < fam.r_star_sq:
        bad.append("a sampled combination leaves V_r(c)")
    return _report_exit(True, bad, "")


def cmd_sweep(cfg: dict) -> int:
    mus = cfg["mu"] if isinstance(cfg["mu"], list) else [cfg["mu"]]
    ps = cfg["p_list"] or ([cfg["p"]] if cfg.get("p") is not None else [])
    cs = cfg["c_list"] or [cfg["c"]]
    ranges = {"N": [int(cfg["N"])], "p": ps, "mu": mus, "c": cs, "include_gradient_term": bool(cfg["grad_term"])}
    recs = sweep(ranges, {"R": cfg["R"], "M": cfg["M"], "stretch": cfg["stretch"]}, solver_config(cfg), int(cfg["workers"]))
    out = Path(cfg["out"])
    buf = io.StringIO()
    write_sweep_csv(recs, buf)
    atomic_write(out / "sweep.csv", buf.getvalue())
    for i, rec in enumerate(recs):
        if rec.report is not None:
            write_json(out / "runs" / f"run_{i:04d}.json", rec.report.to_dict(include_field=False), "solver_report")
    print(buf.getvalue(), end="")
    return EXIT_OK


COMMANDS = {
    "thresholds": cmd_thresholds,
    "solve": cmd_solve,
    "energy": cmd_energy,
    "bubbles": cmd_bubbles,
    "multiplicity": cmd_multiplicity,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(yaml.safe_dump(_jsonable(cfg), sort_keys=True), end="")
            return EXIT_OK
        with warnings.catch_warnings():
            warnings.simplefilter("error", StagnationWarning)
            return COMMANDS[args.command](cfg)
    except (ConfigError, RegimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, FiberError, QuadratureError, StagnationWarning) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    raise SystemExit(main())
