"""Command-line front end: ``qtt-elliptic <subcommand> [flags]``.

Every flag can also be given in a flat ``key = value`` config file
(``--config``); flags on the command line win.  CSV output starts with the
version line ``# qtt-elliptic csv v1``.

Exit codes: 0 converged (or nothing to converge), 2 iteration limit or
stagnation, 1 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import qtt_core as qc
from .contraction import analyze, select_preconditioner
from .fem import CoefficientSpec, EllipticityError, Grid, LoadSpec, assemble_stiffness_qtt, sample_coefficient
from .homogenize_ref import compare, homogenized_coefficient, homogenized_solve
from .qtt_core import io as qtt_io
from .solver import CSV_COLUMNS, SolverConfig, build_problem, dense_solution, solve

CSV_VERSION = "# qtt-elliptic csv v1"
THREADS_ENV = "QTT_ELLIPTIC_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("qtt_elliptic")

CLASS_ALIASES = {
    "constant": "constant",
    "sine": "periodic",
    "periodic": "periodic",
    "modulated": "modulated",
    "four-step": "modulated",
    "4-step": "modulated",
    "exotic": "exotic",
    "piecewise": "piecewise_constant",
    "piecewise_constant": "piecewise_constant",
    "custom": "custom",
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config file


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines, ``#`` comments, keys normalized to underscores."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {}
    for a in parser._actions:
        actions[a.dest] = a
        for opt in a.option_strings:
            if opt.startswith("--"):
                actions[opt[2:].replace("-", "_")] = a
    defaults = {}
    for key, raw in values.items():
        if key in ("config", "command", "help") or key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r} expects a boolean")
            defaults[act.dest] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            val = act.type(raw) if act.type else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"config key {key!r}: {val!r} not in {sorted(act.choices)}")
        defaults[act.dest] = val
    parser.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# argument parsing


def _float_list(s: str) -> list[float]:
    return [float(t) for t in s.replace(";", ",").split(",") if t.strip()]


def _int_list(s: str) -> list[int]:
    out = []
    for part in s.split(","):
        part = part.strip()
        if ":" in part or "-" in part[1:]:
            lo, hi = part.replace("-", ":", 1).split(":")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _rho(s: str):
    return s if s == "auto" else float(s)


def _precond(s: str):
    if s in ("mean", "harmonic_mean", "envelope_average"):
        return s
    return float(s)


def _problem_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("coefficient")
    g.add_argument("--class", dest="coef_class", default="sine", choices=sorted(CLASS_ALIASES))
    g.add_argument("--C", dest="C", type=float, default=2.0)
    g.add_argument("--K", dest="K", type=float, default=64.0)
    g.add_argument("--omega", type=float, default=None, help="angular frequency (overrides K)")
    g.add_argument("--m", type=int, default=3, help="exponent of the exotic oscillator")
    g.add_argument("--steps", default=None, help="modulator steps 'b1:v1,b2:v2,...' (last breakpoint 1)")
    g.add_argument("--steps-file", default=None, help="file with one 'breakpoint value' pair per line")
    g.add_argument("--samples-file", default=None, help="custom coefficient: N midpoint values, one per line")
    g = p.add_argument_group("load")
    g.add_argument("--load", default="constant", choices=["constant", "polynomial", "sine", "custom"])
    g.add_argument("--load-value", type=float, default=1.0)
    g.add_argument("--load-coeffs", type=_float_list, default=None, help="polynomial coefficients c0,c1,...")
    g.add_argument("--load-amplitude", type=float, default=1.0)
    g.add_argument("--load-k", type=float, default=2 * np.pi)
    g.add_argument("--load-phase", type=float, default=0.0)
    g.add_argument("--load-file", default=None, help="custom load: N nodal values, one per line")


def _solver_flags(p: argparse.ArgumentParser, *, level: bool = True) -> None:
    g = p.add_argument_group("solver")
    if level:
        g.add_argument("--L", dest="L", type=int, default=10)
    g.add_argument("--delta", type=float, default=1e-7)
    g.add_argument("--rmax", type=int, default=None)
    g.add_argument("--method", default="psd", choices=["psd", "fixed_point"])
    g.add_argument("--rho", type=_rho, default="auto")
    g.add_argument("--preconditioner", type=_precond, default="mean")
    g.add_argument("--stop-tol", type=float, default=1e-6)
    g.add_argument("--stop-rule", default="residual", choices=["residual", "energy"])
    g.add_argument("--max-iter", type=int, default=50)
    g.add_argument("--stall-window", type=int, default=5)


def _output_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output", "-o", default="-", help="CSV path ('-' for stdout)")
    p.add_argument("--json", dest="json_path", default=None, help="write a JSON summary here ('-' for stderr)")
    p.add_argument("--no-timing", action="store_true", help="write 0 in timing columns (bit-reproducible CSV)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="flat key = value file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qtt-elliptic", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="flat key = value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve and write the convergence history")
    _problem_flags(p)
    _solver_flags(p)
    p.add_argument("--certify", action="store_true", help="also compute majorants and two-sided bounds")
    _output_flags(p)

    p = sub.add_parser("certify", help="per-iteration two-sided error bounds")
    _problem_flags(p)
    _solver_flags(p)
    _output_flags(p)

    p = sub.add_parser("benchmark", help="iterations, time and ranks over a range of levels")
    _problem_flags(p)
    _solver_flags(p, level=False)
    p.add_argument("--L-range", dest="L_range", type=_int_list, default=[13, 14, 15, 16, 17])
    p.add_argument("--classes", default=None, help="comma list of classes (default: --class)")
    p.add_argument("--repeats", type=int, default=3)
    _output_flags(p)

    p = sub.add_parser("contraction", help="optimal step and contraction factor")
    _problem_flags(p)
    p.add_argument("--preconditioner", type=_precond, default="mean")
    _output_flags(p)

    p = sub.add_parser("compare-hom", help="exact versus homogenized solutions over K")
    _problem_flags(p)
    p.add_argument("--L", dest="L", type=int, default=12)
    p.add_argument("--K-list", dest="K_list", type=_float_list, default=[16, 32, 64, 128])
    p.add_argument("--average", default="harmonic", choices=["harmonic", "arithmetic"])
    _output_flags(p)

    p = sub.add_parser("ranks", help="QTT rank profiles of coefficient, stiffness and solution")
    _problem_flags(p)
    _solver_flags(p)
    p.add_argument("--with-solution", action="store_true")
    p.add_argument("--dump", default=None, help="write the coefficient cores to this binary file")
    _output_flags(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config(known.config)
        # find the subcommand parser to receive the defaults
        cmd = next((a for a in argv if a in _subparsers(parser)), None)
        if cmd is None:
            raise ConfigError("a subcommand is required")
        _apply_config(_subparsers(parser)[cmd], values)
    return parser.parse_args(argv)


def _subparsers(parser) -> dict[str, argparse.ArgumentParser]:
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices
    return {}


# ---------------------------------------------------------------------------
# spec construction


def _read_values(path) -> list[float]:
    try:
        return [float(t) for t in Path(path).read_text().split()]
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read values from {path}: {exc}") from None


def _steps(args):
    if args.steps and args.steps_file:
        raise ConfigError("give --steps or --steps-file, not both")
    if args.steps:
        try:
            return [tuple(float(x) for x in part.split(":")) for part in args.steps.split(",") if part.strip()]
        except ValueError:
            raise ConfigError(f"bad --steps {args.steps!r}; expected 'b1:v1,b2:v2,...'") from None
    if args.steps_file:
        vals = _read_values(args.steps_file)
        if len(vals) % 2:
            raise ConfigError("steps file needs 'breakpoint value' pairs")
        return list(zip(vals[::2], vals[1::2]))
    return None


def coefficient_from_args(args, K=None) -> CoefficientSpec:
    kind = CLASS_ALIASES[args.coef_class]
    K = args.K if K is None else K
    omega = args.omega
    steps = _steps(args)
    if kind == "constant":
        return CoefficientSpec.constant(args.C)
    if kind == "periodic":
        return CoefficientSpec.periodic(args.C, K, omega)
    if kind == "modulated":
        return CoefficientSpec.modulated(args.C, K, steps, omega)
    if kind == "exotic":
        return CoefficientSpec.exotic(args.C, K, args.m, steps, omega)
    if kind == "piecewise_constant":
        if steps is None:
            raise ConfigError("piecewise coefficient needs --steps or --steps-file")
        return CoefficientSpec.piecewise_constant(steps)
    if not args.samples_file:
        raise ConfigError("custom coefficient needs --samples-file")
    return CoefficientSpec.custom(_read_values(args.samples_file))


def load_from_args(args) -> LoadSpec:
    if args.load == "constant":
        return LoadSpec.constant(args.load_value)
    if args.load == "polynomial":
        if not args.load_coeffs:
            raise ConfigError("polynomial load needs --load-coeffs")
        return LoadSpec.polynomial(args.load_coeffs)
    if args.load == "sine":
        return LoadSpec.sine(args.load_amplitude, args.load_k, args.load_phase)
    if not args.load_file:
        raise ConfigError("custom load needs --load-file")
    return LoadSpec.from_nodal_samples(_read_values(args.load_file))


def solver_config(args, level=None, **kw) -> SolverConfig:
    return SolverConfig(
        level=args.L if level is None else level,
        delta=args.delta,
        method=args.method,
        rho=args.rho,
        preconditioner=args.preconditioner,
        stop_tol=args.stop_tol,
        max_iter=args.max_iter,
        stop_rule=args.stop_rule,
        record_timing=not args.no_timing,
        rmax=args.rmax,
        stall_window=args.stall_window,
        **kw,
    )


# ---------------------------------------------------------------------------
# output helpers


class _Out:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = sys.stdout if self.path in (None, "-") else open(self.path, "w", encoding="utf-8")
        self.fh.write(CSV_VERSION + "\n")
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not sys.stdout:
            self.fh.close()
        else:
            self.fh.flush()


def _write_json(path, payload) -> None:
    if path is None:
        return
    text = json.dumps(payload, indent=2, default=_json_default)
    if path == "-":
        print(text, file=sys.stderr)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, CoefficientSpec):
        return {"kind": obj.kind, "steps": obj.steps} if obj.kind != "constant" else obj.C
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# subcommands


def run_solve(args, *, certify: bool = False) -> int:
    coef, load = coefficient_from_args(args), load_from_args(args)
    cfg = solver_config(args, certify=certify or getattr(args, "certify", False))
    report = solve(cfg, coef, load)
    with _Out(args.output) as fh:
        if certify:
            fh.write("iter,eta_norm,majorant,err_lower,err_upper,q\n")
            for r in report.history:
                lo, up = r.bounds if r.bounds else (float("nan"), float("nan"))
                eta = r.eta_norm if r.eta_norm is not None else float("nan")
                maj = r.majorant if r.majorant is not None else float("nan")
                fh.write(f"{r.k},{eta:.12g},{maj:.12g},{lo:.12g},{up:.12g},{report.q_used:.12g}\n")
        else:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in report.history:
                fh.write(",".join(r.csv_fields()) + "\n")
    summary = report.summary()
    summary.update(level=cfg.level, delta=cfg.delta, method=cfg.method, a0=report.a0, threads=_threads())
    _write_json(args.json_path, summary)
    log.info("%s after %d iterations", report.stop_reason, report.iterations)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def run_certify(args) -> int:
    return run_solve(args, certify=True)


def run_benchmark(args) -> int:
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    classes = [c.strip() for c in args.classes.split(",")] if args.classes else [args.coef_class]
    for c in classes:
        if c not in CLASS_ALIASES:
            raise ConfigError(f"unknown class {c!r}")
    if any(not 10 <= L <= 20 for L in args.L_range):
        raise ConfigError("benchmark levels must lie in 10..20")
    rows = []
    load = load_from_args(args)
    for c in classes:
        coef = coefficient_from_args(argparse.Namespace(**{**vars(args), "coef_class": c}))
        for L in args.L_range:
            cfg = solver_config(args, level=L)
            per_iter, totals, report = [], [], None
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                problem = build_problem(cfg, coef, load)
                report = solve(cfg, coef, load, problem=problem)
                totals.append((time.perf_counter() - t0) * 1e3)
                its = [r.wall_ms for r in report.history[1:]]
                per_iter.append(statistics.median(its) if its else 0.0)
            timing = not args.no_timing
            rows.append(
                (
                    c,
                    L,
                    report.iterations,
                    int(report.converged),
                    statistics.median(per_iter) if timing else 0.0,
                    statistics.median(totals) if timing else 0.0,
                    qc.average_rank(problem.a),
                    report.history[-1].avg_rank,
                )
            )
    with _Out(args.output) as fh:
        fh.write("class,L,iterations,converged,median_ms_per_iter,median_total_ms,avg_rank_a,avg_rank_u\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]},{row[2]},{row[3]},{row[4]:.3f},{row[5]:.3f},{row[6]:.4g},{row[7]:.4g}\n")
    _write_json(args.json_path, [dict(zip(("class", "L", "iterations", "converged", "ms_per_iter", "total_ms",
                                             "avg_rank_a", "avg_rank_u"), r)) for r in rows])
    return EXIT_OK


def run_contraction(args) -> int:
    coef = coefficient_from_args(args)
    a0 = select_preconditioner(coef, args.preconditioner)
    rep = analyze(coef, a0)
    with _Out(args.output) as fh:
        fh.write("rho_star,q,q_coarse,cond_bound\n")
        fh.write(rep.csv_row() + "\n")
    _write_json(args.json_path, {"rho_star": rep.rho_star, "q": rep.q, "q_coarse": rep.q_coarse,
                                 "cond_bound": rep.cond_bound, "h_lo": rep.h_lo, "h_hi": rep.h_hi, "a0": a0})
    return EXIT_OK


def run_compare_hom(args) -> int:
    grid, load = Grid(args.L), load_from_args(args)
    if args.L > 20:
        raise ConfigError("compare-hom uses dense reference solves; L must be <= 20")
    rows = []
    for K in args.K_list:
        coef = coefficient_from_args(args, K=K)
        a0 = homogenized_coefficient(coef, args.average)
        u_eps = dense_solution(coef, load, grid)
        u0 = homogenized_solve(a0, load, grid)
        rows.append((K, compare(u_eps, u0, coef, load, grid, a0=a0)))
    with _Out(args.output) as fh:
        fh.write("K,l2_diff,h1_diff,residual\n")
        for K, cmp in rows:
            fh.write(cmp.csv_row(f"{K:g}") + "\n")
    _write_json(args.json_path, [{"K": K, **vars(c)} for K, c in rows])
    return EXIT_OK


def run_ranks(args) -> int:
    coef = coefficient_from_args(args)
    grid = Grid(args.L)
    a = sample_coefficient(coef, grid, args.delta)
    A_raw = assemble_stiffness_qtt(a, grid.h)
    A = qc.round_qtt(A_raw, 1e-12)
    rows = [("coefficient", a), ("stiffness_exact", A_raw), ("stiffness", A)]
    if args.with_solution:
        rows.append(("solution", solve(solver_config(args), coef, load_from_args(args)).solution))
    if args.dump:
        qtt_io.save(args.dump, a)
    with _Out(args.output) as fh:
        fh.write("object,avg_rank,max_rank,profile\n")
        for name, x in rows:
            fh.write(f"{name},{qc.average_rank(x):.4g},{x.max_rank},{' '.join(map(str, x.ranks))}\n")
    return EXIT_OK


COMMANDS = {
    "solve": run_solve,
    "certify": run_certify,
    "benchmark": run_benchmark,
    "contraction": run_contraction,
    "compare-hom": run_compare_hom,
    "ranks": run_ranks,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"qtt-elliptic: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _threads()
        return COMMANDS[args.command](args)
    except (ConfigError, EllipticityError, ValueError) as exc:
        print(f"qtt-elliptic: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
