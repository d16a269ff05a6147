"""Command-line front end: ``freqpf solve|validate|sweep|bench``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import caseio
from .network import ValidationError, validate
from .solver import SolverOptions, flat_start
from .staged import (
    ConvergenceError,
    EventError,
    LoadScale,
    apply_event,
    run_base,
    run_stage1,
    run_stage2,
    run_timeline,
)
from .synthetic import calibrate, synthetic_case

EXIT_OK, EXIT_NONCONVERGED, EXIT_INPUT = 0, 1, 2

logger = logging.getLogger("freqpf")


def _add_solver_flags(p):
    d = SolverOptions()
    p.add_argument("--tol", type=float, default=d.tol)
    p.add_argument("--max-iter", type=int, default=d.max_iter)
    p.add_argument("--step-cap", type=float, default=d.step_cap)
    p.add_argument("--df-step-cap", type=float, default=d.df_step_cap)
    p.add_argument("--smoothing-hz", type=float, default=d.smoothing_hz)


def _options(args, **override):
    kw = dict(tol=args.tol, max_iter=args.max_iter, step_cap=args.step_cap,
              df_step_cap=args.df_step_cap, smoothing_hz=args.smoothing_hz)
    kw.update(override)
    return SolverOptions(**kw)


def _load_case(path):
    if str(path).endswith(".m"):
        return caseio.import_matpower(path)
    return caseio.parse_case(path)


def _solve(case, events, stage, opts):
    """Run the requested stages; returns (results, converged)."""
    if events:
        results = run_timeline(case, events, opts, secondary=stage != "primary")
        return results, all(r.converged for r in results)
    try:
        if stage == "base":
            return [run_base(case, flat_start(case), opts)], True
        s1 = run_stage1(case, flat_start(case), opts)
        if stage == "primary":
            return [s1], True
        return [s1, run_stage2(case, s1, opts)], True
    except ConvergenceError as exc:
        done = [exc.result]
        if exc.result.label.value == "secondary":
            done.insert(0, s1)
        return done, False


def cmd_solve(args):
    case = _load_case(args.case)
    events = caseio.parse_events(args.events) if args.events else []
    results, ok = _solve(case, events, args.stage, _options(args))
    caseio.write_results(results, args.out, timestamp=args.timestamp)
    if args.csv:
        caseio.write_generator_csv(results, args.csv)
    for r in results:
        print(f"t{r.time_index} {r.label.value:9s} converged={r.converged} "
              f"iterations={r.report.iterations} df={r.df:+.6f} Hz "
              f"ace={r.total_ace * r.case.mva_base:+.4f} MW")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_validate(args):
    # validate without raising so every problem is listed
    path = Path(args.case)
    if path.suffix == ".m":
        try:
            caseio.import_matpower(path)
            problems = []
        except ValidationError as exc:
            problems = exc.problems
    else:
        problems = validate(caseio.case_from_dict(caseio._load_json(path)))
    if problems:
        print("\n".join(problems))
        return EXIT_INPUT
    print("ok")
    return EXIT_OK


def _parse_values(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    case = _load_case(args.case)
    events = caseio.parse_events(args.events) if args.events else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    field = args.param.replace("-", "_")
    if field not in SolverOptions.__dataclass_fields__:
        raise ValueError(f"unknown sweep parameter {args.param}")
    rows = []
    status = EXIT_OK
    for value in _parse_values(args.values):
        cast = int if field == "max_iter" else float
        opts = _options(args, **{field: cast(value)})
        results, ok = _solve(case, events, args.stage, opts)
        if not ok:
            status = EXIT_NONCONVERGED
        caseio.write_results(results, out / f"{args.param}={value:g}.json", timestamp=args.timestamp)
        for r in results:
            rows.append([value, f"t{r.time_index}", r.label.value, r.converged,
                         r.report.iterations, repr(r.df),
                         repr(r.total_ace * r.case.mva_base)])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.param, "time", "label", "converged", "iterations", "df_hz", "total_ace_mw"])
        w.writerows(rows)
    return status


def bench(n_buses, seed=0, opts=None, load_step=1.03):
    """Solve both stages of a synthetic grid from flat start; return timings."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    case = calibrate(synthetic_case(n_buses, seed), opts)
    build = time.perf_counter() - t0
    case = apply_event(case, LoadScale(load_step))
    t0 = time.perf_counter()
    s1 = run_stage1(case, flat_start(case), opts)
    s2 = run_stage2(case, s1, opts)
    wall = time.perf_counter() - t0
    iters = s1.report.iterations + s2.report.iterations
    factor_time = s1.report.wall_time + s2.report.wall_time
    return {
        "buses": n_buses,
        "unknowns": s1.state.index.size,
        "seed": seed,
        "converged": s1.converged and s2.converged,
        "build_s": build,
        "wall_s": wall,
        "solver_s": factor_time,
        "iterations": {"primary": s1.report.iterations, "secondary": s2.report.iterations},
        "per_iteration_s": factor_time / max(iters, 1),
        "df_hz": {"primary": s1.df, "secondary": s2.df},
    }


def cmd_bench(args):
    try:
        report = bench(args.buses, args.seed, _options(args))
    except ConvergenceError as exc:
        report = {"buses": args.buses, "converged": False, "error": str(exc)}
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["converged"] else EXIT_NONCONVERGED


def build_parser():
    parser = argparse.ArgumentParser(prog="freqpf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a case (optionally replaying events)")
    p.add_argument("--case", required=True)
    p.add_argument("--events")
    p.add_argument("--stage", choices=["base", "primary", "both"], default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write the generator table as CSV")
    p.add_argument("--timestamp", help=argparse.SUPPRESS)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("validate", help="print the validation report")
    p.add_argument("--case", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sweep", help="solve repeatedly over one solver option")
    p.add_argument("--case", required=True)
    p.add_argument("--events")
    p.add_argument("--stage", choices=["base", "primary", "both"], default="both")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timestamp", help=argparse.SUPPRESS)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time a synthetic meshed grid")
    p.add_argument("--buses", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (caseio.CaseFormatError, ValidationError, EventError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
