"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 conditioning
starvation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import casestudy
from .design import (BinaryTrialData, NormalEndpointSpec, TwoStageDesign,
                     interim_p_threshold, obf_constant)
from .estimators import ESTIMATORS, estimate_outcome, observe_binary
from .numerics import SolverError
from .serialize import csv_text, dumps, load_schema, manifest, write_text
from .simulation import (GENERATOR_NAME, Scenario, StarvationError, bias_sweep,
                         bootstrap_se, export_histogram, run_scenario)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_STARVATION = 4


class InputError(ValueError):
    pass


def bundled_path(name: str) -> str:
    return str(resources.files("gsdest").joinpath("data", name))


def _load_json(path: str, schema_name: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: cannot read file ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise InputError(f"{path}: field '{where}': {err.message}")
    return doc


def load_data(path: str) -> BinaryTrialData:
    doc = _load_json(path, "data.schema.json")

    def pair(stage, arm):
        a = doc[stage][arm]
        return a["successes"], a["n"]

    try:
        return BinaryTrialData.from_counts(
            (pair("interim", "control"), pair("interim", "treatment")),
            (pair("final", "control"), pair("final", "treatment")))
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_boundaries(path: str) -> tuple[float, float]:
    doc = _load_json(path, "design.schema.json")
    if "e1" in doc:
        return float(doc["e1"]), float(doc["e2"])
    f = doc["interim_fraction"]
    c = obf_constant(doc["alpha"], math.sqrt(f))
    return c / math.sqrt(f), c


def _params(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _argv_or_sys(argv):
    return list(sys.argv[1:] if argv is None else argv)


# ---------------------------------------------------------------------------
# commands

def cmd_estimate(args, argv) -> int:
    data = load_data(args.data)
    e1, e2 = load_boundaries(args.design)
    outcome = observe_binary(data, TwoStageDesign(e1, e2, 1.0, 2.0))
    es = estimate_outcome(outcome)
    se = None
    if args.bootstrap_se:
        if args.theta_assumed is None:
            raise InputError("--bootstrap-se requires --theta-assumed")
        se = bootstrap_se(outcome.design, args.theta_assumed, args.bootstrap_se, args.seed)
    rel = es.relative_differences()
    d = outcome.design
    doc = {
        "manifest": manifest("estimate", argv, _params(args),
                             seed=args.seed if args.bootstrap_se else None,
                             generator=GENERATOR_NAME if args.bootstrap_se else None),
        "outcome": {"stopped_stage": outcome.stopped_stage, "z1": outcome.z1, "z2": outcome.z2,
                    "i1": d.i1, "i2": d.i2, "e1": d.e1, "e2": d.e2},
        "estimates": {
            name: {"value": getattr(es, name),
                   "relative_difference_percent": None if name == "mle_overall" else rel[name],
                   "se": None if se is None else se[name]}
            for name in ESTIMATORS
        },
    }
    write_text(dumps(doc), args.out)
    return EXIT_OK


def _hist_rows(hist, names):
    rows = [{"kind": "underflow", "bin_lo": -math.inf, "bin_hi": float(hist.bin_edges[0]),
             **{n: hist.underflow[n] for n in names}}]
    for j in range(hist.bin_edges.size - 1):
        rows.append({"kind": "bin", "bin_lo": float(hist.bin_edges[j]),
                     "bin_hi": float(hist.bin_edges[j + 1]),
                     **{n: int(hist.counts[n][j]) for n in names}})
    rows.append({"kind": "overflow", "bin_lo": float(hist.bin_edges[-1]), "bin_hi": math.inf,
                 **{n: hist.overflow[n] for n in names}})
    return rows


def _hist_csv(hist, names, run_manifest) -> str:
    rows = _hist_rows(hist, names)
    for r in rows:
        for key in ("bin_lo", "bin_hi"):
            if math.isinf(r[key]):
                r[key] = "-inf" if r[key] < 0 else "inf"
    return csv_text(rows, ["kind", "bin_lo", "bin_hi", *names], run_manifest)


def _edges(args) -> np.ndarray:
    if not args.hist_min < args.hist_max or args.bins < 1:
        raise InputError("histogram needs --hist-min < --hist-max and --bins >= 1")
    return np.linspace(args.hist_min, args.hist_max, args.bins + 1)


def cmd_simulate(args, argv) -> int:
    try:
        design = TwoStageDesign(args.e1, args.e2, args.i1, args.i2)
        scenario = Scenario(args.theta, design, args.reps, args.seed, args.conditioning)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    want_records = bool(args.records_out or args.hist_out)
    run = run_scenario(scenario, args.workers, keep_records=want_records)
    m = manifest("simulate", argv, _params(args), seed=args.seed, generator=GENERATOR_NAME)
    write_text(dumps({"manifest": m, "summary": run.summary.to_dict()}), args.out)
    if args.records_out:
        r = run.records
        rows = [{"replicate": int(r["index"][i]), "z1": r["z1"][i],
                 "stopped_stage": int(r["stopped_stage"][i]), "z2": r["z2"][i],
                 **{n: r[n][i] for n in ESTIMATORS}} for i in range(r["z1"].size)]
        write_text(csv_text(rows, ["replicate", "z1", "stopped_stage", "z2", *ESTIMATORS], m),
                   args.records_out)
    if args.hist_out:
        hist = export_histogram(run.records, _edges(args))
        write_text(_hist_csv(hist, ESTIMATORS, m), args.hist_out)
    return EXIT_OK


SWEEP_COLUMNS = ["n", "theta", "bias_stop_stage1", "bias_continue_stage2",
                 "bias_unconditional", "prob_stop"]
MC_COLUMNS = ["mc_bias_stop_stage1", "mc_bias_continue_stage2", "mc_bias_unconditional",
              "mc_prob_stop", "mc_n_stop", "mc_n_continue"]


def cmd_sweep(args, argv) -> int:
    try:
        n_list = [int(x) for x in args.n_list.split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"--n-list must be comma-separated integers: {args.n_list!r}") from exc
    if not n_list:
        raise InputError("--n-list is empty")
    if args.theta_steps < 1 or (args.theta_steps > 1 and not args.theta_min < args.theta_max):
        raise InputError("need --theta-steps >= 1 and --theta-min < --theta-max")
    if not 0 < args.alpha < 0.5:
        raise InputError("--alpha must lie in (0, 0.5)")
    try:
        specs = [NormalEndpointSpec(n, args.sd, 0.5, args.interim_fraction) for n in n_list]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    grid = np.linspace(args.theta_min, args.theta_max, args.theta_steps)
    mc = args.mc_reps if args.mc_check else 0
    rows = bias_sweep(specs, args.alpha, grid, mc_reps=mc, seed=args.seed)
    m = manifest("sweep", argv, _params(args), seed=args.seed if mc else None,
                 generator=GENERATOR_NAME if mc else None)
    cols = SWEEP_COLUMNS + (MC_COLUMNS if mc else [])
    write_text(csv_text(rows, cols, m), args.out)
    return EXIT_OK


def cmd_boundaries(args, argv) -> int:
    if not 0 < args.alpha < 0.5:
        raise InputError(f"--alpha must lie in (0, 0.5), got {args.alpha}")
    if not 0 < args.interim_fraction < 1:
        raise InputError("--interim-fraction must lie in (0, 1)")
    rho = math.sqrt(args.interim_fraction)
    c = obf_constant(args.alpha, rho)
    design = TwoStageDesign(c / rho, c, args.interim_fraction, 1.0)
    doc = {
        "manifest": manifest("boundaries", argv, _params(args)),
        "alpha": args.alpha,
        "interim_fraction": args.interim_fraction,
        "C": c,
        "e1": design.e1,
        "e2": design.e2,
        "interim_p_threshold": interim_p_threshold(design),
    }
    write_text(dumps(doc), args.out)
    return EXIT_OK


def cmd_case_study(args, argv) -> int:
    m = manifest("case-study", argv, _params(args), seed=args.seed, generator=GENERATOR_NAME)
    if args.which == "figure2-data":
        hist, _ = casestudy.figure2_histograms(args.reps, args.seed, workers=args.workers)
        write_text(_hist_csv(hist, ESTIMATORS, m), args.out)
        return EXIT_OK
    if args.which == "table4":
        rows = casestudy.table4(args.bootstrap_reps, args.seed)
    elif args.which == "table5":
        rows = casestudy.table5(args.reps, args.seed, args.workers)
    else:
        rows = casestudy.table6(args.reps, args.seed, args.workers)
    if args.format == "csv":
        cols = list(dict.fromkeys(k for r in rows for k in r))
        write_text(csv_text(rows, cols, m), args.out)
    else:
        write_text(dumps({"manifest": m, "table": args.which, "rows": rows}), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _uint64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsdest", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="all point estimates for observed binary data")
    e.add_argument("--design", default=bundled_path("musec_design.json"),
                   help="design JSON (default: bundled MUSEC boundaries)")
    e.add_argument("--data", default=bundled_path("musec_data.json"),
                   help="data JSON (default: bundled MUSEC counts)")
    e.add_argument("--out", default=None, help="output JSON path (default: stdout)")
    e.add_argument("--bootstrap-se", type=int, default=0, metavar="N",
                   help="add parametric-bootstrap SEs from N replicates")
    e.add_argument("--theta-assumed", type=float, default=None)
    e.add_argument("--seed", type=_uint64, default=1)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo over the canonical joint distribution")
    s.add_argument("--theta", type=float, required=True)
    s.add_argument("--i1", type=float, required=True)
    s.add_argument("--i2", type=float, required=True)
    s.add_argument("--e1", type=float, required=True)
    s.add_argument("--e2", type=float, required=True)
    s.add_argument("--reps", type=int, default=100_000)
    s.add_argument("--seed", type=_uint64, default=1)
    s.add_argument("--conditioning", choices=["all", "stage2_only", "stage1_only"], default="all")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None, help="summary JSON path (default: stdout)")
    s.add_argument("--records-out", default=None, help="per-replicate CSV")
    s.add_argument("--hist-out", default=None, help="histogram CSV")
    s.add_argument("--bins", type=int, default=200)
    s.add_argument("--hist-min", type=float, default=-0.2)
    s.add_argument("--hist-max", type=float, default=0.5)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="bias and stopping-probability curves, normal endpoint")
    w.add_argument("--n-list", default="40,100,620")
    w.add_argument("--alpha", type=float, default=0.05)
    w.add_argument("--sd", type=float, default=1.0)
    w.add_argument("--interim-fraction", type=float, default=0.5)
    w.add_argument("--theta-min", type=float, default=-0.5)
    w.add_argument("--theta-max", type=float, default=1.0)
    w.add_argument("--theta-steps", type=int, default=151)
    w.add_argument("--mc-check", action="store_true", help="add Monte Carlo columns")
    w.add_argument("--mc-reps", type=int, default=100_000)
    w.add_argument("--seed", type=_uint64, default=1)
    w.add_argument("--out", default=None, help="CSV path (default: stdout)")
    w.set_defaults(func=cmd_sweep)

    b = sub.add_parser("boundaries", help="O'Brien-Fleming boundaries for two looks")
    b.add_argument("--alpha", type=float, required=True, help="one-sided level")
    b.add_argument("--sided", choices=["one"], default="one")
    b.add_argument("--interim-fraction", type=float, default=0.5)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_boundaries)

    c = sub.add_parser("case-study", help="reproduce the MUSEC tables")
    c.add_argument("--which", choices=["table4", "table5", "table6", "figure2-data"],
                   required=True)
    c.add_argument("--reps", type=int, default=100_000)
    c.add_argument("--bootstrap-reps", type=int, default=0,
                   help="table4 only: add bootstrap SEs at theta = 0.14")
    c.add_argument("--seed", type=_uint64, default=7)
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--format", choices=["json", "csv"], default="json")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_case_study)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = _argv_or_sys(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except StarvationError as exc:
        print(f"gsdest: {exc}", file=sys.stderr)
        return EXIT_STARVATION
    except SolverError as exc:
        print(f"gsdest: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"gsdest: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
