"""Command-line interface: ``itr <subcommand>``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ate import aipw_ate, ipw_ate, naive_ate, or_ate
from .calibration import (
    MomentTargets,
    balance_diagnostics,
    read_weights,
    solve_entropy_balance,
    support_overlap,
    write_weights,
)
from .data import SOURCE, TARGET, Schema, covariate_summary, load_dataset
from .exceptions import ConfigError, DataError, ITRError
from .ga import GAConfig
from .glm import DEFAULT_CLIP, fit_linear, fit_nuisance
from .itr import LinearITR, covariate_importance
from .pipeline import (
    PipelineError,
    RunConfig,
    _optimize,
    expand_dotted,
    load_inputs,
    run_pipeline,
    write_balance_csv,
)
from .simulation import SimConfig, simulate, write_simulation
from .value import caipw_value

logger = logging.getLogger("transfer_itr")


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _read_json(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _schema(args, default_population=SOURCE):
    base = {}
    if getattr(args, "schema", None):
        base = _read_json(args.schema)
    overrides = {
        "id": args.id_col,
        "treatment": args.treatment_col,
        "outcome": args.outcome_col,
        "population": args.population_col,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.covariates:
        base["covariates"] = [c.strip() for c in args.covariates.split(",") if c.strip()]
    if args.drop_incomplete:
        base["drop_incomplete"] = True
    base["default_population"] = default_population
    return Schema.from_dict(base)


def _add_schema_args(p):
    g = p.add_argument_group("column roles")
    g.add_argument("--schema", metavar="JSON", help="JSON file with the column-role mapping")
    g.add_argument("--id-col", help="identifier column (default: id)")
    g.add_argument("--treatment-col", help="treatment column (default: treatment)")
    g.add_argument("--outcome-col", help="outcome column (default: outcome)")
    g.add_argument("--population-col", help="population column (default: population)")
    g.add_argument("--covariates", help="comma-separated covariate columns (default: all other columns)")
    g.add_argument("--drop-incomplete", action="store_true",
                   help="drop rows with missing covariates instead of failing")


def _add_nuisance_args(p):
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP, help="propensity clipping level (default 0.01)")
    p.add_argument("--arm-specific", action="store_true", help="fit one outcome model per arm")


def _load_pair(args):
    schema = _schema(args)
    cfg = RunConfig(source=args.source, target=getattr(args, "target", None), schema=schema)
    return load_inputs(cfg)


def _ga_config(args):
    d = {}
    if args.config:
        raw = expand_dotted(_read_json(args.config))
        d = dict(raw.get("ga", raw))
    if args.seed is not None:
        d["seed"] = args.seed
    for key in ("population_size", "generations", "restarts"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return GAConfig.from_dict(d)


def cmd_simulate(args):
    d = {}
    if args.config:
        raw = expand_dotted(_read_json(args.config))
        d = dict(raw.get("sim", raw))
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n_general is not None:
        d["n_general"] = args.n_general
    if args.n_target is not None:
        d["n_target"] = args.n_target
    sim = simulate(SimConfig.from_dict(d))
    paths = write_simulation(sim, args.out)
    meta = json.loads(Path(paths["meta"]).read_text(encoding="utf-8"))
    meta["files"] = {k: v for k, v in paths.items() if k != "meta"}
    _emit(meta)


def cmd_calibrate(args):
    src, tgt = _load_pair(args)
    if tgt.n == 0:
        raise DataError("no target rows")
    X = np.asarray(src.X)
    targets = MomentTargets.from_array(tgt.X, order=args.moments, names=src.covariate_names)
    cw = solve_entropy_balance(X, targets, tol=args.tol, max_iter=args.max_iter)
    write_weights(args.out, src.ids, cw.weights)
    balance = balance_diagnostics(X, cw.weights, targets)
    if args.plot_data:
        Path(args.plot_data).mkdir(parents=True, exist_ok=True)
        write_balance_csv(Path(args.plot_data) / "balance.csv", balance.to_rows())
    _emit({
        "weights_file": str(args.out),
        "weights": {k: v for k, v in cw.to_dict().items() if k != "dual"},
        "weight_sum": float(cw.weights.sum()),
        "targets": targets.to_dict(),
        "balance": balance.to_dict(),
        "overlap": support_overlap(X, tgt.X, list(src.covariate_names)),
    })


def cmd_estimate(args):
    schema = _schema(args)
    cfg = RunConfig(source=args.source, schema=schema)
    src, _ = load_inputs(cfg)
    X, a, y = src.estimation_arrays()
    names = list(src.covariate_names)
    nm = fit_nuisance(X, a, y, clip=args.clip, names=names)
    pi = nm.pi_hat(X)
    m1 = fit_linear(X[a == 1], y[a == 1], names=names)
    m0 = fit_linear(X[a == 0], y[a == 0], names=names)
    _emit({
        "naive": naive_ate(a, y).to_dict(),
        "ipw": ipw_ate(a, y, pi).to_dict(),
        "or": or_ate(m1, m0, X=X).to_dict(),
        "aipw": aipw_ate(a, y, pi, m1, m0, X=X).to_dict(),
        "n_source": int(len(y)),
        "clip": args.clip,
    })


def _weights_for(args, src, tgt, X):
    if args.weights:
        ids, w = read_weights(args.weights)
        lookup = dict(zip(ids, w))
        missing = [i for i in src.ids if i not in lookup]
        if missing:
            raise DataError(f"weights file lacks {len(missing)} source ids, e.g. {missing[:3]}")
        return np.array([lookup[i] for i in src.ids])
    if tgt.n:
        targets = MomentTargets.from_array(tgt.X, order=args.moments, names=src.covariate_names)
        return solve_entropy_balance(X, targets).weights
    return None


def cmd_value(args):
    rule = LinearITR.from_dict(_read_json(args.rule))
    src, tgt = _load_pair(args)
    if tuple(rule.covariate_names) != tuple(src.covariate_names):
        raise DataError(
            f"rule covariates {list(rule.covariate_names)} do not match data {list(src.covariate_names)}"
        )
    X, a, y = src.estimation_arrays()
    w = _weights_for(args, src, tgt, X)
    nm = fit_nuisance(X, a, y, clip=args.clip, arm_specific=args.arm_specific,
                      names=list(src.covariate_names))
    est = caipw_value(rule, X, a, y, w, nm.pi_hat(X), nm.m_hat(X))
    _emit(est.to_dict())


def cmd_optimize(args):
    src, tgt = _load_pair(args)
    X, a, y = src.estimation_arrays()
    names = list(src.covariate_names)
    ga = _ga_config(args)
    w = None if args.unweighted else _weights_for(args, src, tgt, X)
    if w is None and not args.unweighted:
        raise DataError("no target rows or weights given; pass --target, --weights or --unweighted")
    nm = fit_nuisance(X, a, y, clip=args.clip, arm_specific=args.arm_specific, names=names)
    result, rule = _optimize(X, a, y, w, nm.pi_hat(X), nm.m_hat(X), ga, names)
    if args.rule_out:
        rule.to_json(args.rule_out)
    if args.plot_data:
        Path(args.plot_data).mkdir(parents=True, exist_ok=True)
        lines = ["step,best_value", *(f"{g},{v!r}" for g, v in enumerate(result.history))]
        (Path(args.plot_data) / "ga_history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit({
        "ga": result.to_dict(),
        "rule": rule.to_dict(),
        "inequality": rule.inequality(),
        "weighted": w is not None,
    })


def cmd_importance(args):
    rule = LinearITR.from_dict(_read_json(args.rule))
    ds = load_dataset(args.data, _schema(args, default_population=TARGET))
    pop = None if args.population == "all" else args.population
    summary = covariate_summary(ds, pop)
    ranking = covariate_importance(rule, summary)
    _emit([{"name": n, "adjusted_coefficient": v} for n, v in ranking])


def cmd_run(args):
    d = _read_json(args.config) if args.config else {}
    cfg = RunConfig.from_dict(d)
    updates = {}
    if args.source:
        updates["source"] = args.source
    if args.target:
        updates["target"] = args.target
    if args.out:
        updates["output_dir"] = args.out
    if args.plot_data:
        updates["plot_data"] = True
    if args.no_unweighted:
        updates["unweighted"] = False
    if args.seed is not None:
        updates["seed"] = args.seed
    if updates:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **updates})
    try:
        report = run_pipeline(cfg)
    except PipelineError as exc:
        print(f"itr run: {exc}", file=sys.stderr)
        return exc.exit_code
    print(report["weighted"]["inequality"])
    print(f"report written to {Path(cfg.output_dir) / 'report.json'}", file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="itr",
        description="Calibrated transfer learning of linear individualized treatment rules.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate the two-covariate simulation study data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config (SimConfig keys, optionally under 'sim')")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-general", type=int)
    p.add_argument("--n-target", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="entropy-balancing weights for source rows")
    p.add_argument("--source", required=True, help="source CSV")
    p.add_argument("--target", help="target CSV (or use a population column in --source)")
    p.add_argument("--out", required=True, help="weights CSV to write (id,weight)")
    p.add_argument("--moments", type=int, choices=(1, 2), default=1)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--plot-data", metavar="DIR", help="write balance.csv for plotting")
    _add_schema_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate", help="naive, IPW, OR and AIPW treatment effect estimates")
    p.add_argument("--source", required=True, help="source CSV with treatment and outcome")
    _add_nuisance_args(p)
    _add_schema_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("value", help="calibrated AIPW value of a rule")
    p.add_argument("--rule", required=True, help="rule JSON {covariate_names, eta}")
    p.add_argument("--source", required=True)
    wg = p.add_mutually_exclusive_group()
    wg.add_argument("--target", help="target CSV; weights are computed by entropy balancing")
    wg.add_argument("--weights", help="weights CSV (id,weight) over source rows")
    p.add_argument("--moments", type=int, choices=(1, 2), default=1)
    _add_nuisance_args(p)
    _add_schema_args(p)
    p.set_defaults(func=cmd_value)

    p = sub.add_parser("optimize", help="search the value-maximizing linear rule")
    p.add_argument("--source", required=True)
    wg = p.add_mutually_exclusive_group()
    wg.add_argument("--target", help="target CSV for calibration weights")
    wg.add_argument("--weights", help="weights CSV (id,weight)")
    wg.add_argument("--unweighted", action="store_true", help="uniform weights over source rows")
    p.add_argument("--moments", type=int, choices=(1, 2), default=1)
    p.add_argument("--config", help="JSON with GA settings (keys under 'ga' or 'ga.<field>')")
    p.add_argument("--seed", type=int)
    p.add_argument("--population-size", dest="population_size", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--rule-out", help="write the best rule JSON here")
    p.add_argument("--plot-data", metavar="DIR", help="write ga_history.csv for plotting")
    _add_nuisance_args(p)
    _add_schema_args(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("importance", help="rank rule covariates by coefficient x sd")
    p.add_argument("--rule", required=True)
    p.add_argument("--data", required=True, help="CSV whose covariate sds scale the coefficients")
    p.add_argument("--population", choices=("target", "source", "all"), default="target")
    _add_schema_args(p)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("run", help="full pipeline from a JSON run config")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="seed for every stochastic component")
    p.add_argument("--plot-data", action="store_true", help="also write tidy CSVs for plotting")
    p.add_argument("--no-unweighted", action="store_true", help="skip the uniform-weight comparison")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"itr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ITRError, ValueError, OSError) as exc:
        print(f"itr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
