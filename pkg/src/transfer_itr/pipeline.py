"""End-to-end run: load, validate, fit nuisances, calibrate, optimize, evaluate, report."""
from __future__ import annotations

import json
import logging
import time
from importlib import resources
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .ate import aipw_ate, ipw_ate, naive_ate, or_ate
from .calibration import (
    balance_diagnostics,
    solve_entropy_balance,
    support_overlap,
    target_moments,
    MomentTargets,
)
from .data import SOURCE, TARGET, Dataset, Schema, covariate_summary, load_dataset, validate
from .exceptions import ConfigError, DataError, ITRError, SchemaError
from .ga import GAConfig, optimize_itr
from .glm import DEFAULT_CLIP, fit_linear, fit_nuisance
from .itr import LinearITR, covariate_importance, unstandardize_eta
from .simulation import SimConfig
from .value import CAIPWObjective, caipw_value

logger = logging.getLogger(__name__)

TOOL_NAME = "transfer-itr"
SCHEMAS = ("report", "rule", "estimate", "value", "optimize", "importance", "calibrate", "sim_meta")


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package for output ``name`` (see ``SCHEMAS``)."""
    if name not in SCHEMAS:
        raise ValueError(f"unknown schema {name!r}; choose from {SCHEMAS}")
    text = resources.files("transfer_itr").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def expand_dotted(d):
    """Turn ``{"ga.seed": 3}`` style keys into nested dictionaries."""
    out = {}
    for key, value in d.items():
        if isinstance(value, dict):
            value = expand_dotted(value)
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar value")
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


@dataclass(frozen=True)
class NuisanceOptions:
    clip: float = DEFAULT_CLIP
    arm_specific: bool = False
    weighted_nuisance: bool = False


@dataclass(frozen=True)
class CalibrationOptions:
    moments: int = 1
    tol: float = 1e-8
    max_iter: int = 100


@dataclass(frozen=True)
class RunConfig:
    source: Optional[str] = None
    target: Optional[str] = None
    schema: Schema = field(default_factory=Schema)
    nuisance: NuisanceOptions = field(default_factory=NuisanceOptions)
    calibration: CalibrationOptions = field(default_factory=CalibrationOptions)
    ga: GAConfig = field(default_factory=GAConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output_dir: str = "itr_output"
    seed: Optional[int] = None
    unweighted: bool = True
    plot_data: bool = False

    def __post_init__(self):
        if self.nuisance.clip <= 0 or self.nuisance.clip >= 0.5:
            raise ConfigError("nuisance.clip must lie in (0, 0.5)")
        if self.calibration.moments not in (1, 2):
            raise ConfigError("calibration.moments must be 1 or 2")
        if self.seed is not None:
            object.__setattr__(self, "ga", replace(self.ga, seed=int(self.seed)))
            object.__setattr__(self, "sim", replace(self.sim, seed=int(self.seed)))

    @classmethod
    def from_dict(cls, d):
        d = expand_dotted(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "schema" in kw:
                kw["schema"] = Schema.from_dict(kw["schema"])
            if "nuisance" in kw:
                kw["nuisance"] = NuisanceOptions(**kw["nuisance"])
            if "calibration" in kw:
                kw["calibration"] = CalibrationOptions(**kw["calibration"])
            if "ga" in kw:
                kw["ga"] = GAConfig.from_dict(kw["ga"])
            if "sim" in kw:
                kw["sim"] = SimConfig.from_dict(kw["sim"])
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return cls(**kw)

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def to_dict(self):
        return {
            "source": self.source,
            "target": self.target,
            "schema": self.schema.to_dict(),
            "nuisance": asdict(self.nuisance),
            "calibration": asdict(self.calibration),
            "ga": self.ga.to_dict(),
            "sim": self.sim.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "unweighted": self.unweighted,
            "plot_data": self.plot_data,
        }


class PipelineError(ITRError):
    """A pipeline stage failed; carries the stage name and the partial report."""

    def __init__(self, stage, cause, report):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.report = report

    @property
    def exit_code(self):
        return 2 if isinstance(self.cause, ConfigError) else 1


def load_inputs(config: RunConfig):
    """Return ``(source, target)`` datasets from the configured paths."""
    if not config.source:
        raise ConfigError("no source data path configured")
    schema = config.schema
    src_all = load_dataset(config.source, replace(schema, default_population=SOURCE))
    if config.target:
        tgt = load_dataset(config.target, replace(schema, default_population=TARGET))
        tgt = tgt.select(TARGET) if tgt.has_population_column else tgt
    else:
        tgt = src_all.select(TARGET)
    src = src_all.select(SOURCE) if src_all.has_population_column else src_all
    if not src.has_treatment_column:
        raise SchemaError(f"source data has no treatment column {schema.treatment!r}")
    if not src.has_outcome_column:
        raise SchemaError(f"source data has no outcome column {schema.outcome!r}")
    if src.n == 0:
        raise DataError("source data has no source rows")
    if tgt.n and tuple(tgt.covariate_names) != tuple(src.covariate_names):
        raise SchemaError(
            f"target covariates {list(tgt.covariate_names)} differ from source "
            f"{list(src.covariate_names)}"
        )
    return src, tgt


def _optimize(X, a, y, weights, pi, m, ga, names):
    objective = CAIPWObjective(X, a, y, weights, pi, m)
    result = optimize_itr(objective, X.shape[1], ga)
    rule = LinearITR(unstandardize_eta(result.best_eta, objective.center, objective.scale), names)
    return result, rule


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_pipeline(config: RunConfig, write=True) -> dict:
    """Run every stage and return the report dictionary.

    Raises
    ------
    PipelineError
        With ``stage`` and a partial ``report`` (containing ``failed_stage``)
        when any stage fails; the partial report is also written to disk.
    """
    report = {
        "tool": {"name": TOOL_NAME, "version": __version__},
        "config": config.to_dict(),
        "metadata": {
            "calibration_moments": config.calibration.moments,
            "calibration_tol": config.calibration.tol,
            "ga_defaults_note": "GA hyperparameters are this tool's defaults unless set in the config",
            "value_sum": "calibration-weighted sum over source units",
        },
        "timings": {},
    }
    outdir = Path(config.output_dir)
    stage = "setup"
    state = {}

    def timed(name, fn):
        nonlocal stage
        stage = name
        t0 = time.perf_counter()
        out = fn()
        report["timings"][name] = time.perf_counter() - t0
        logger.info("stage %s done in %.2fs", name, report["timings"][name])
        return out

    try:
        src, tgt = timed("load", lambda: load_inputs(config))
        names = list(src.covariate_names)

        def do_validate():
            both = src.concat(tgt) if tgt.n else src
            rep = validate(both)
            report["validation"] = rep.to_dict()
            fatal = [i for i in rep.issues if i.startswith(("empty treatment arm", "no source"))]
            if fatal:
                raise DataError("; ".join(fatal))
            if tgt.n == 0:
                raise DataError("no target rows: provide a target file or population column")
            return src.estimation_arrays()

        X, a, y = timed("validate", do_validate)
        Xt = np.asarray(tgt.X)

        def do_calibrate():
            targets = MomentTargets.from_array(Xt, order=config.calibration.moments, names=names)
            cw = solve_entropy_balance(X, targets, tol=config.calibration.tol,
                                       max_iter=config.calibration.max_iter)
            report["calibration"] = {
                "weights": {k: v for k, v in cw.to_dict().items() if k != "dual"},
                "targets": targets.to_dict(),
                "balance": balance_diagnostics(X, cw.weights, targets).to_dict(),
                "overlap": support_overlap(X, Xt, names),
            }
            return cw

        cw = timed("calibrate", do_calibrate)

        def do_nuisance():
            sw = cw.weights * len(y) if config.nuisance.weighted_nuisance else None
            nm = fit_nuisance(X, a, y, clip=config.nuisance.clip,
                              arm_specific=config.nuisance.arm_specific,
                              sample_weight=sw, names=names)
            report["nuisance"] = nm.to_dict()
            report["positivity"] = nm.positivity(X)
            return nm

        nm = timed("fit_nuisance", do_nuisance)
        pi = nm.pi_hat(X)
        m = nm.m_hat(X)

        def do_estimate():
            m1 = fit_linear(X[a == 1], y[a == 1], names=names)
            m0 = fit_linear(X[a == 0], y[a == 0], names=names)
            est = {
                "naive": naive_ate(a, y),
                "ipw": ipw_ate(a, y, pi),
                "or": or_ate(m1, m0, X=X),
                "aipw": aipw_ate(a, y, pi, m1, m0, X=X),
            }
            report["ate"] = {k: v.to_dict() for k, v in est.items()}

        timed("estimate", do_estimate)

        def do_optimize(weights, key):
            result, rule = _optimize(X, a, y, weights, pi, m, config.ga, names)
            report[key] = {
                "ga": result.to_dict(),
                "rule": rule.to_dict(),
                "inequality": rule.inequality(),
            }
            state[key] = (result, rule)

        timed("optimize_weighted", lambda: do_optimize(cw.weights, "weighted"))
        if config.unweighted:
            timed("optimize_unweighted", lambda: do_optimize(None, "unweighted"))

        def do_evaluate():
            for key, (_, rule) in state.items():
                report[key]["value_calibrated"] = caipw_value(rule, X, a, y, cw.weights, pi, m).value
                report[key]["value_uniform"] = caipw_value(rule, X, a, y, None, pi, m).value
                report[key]["treated_fraction_target"] = float(np.mean(rule.predict(Xt)))

        timed("evaluate", do_evaluate)

        def do_importance():
            summary = covariate_summary(tgt)
            rank = covariate_importance(state["weighted"][1], summary)
            report["importance"] = [{"name": n, "adjusted_coefficient": v} for n, v in rank]

        timed("importance", do_importance)

        stage = "report"
        if write:
            outdir.mkdir(parents=True, exist_ok=True)
            rule = state["weighted"][1]
            rule.to_json(outdir / "rule.json")
            (outdir / "rule.txt").write_text(rule.inequality() + "\n", encoding="utf-8")
            if config.unweighted:
                state["unweighted"][1].to_json(outdir / "rule_unweighted.json")
            if config.plot_data:
                write_plot_data(outdir, report)
            _write_json(outdir / "report.json", report)
        return report
    except Exception as exc:
        if not isinstance(exc, (ITRError, ValueError, OSError, np.linalg.LinAlgError)):
            raise
        report["failed_stage"] = stage
        report["error"] = str(exc)
        if write:
            try:
                outdir.mkdir(parents=True, exist_ok=True)
                _write_json(outdir / "report.json", report)
            except OSError:
                pass
        raise PipelineError(stage, exc, report) from exc


def write_plot_data(outdir, report):
    """Tidy CSV tables for external plotting: GA convergence and covariate balance."""
    outdir = Path(outdir)
    lines = ["run,step,best_value"]
    for key in ("weighted", "unweighted"):
        if key in report:
            for g, v in enumerate(report[key]["ga"]["history"]):
                lines.append(f"{key},{g},{v!r}")
    (outdir / "ga_history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if "calibration" in report:
        write_balance_csv(outdir / "balance.csv", report["calibration"]["balance"]["covariates"])


def write_balance_csv(path, rows):
    cols = ["name", "source_mean", "weighted_mean", "target_mean", "smd_before", "smd_after"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(str(r[c]) if c == "name" else repr(float(r[c])) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
