"""Command-line pipeline: simulate -> allocate -> sensitivities -> reports.

Subcommands: simulate, allocate, sensitivity, default-fund, validate-loss.
Configuration is a JSON file validated against the shipped schema; unknown
keys are rejected.  Exit codes: 0 success, 1 configuration error, 2 numeric
error, 3 I/O error.  All JSON outputs validate against the shipped schemas;
the full pipeline output is a pure function of (config file, seed).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources

import jsonschema
import numpy as np

from .defaultfund import DefaultFundError, allocate_default_fund
from .estimators import (
    ConstraintEstimator,
    EstimatorError,
    QuadratureOracle,
    SurrogateEstimator,
)
from .loss import LossError, LossSpec, validate_loss
from .scenario import (
    GaussianModel,
    ScenarioError,
    ScenarioSet,
    StudentCopulaModel,
    load_positions,
    simulate_gaussian,
    simulate_student_copula,
)
from .sensitivity import (
    SensitivityError,
    finite_difference_shock,
    shock_sensitivity,
    src_closed_form,
)
from .solver import SolverError, solve_allocation
from .sensitivity import alpha_sensitivity as alpha_sensitivity_fn

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

SCENARIO_FILE = "scenarios.msra"


class ConfigError(ValueError):
    pass


def _schema(name: str) -> dict:
    text = resources.files("msra.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _validate(obj: dict, schema_name: str) -> None:
    jsonschema.validate(obj, _schema(schema_name))


def _apply_defaults(config: dict) -> dict:
    """Fill the documented defaults for optional sections."""
    out = dict(config)
    solver = dict(out.get("solver", {}))
    solver.setdefault("n_scenarios", 200000)
    solver.setdefault("seed", 0)
    solver.setdefault("tol", None)
    solver.setdefault("method", "auto")
    solver.setdefault("surrogate", "off")
    solver.setdefault("positivity", False)
    solver.setdefault("accept_nonunique", False)
    solver.setdefault("init", None)
    out["solver"] = solver
    dfund = dict(out.get("default_fund", {}))
    dfund.setdefault("im_level", 0.99)
    dfund.setdefault("gain_credit", 0.5)
    dfund.setdefault("df_total", None)
    dfund.setdefault("rules", ["im_proportional", "shortfall_l1", "shortfall_l2"])
    out["default_fund"] = dfund
    sens = dict(out.get("sensitivity", {}))
    sens.setdefault("method", "linear_system")
    sens.setdefault("fd_step", 1e-3)
    out["sensitivity"] = sens
    output = dict(out.get("output", {}))
    output.setdefault("dir", ".")
    output.setdefault("formats", ["json"])
    out["output"] = output
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        _validate(config, "run_config")
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config rejected: {exc.message} at {list(exc.absolute_path)}") from exc
    return _apply_defaults(config)


def build_model(config: dict, base_dir: str = "."):
    section = config["model"]
    if section["type"] == "gaussian":
        return GaussianModel(
            mean=np.asarray(section["mean"], dtype=np.float64),
            covariance=np.asarray(section["covariance"], dtype=np.float64),
        )
    members = section.get("members")
    tickers = section.get("tickers")
    if "positions_csv" in section:
        table = load_positions(os.path.join(base_dir, section["positions_csv"]))
        positions, members, tickers = table.matrix, table.members, table.tickers
    elif "positions" in section:
        positions = np.asarray(section["positions"], dtype=np.float64)
    else:
        raise ConfigError("student_copula model needs positions or positions_csv")
    return StudentCopulaModel(
        correlation=np.asarray(section["correlation"], dtype=np.float64),
        copula_dof=section["copula_dof"],
        marginal_dof=section["marginal_dof"],
        fudge=section["fudge"],
        spot=section["spot"],
        positions=positions,
        member_labels=members,
        tickers=tickers,
    )


def build_loss(config: dict) -> LossSpec:
    if "loss" not in config:
        raise ConfigError("this command needs a loss section in the config")
    return LossSpec.from_json(config["loss"])


def simulate_from_config(config: dict, base_dir: str = ".", threads: int = 1) -> ScenarioSet:
    model = build_model(config, base_dir)
    n = config["solver"]["n_scenarios"]
    seed = config["solver"]["seed"]
    if isinstance(model, GaussianModel):
        return simulate_gaussian(model, n, seed, threads=threads)
    return simulate_student_copula(model, n, seed, threads=threads)


def _scenarios_for(args, config) -> ScenarioSet:
    if args.scenarios:
        return ScenarioSet.load(args.scenarios)
    return simulate_from_config(config, base_dir=os.path.dirname(args.config) or ".",
                                threads=args.threads)


def _build_estimator(config, scenarios, loss):
    est = ConstraintEstimator(scenarios, loss)
    surrogate = config["solver"]["surrogate"]
    if surrogate != "off":
        est = SurrogateEstimator.from_estimator(est, nodes_per_axis=int(surrogate))
    return est


def _solve(config, est):
    solver = config["solver"]
    init = None if solver["init"] is None else np.asarray(solver["init"], dtype=np.float64)
    return solve_allocation(
        est,
        init=init,
        tol=solver["tol"],
        method=solver["method"],
        positivity=solver["positivity"],
        accept_nonunique=solver["accept_nonunique"],
    )


def _write_json(obj: dict, schema_name: str, path: str) -> None:
    _validate(obj, schema_name)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_simulate(args, config) -> int:
    scn = simulate_from_config(config, base_dir=os.path.dirname(args.config) or ".",
                               threads=args.threads)
    out_dir = args.out or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, SCENARIO_FILE)
    scn.save(path)
    stats = scn.column_stats()
    print(f"wrote {path}: n={scn.n} d={scn.d} tag={scn.model_tag}")
    for k in range(scn.d):
        print(
            f"  col {k}: mean={stats['mean'][k]:+.6g} std={stats['std'][k]:.6g} "
            f"min={stats['min'][k]:+.6g} max={stats['max'][k]:+.6g}"
        )
    if args.format == "csv" or "csv" in config["output"]["formats"]:
        scn.to_csv(os.path.join(out_dir, "scenarios.csv"))
    return EXIT_OK


def cmd_allocate(args, config) -> int:
    loss = build_loss(config)
    scn = _scenarios_for(args, config)
    est = _build_estimator(config, scn, loss)
    t0 = time.perf_counter()
    alloc = _solve(config, est)
    wall = 1000.0 * (time.perf_counter() - t0)
    payload = alloc.to_json()
    payload["wall_time_ms"] = wall
    out_dir = args.out or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    _write_json(payload, "allocation", os.path.join(out_dir, "allocation.json"))
    print(
        f"risk={alloc.risk:.6g} lambda={alloc.lambda_star:.6g} "
        f"residual={alloc.kkt_residual:.3g} iters={alloc.iterations} "
        f"method={alloc.method} wall={wall:.0f}ms"
    )
    print("allocation:", np.array2string(alloc.m_star, precision=6))
    return EXIT_OK


def _build_shock(config, scn: ScenarioSet) -> np.ndarray:
    section = config["sensitivity"].get("shock")
    if section is None:
        raise ConfigError("sensitivity command needs a sensitivity.shock section")
    if section["type"] == "self":
        return scn.data.copy()
    component = section["component"]
    if component >= scn.d:
        raise ConfigError(f"shock component {component} out of range for d={scn.d}")
    rng = np.random.Generator(
        np.random.Philox(key=np.array([section.get("seed", 7), 0], dtype=np.uint64))
    )
    y = np.zeros_like(scn.data)
    y[:, component] = section["mean"] + section.get("std", 0.0) * rng.standard_normal(scn.n)
    return y


def _emit_src_grid(config, out_dir: str) -> None:
    grid = config["sensitivity"].get("src_grid")
    if grid is None:
        return
    lo, hi, count = grid["sigma1"]
    sigma1 = np.linspace(lo, hi, int(count))
    sigma2 = grid.get("sigma2", 1.0)
    alpha = grid.get("alpha", 1.0)
    rhos = grid.get("rho_values", [-0.9, -0.5, -0.2, 0.0, 0.2, 0.5, 0.9])
    path = os.path.join(out_dir, "src_grid.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma1"] + [f"rho={r:g}" for r in rhos])
        for s1 in sigma1:
            row = [f"{s1:.10g}"]
            for r in rhos:
                row.append(f"{src_closed_form(r, max(s1, 1e-12), sigma2, alpha):.10g}")
            writer.writerow(row)
    print(f"wrote {path}")


def _emit_alpha_profile(config, out_dir: str) -> None:
    prof = config["sensitivity"].get("alpha_profile")
    if prof is None:
        return
    rhos = prof.get("rho_values", [-0.9, -0.5, 0.0, 0.5, 0.9])
    n = prof.get("n_scenarios", 200000)
    seed = prof.get("seed", 0)
    loss = LossSpec(family="quadratic_systemic", d=3, alpha=0.0, include_linear=False)
    path = os.path.join(out_dir, "alpha_profile.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rho", "d_risk", "d_alloc_1", "d_alloc_2", "d_alloc_3"])
        for rho in rhos:
            cov = np.array([[1.0, rho, 0.0], [rho, 1.0, 0.0], [0.0, 0.0, 1.0]])
            scn = simulate_gaussian(GaussianModel(np.zeros(3), cov), n, seed)
            est = ConstraintEstimator(scn, loss)
            alloc = solve_allocation(est)
            sens = alpha_sensitivity_fn(est, alloc)
            writer.writerow(
                [f"{rho:g}", f"{sens.d_risk:.10g}"]
                + [f"{v:.10g}" for v in sens.d_alloc]
            )
    print(f"wrote {path}")


def cmd_sensitivity(args, config) -> int:
    loss = build_loss(config)
    scn = _scenarios_for(args, config)
    out_dir = args.out or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    est = ConstraintEstimator(scn, loss)
    t0 = time.perf_counter()
    shock = _build_shock(config, scn)
    if config["sensitivity"]["method"] == "finite_difference":
        alloc = _solve(config, est)
        sens = finite_difference_shock(
            scn, loss, shock, t=config["sensitivity"]["fd_step"],
            tol=config["solver"]["tol"], init=alloc.m_star,
        )
    else:
        alloc = _solve(config, est)
        sens = shock_sensitivity(est, alloc, shock)
    wall = 1000.0 * (time.perf_counter() - t0)
    payload = sens.to_json()
    payload["wall_time_ms"] = wall
    _write_json(payload, "sensitivity", os.path.join(out_dir, "sensitivity.json"))
    print(
        f"marginal risk={sens.marginal_risk:.6g} "
        f"alloc={np.array2string(sens.marginal_alloc, precision=6)} "
        f"method={sens.method}"
    )
    _emit_src_grid(config, out_dir)
    _emit_alpha_profile(config, out_dir)
    return EXIT_OK


def cmd_default_fund(args, config) -> int:
    scn = _scenarios_for(args, config)
    section = config["default_fund"]
    t0 = time.perf_counter()
    report = allocate_default_fund(
        scn,
        df_total=section["df_total"],
        rules=tuple(section["rules"]),
        im_level=section["im_level"],
        gain_credit=section["gain_credit"],
        tol=config["solver"]["tol"],
    )
    wall = 1000.0 * (time.perf_counter() - t0)
    out_dir = args.out or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    payload = report.to_json()
    payload["wall_time_ms"] = wall
    _write_json(payload, "default_fund", os.path.join(out_dir, "default_fund.json"))
    if args.format == "csv" or "csv" in config["output"]["formats"]:
        report.to_csv(os.path.join(out_dir, "default_fund_weights.csv"))
    print(f"df_total={report.df_total:.6g} rules={list(report.weights)}")
    return EXIT_OK


def cmd_validate_loss(args, config) -> int:
    loss = build_loss(config)
    report = validate_loss(loss)
    out_dir = args.out or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    payload = report.to_json()
    _write_json(payload, "loss_validation", os.path.join(out_dir, "loss_validation.json"))
    print(f"family={report.family} passed={report.passed} uniqueness={report.uniqueness_flag}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msra",
        description="Multivariate shortfall risk allocation pipeline",
    )
    parser.add_argument("--log-level", default=os.environ.get("MSRA_LOG_LEVEL", "WARNING"))
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("simulate", cmd_simulate),
        ("allocate", cmd_allocate),
        ("sensitivity", cmd_sensitivity),
        ("default-fund", cmd_default_fund),
        ("validate-loss", cmd_validate_loss),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--scenarios", help="stored scenario container to reuse")
        p.add_argument("--out", help="output directory (default from config)")
        p.add_argument(
            "--threads",
            type=int,
            default=int(os.environ.get("MSRA_THREADS", "1")),
            help="scenario-generation threads; never changes results",
        )
        p.add_argument("--format", choices=["json", "csv"], default="json")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        config = load_config(args.config)
        return args.handler(args, config)
    except (SolverError, SensitivityError, DefaultFundError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, LossError, ScenarioError, EstimatorError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
