"""Command-line front door: socshape <subcommand> --scenario <file>.

Subcommands mirror the library: validate, equilibrium, bounds, shape,
verify, report. Emitted CSVs use 12 significant digits so repeated runs
are byte-identical and diffable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import delta_max_dp, delta_max_qp
from .core import (
    EquilibriumError,
    InvalidScenarioError,
    Scenario,
    ShapingError,
    SocshapeError,
    example_scenario_path,
    load_scenario,
    scenario_constants,
    validate_scenario,
)
from .equilibrium import (
    EquilibriumSolution,
    SolverOptions,
    solve_equilibrium,
    trading_decisions,
    verify_equilibrium,
)
from .core import PriceVector
from .lqr import rollout
from .shaping import bisection_shape

EXIT_OK = 0
EXIT_INVALID_INPUT = 1
EXIT_SOLVER_FAILURE = 2
EXIT_CERTIFICATE_FAILURE = 3


@dataclass
class RunConfig:
    """Parsed invocation: subcommand plus all overrides."""

    subcommand: str
    scenario_path: str
    output_dir: Path
    tol: float | None = None
    max_iters: int | None = None
    q: float | None = None
    d_rho: float | None = None
    eps_lambda: float | None = None
    shape_iters: int = 40
    strategy: str = "boundary"
    solution_dir: Path | None = None
    json_summary: bool = False


def _fmt(x) -> str:
    return f"{float(x):.12g}"


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (_fmt(v) if isinstance(v, float) else v)
                             for v in row])


def _load(config: RunConfig) -> Scenario:
    path = config.scenario_path
    if path == "example":
        path = str(example_scenario_path())
    return load_scenario(path)


def _solver_options(config: RunConfig) -> SolverOptions:
    opts = SolverOptions()
    if config.tol is not None:
        opts.tol_residual = config.tol
    if config.max_iters is not None:
        opts.max_iters = config.max_iters
    return opts


def _emit_solution(s: Scenario, sol: EquilibriumSolution, out: Path) -> None:
    lam = sol.prices.values
    _write_csv(out / "prices.csv", ["t", "lambda"],
               [[t, float(lam[t])] for t in range(s.horizon)])

    d = s.agents[0].state_dim
    m = s.agents[0].input_dim
    header = (["agent", "t"] + [f"x{i}" for i in range(d)] + [f"u{j}" for j in range(m)]
              + ["consumption", "trade", "slack"])
    rows = []
    for i, traj in enumerate(sol.trajectories):
        for t in range(s.horizon):
            rows.append([i, t] + [float(v) for v in traj.states[t]]
                        + [float(v) for v in traj.controls[t]]
                        + [float(traj.consumption[t]), float(sol.trades[i, t]),
                           float(sol.slacks[i, t])])
        rows.append([i, s.horizon] + [float(v) for v in traj.states[s.horizon]]
                    + [None] * (m + 3))
    _write_csv(out / "trajectories.csv", header, rows)

    C = s.total_supply
    demand = np.sum([t.consumption for t in sol.trajectories], axis=0)
    _write_csv(out / "residuals.csv",
               ["t", "lambda", "total_consumption", "total_supply", "residual"],
               [[t, float(lam[t]), float(demand[t]), float(C[t]), float(sol.residuals[t])]
                for t in range(s.horizon)])


def _read_solution(s: Scenario, solution_dir: Path) -> EquilibriumSolution:
    """Rebuild a solution from emitted CSVs, re-rolling states from controls."""
    with open(solution_dir / "prices.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    lam = np.zeros(s.horizon)
    for row in rows:
        lam[int(row["t"])] = float(row["lambda"])

    m = s.agents[0].input_dim
    controls = [np.zeros((s.horizon, m)) for _ in s.agents]
    trades = np.zeros((s.n_agents, s.horizon))
    slacks = np.zeros((s.n_agents, s.horizon))
    with open(solution_dir / "trajectories.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i, t = int(row["agent"]), int(row["t"])
            if t >= s.horizon:
                continue
            controls[i][t] = [float(row[f"u{j}"]) for j in range(m)]
            trades[i, t] = float(row["trade"])
            slacks[i, t] = float(row["slack"])
    trajectories = tuple(rollout(a, U) for a, U in zip(s.agents, controls))
    demand = np.sum([t.consumption for t in trajectories], axis=0)
    C = s.total_supply
    residuals = np.where(lam > 0, np.abs(demand - C), np.maximum(demand - C, 0.0))
    return EquilibriumSolution(
        prices=PriceVector(lam),
        trajectories=trajectories,
        trades=trades,
        slacks=slacks,
        residuals=residuals,
        solver_trace=(),
    )


def _maybe_json_summary(config: RunConfig, payload: dict) -> None:
    if config.json_summary:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        with open(config.output_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cmd_validate(config: RunConfig) -> int:
    s = _load(config)
    report = validate_scenario(s)
    if report.is_valid:
        print(f"scenario valid: {s.n_agents} agents, horizon {s.horizon}, "
              f"price threshold {_fmt(s.price_cap)}")
        return EXIT_OK
    for violation in report:
        print(str(violation), file=sys.stderr)
    return EXIT_INVALID_INPUT


def _cmd_equilibrium(config: RunConfig) -> int:
    s = _load(config)
    if config.q is not None:
        s = s.with_q(config.q)
    try:
        sol = solve_equilibrium(s, _solver_options(config))
    except EquilibriumError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE
    _emit_solution(s, sol, config.output_dir)
    lam = sol.prices.values
    argmax = int(np.argmax(lam))
    print(f"equilibrium solved in {len(sol.solver_trace)} recorded iterates")
    print(f"max price {_fmt(sol.max_price)} at t={argmax}; "
          f"{int(np.sum(lam > 0))}/{s.horizon} steps at positive price")
    print(f"worst clearing residual {_fmt(float(np.max(sol.residuals)))}")
    report = verify_equilibrium(s, sol)
    _maybe_json_summary(config, {
        "max_price": sol.max_price,
        "argmax_t": argmax,
        "prices": [float(v) for v in lam],
        "certificate_passed": report.all_passed,
    })
    if not report.all_passed:
        print("certificate FAILED:", file=sys.stderr)
        print(str(report), file=sys.stderr)
        return EXIT_CERTIFICATE_FAILURE
    print("certificate: all checks passed")
    return EXIT_OK


def _cmd_bounds(config: RunConfig) -> int:
    s = _load(config)
    qp = delta_max_qp(s)
    dp = delta_max_dp(s)
    c = qp.constants
    print(f"constants: gamma={_fmt(c.gamma)} alpha={_fmt(c.alpha)} "
          f"beta={_fmt(c.beta)} rho={_fmt(c.rho)}")
    for rep in (qp, dp):
        print(f"{rep.method} route: delta_max = {rep.delta_max:.3g} "
              f"({_fmt(rep.delta_max)})")
        for note in rep.notes:
            print(f"  note: {note}")
    _write_csv(config.output_dir / "bounds.csv", ["k", "cap_qp", "cap_dp"],
               [[k, qp.per_step_caps[k], dp.per_step_caps[k]]
                for k in range(s.horizon)])
    _maybe_json_summary(config, {
        "delta_max_qp": qp.delta_max,
        "delta_max_dp": dp.delta_max,
        "constants": {"gamma": c.gamma, "alpha": c.alpha, "beta": c.beta, "rho": c.rho},
    })
    return EXIT_OK


def _cmd_shape(config: RunConfig) -> int:
    s = _load(config)
    try:
        report = bisection_shape(
            s,
            d_rho=config.d_rho,
            eps_lambda=config.eps_lambda,
            max_iters=config.shape_iters,
            strategy=config.strategy,
            opts=_solver_options(config),
        )
    except (ShapingError, EquilibriumError) as exc:
        print(f"shaping failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE
    _write_csv(config.output_dir / "shaping_trace.csv",
               ["k", "b", "d", "L", "lambda_at_L"],
               [list(row) for row in report.trace])
    print(f"worst-case price at d_rho={_fmt(report.d_rho)}: "
          f"{report.lambda_at_d_rho:.4g} ({_fmt(report.lambda_at_d_rho)})")
    print(f"bisection: {report.iterations} iterations, strategy {report.strategy}")
    print(f"delta_max = {report.delta_max:.3g} ({_fmt(report.delta_max)})")
    print(f"worst-case price at delta_max = {report.lambda_at_delta_max:.4g} "
          f"({_fmt(report.lambda_at_delta_max)}) vs threshold {_fmt(report.threshold)}")
    print(f"analytic bounds: QP {report.analytic_qp:.3g}, DP {report.analytic_dp:.3g}")
    print("certified admissible" if report.certified
          else "NOT certified within eps_lambda")
    _maybe_json_summary(config, {
        "delta_max": report.delta_max,
        "lambda_at_delta_max": report.lambda_at_delta_max,
        "lambda_at_d_rho": report.lambda_at_d_rho,
        "analytic_qp": report.analytic_qp,
        "analytic_dp": report.analytic_dp,
        "iterations": report.iterations,
        "certified": report.certified,
    })
    return EXIT_OK if report.certified else EXIT_CERTIFICATE_FAILURE


def _cmd_verify(config: RunConfig) -> int:
    s = _load(config)
    if config.q is not None:
        s = s.with_q(config.q)
    solution_dir = config.solution_dir or config.output_dir
    try:
        sol = _read_solution(s, solution_dir)
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot read solution from {solution_dir}: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    report = verify_equilibrium(s, sol)
    print(str(report))
    return EXIT_OK if report.all_passed else EXIT_CERTIFICATE_FAILURE


def _price_table(title: str, lam: np.ndarray) -> list[str]:
    lines = [f"### {title}", "", "| t | price |", "|---|---|"]
    lines += [f"| {t} | {_fmt(lam[t])} |" for t in range(len(lam))]
    argmax = int(np.argmax(lam))
    lines += ["", f"max price {float(np.max(lam)):.4g} ({_fmt(float(np.max(lam)))}) "
                  f"at t={argmax}", ""]
    return lines


def _cmd_report(config: RunConfig) -> int:
    s = _load(config)
    validation = validate_scenario(s)
    if not validation.is_valid:
        print(str(validation), file=sys.stderr)
        return EXIT_INVALID_INPUT
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    c = scenario_constants(s)
    C = s.total_supply
    qp = delta_max_qp(s)
    dp = delta_max_dp(s)
    opts = _solver_options(config)

    try:
        shaping = bisection_shape(
            s, d_rho=config.d_rho, eps_lambda=config.eps_lambda,
            max_iters=config.shape_iters, strategy=config.strategy, opts=opts,
        )
        sol_scenario = solve_equilibrium(s, opts)
        sol_shaped = solve_equilibrium(s.with_q(shaping.delta_max), opts)
    except (ShapingError, EquilibriumError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE

    _write_csv(out / "supply.csv", ["t", "C"],
               [[t, float(C[t])] for t in range(s.horizon)])
    _write_csv(out / "bounds.csv", ["k", "cap_qp", "cap_dp"],
               [[k, qp.per_step_caps[k], dp.per_step_caps[k]] for k in range(s.horizon)])
    _write_csv(out / "shaping_trace.csv", ["k", "b", "d", "L", "lambda_at_L"],
               [list(row) for row in shaping.trace])
    _write_csv(out / "prices_scenario.csv", ["t", "lambda"],
               [[t, float(v)] for t, v in enumerate(sol_scenario.prices.values)])
    _write_csv(out / "prices_shaped.csv", ["t", "lambda"],
               [[t, float(v)] for t, v in enumerate(sol_shaped.prices.values)])

    lines = [
        "# Market report",
        "",
        f"- scenario: `{config.scenario_path}`",
        f"- agents: {s.n_agents}, horizon: {s.horizon}, "
        f"price threshold: {_fmt(s.price_cap)}",
        f"- constants: gamma={_fmt(c.gamma)}, alpha={_fmt(c.alpha)}, "
        f"beta={_fmt(c.beta)}, rho={_fmt(c.rho)}",
        "",
        "## Total supply",
        "",
        "| t | C(t) |",
        "|---|---|",
    ]
    lines += [f"| {t} | {_fmt(C[t])} |" for t in range(s.horizon)]
    lines += [
        "",
        "## Closed-form preference bounds",
        "",
        "| k | cap (QP route) | cap (DP route) |",
        "|---|---|---|",
    ]
    lines += [f"| {k} | {_fmt(qp.per_step_caps[k])} | {_fmt(dp.per_step_caps[k])} |"
              for k in range(s.horizon)]
    lines += [
        "",
        f"- delta_max (QP route): {qp.delta_max:.2g} ({_fmt(qp.delta_max)})",
        f"- delta_max (DP route): {dp.delta_max:.2g} ({_fmt(dp.delta_max)})",
        "",
        "## Bisection shaping",
        "",
        f"- d_rho = {_fmt(shaping.d_rho)}, eps_lambda = {_fmt(shaping.eps_lambda)}, "
        f"iterations = {shaping.iterations}, strategy = {shaping.strategy}",
        f"- worst-case price at d_rho: {shaping.lambda_at_d_rho:.4g} "
        f"({_fmt(shaping.lambda_at_d_rho)})",
        f"- delta_max (bisection): {shaping.delta_max:.3g} ({_fmt(shaping.delta_max)})",
        f"- worst-case price at delta_max: {shaping.lambda_at_delta_max:.3g} "
        f"({_fmt(shaping.lambda_at_delta_max)})",
        f"- certified admissible: {'yes' if shaping.certified else 'no'}",
        "",
    ]
    lines += _price_table("Equilibrium prices at the scenario preferences",
                          sol_scenario.prices.values)
    lines += _price_table(
        f"Equilibrium prices at shaped preferences (q = {_fmt(shaping.delta_max)})",
        sol_shaped.prices.values)
    (out / "summary.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"report written to {out / 'summary.md'}")
    print(f"delta_max: QP {qp.delta_max:.2g}, DP {dp.delta_max:.2g}, "
          f"bisection {shaping.delta_max:.3g}")
    _maybe_json_summary(config, {
        "delta_max_qp": qp.delta_max,
        "delta_max_dp": dp.delta_max,
        "delta_max_bisection": shaping.delta_max,
        "lambda_at_d_rho": shaping.lambda_at_d_rho,
        "max_price_scenario": sol_scenario.max_price,
        "max_price_shaped": sol_shaped.max_price,
    })
    return EXIT_OK


_COMMANDS = {
    "validate": _cmd_validate,
    "equilibrium": _cmd_equilibrium,
    "bounds": _cmd_bounds,
    "shape": _cmd_shape,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="socshape",
        description="Equilibrium pricing and social shaping for dynamic resource markets",
    )
    parser.add_argument("--version", action="version", version=f"socshape {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--scenario", required=True,
                       help="scenario JSON path, or 'example' for the bundled market")
        p.add_argument("--out", default=".", help="output directory (default: cwd)")
        p.add_argument("--json-summary", action="store_true",
                       help="also write summary.json to the output directory")

    p = sub.add_parser("validate", help="check every scenario invariant")
    common(p)

    p = sub.add_parser("equilibrium", help="solve for the clearing prices")
    common(p)
    p.add_argument("--tol", type=float, help="relative clearing tolerance")
    p.add_argument("--max-iters", type=int, help="solver iteration budget")
    p.add_argument("--q", type=float, help="override every agent's Q with q*I")

    p = sub.add_parser("bounds", help="closed-form admissible preference bounds")
    common(p)

    p = sub.add_parser("shape", help="bisection for the largest admissible bound")
    common(p)
    p.add_argument("--tol", type=float, help="relative clearing tolerance")
    p.add_argument("--max-iters", type=int, help="equilibrium iteration budget")
    p.add_argument("--d-rho", type=float, help="inadmissible upper bracket")
    p.add_argument("--eps-lambda", type=float, help="threshold matching band")
    p.add_argument("--shape-iters", type=int, default=40,
                   help="bisection iteration cap (default 40)")
    p.add_argument("--strategy", default="boundary",
                   help="'boundary' or 'grid:<g>' (default boundary)")

    p = sub.add_parser("verify", help="re-check an emitted solution")
    common(p)
    p.add_argument("--solution-dir",
                   help="directory holding prices.csv and trajectories.csv "
                        "(default: --out)")
    p.add_argument("--q", type=float, help="override every agent's Q with q*I")

    p = sub.add_parser("report", help="bounds + shaping + equilibria, one summary")
    common(p)
    p.add_argument("--tol", type=float, help="relative clearing tolerance")
    p.add_argument("--max-iters", type=int, help="equilibrium iteration budget")
    p.add_argument("--d-rho", type=float, help="inadmissible upper bracket")
    p.add_argument("--eps-lambda", type=float, help="threshold matching band")
    p.add_argument("--shape-iters", type=int, default=40,
                   help="bisection iteration cap (default 40)")
    p.add_argument("--strategy", default="boundary",
                   help="'boundary' or 'grid:<g>' (default boundary)")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        subcommand=args.subcommand,
        scenario_path=args.scenario,
        output_dir=Path(args.out),
        tol=getattr(args, "tol", None),
        max_iters=getattr(args, "max_iters", None),
        q=getattr(args, "q", None),
        d_rho=getattr(args, "d_rho", None),
        eps_lambda=getattr(args, "eps_lambda", None),
        shape_iters=getattr(args, "shape_iters", 40),
        strategy=getattr(args, "strategy", "boundary"),
        solution_dir=Path(args.solution_dir) if getattr(args, "solution_dir", None) else None,
        json_summary=args.json_summary,
    )


def run(config: RunConfig) -> int:
    """Dispatch one parsed invocation; returns the process exit code."""
    try:
        return _COMMANDS[config.subcommand](config)
    except FileNotFoundError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except InvalidScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except SocshapeError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
