"""Competitive-equilibrium prices and allocations via market clearing.

At each step either the price is zero and aggregate consumption fits under
supply, or the price is positive and consumption exactly meets supply. This
is a complementarity system in the price vector; the solver runs damped
Newton on its Fischer-Burmeister reformulation and falls back to cyclic
per-coordinate bisection when Newton stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    EquilibriumError,
    InvalidScenarioError,
    PriceVector,
    Scenario,
    scenario_constants,
    validate_scenario,
)
from .lqr import AgentTrajectory, best_response, response_gradient

#: Steps with price below this (relative to the largest price) are zero-price.
ZERO_PRICE_TOLERANCE = 1e-10


@dataclass
class SolverOptions:
    """Tuning knobs for solve_equilibrium.

    tol_residual is relative to total supply C(t): active steps must clear
    to |demand - C| <= tol * C / max(1, lambda), which also bounds the
    complementarity product lambda * |demand - C| by tol * C.
    """

    tol_residual: float = 1e-8
    max_iters: int = 200
    fd_step: float = 1e-6
    damping: float = 1.0
    lambda_init: float = 1.0
    fallback: bool = True

    def __post_init__(self):
        if not (self.tol_residual > 0):
            raise ValueError("tol_residual must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class TraceEntry:
    """One outer iterate: phase is 'probe', 'newton', or 'sweep'."""

    iteration: int
    phase: str
    prices: np.ndarray
    fb_norm: float
    max_scaled_residual: float


@dataclass(frozen=True)
class EquilibriumSolution:
    """Full equilibrium certificate: prices, trajectories, trades, slacks.

    residuals[t] is |total consumption - C(t)| at positive-price steps and
    the (nonnegative) consumption overshoot max(0, demand - C) elsewhere.
    """

    prices: PriceVector
    trajectories: tuple[AgentTrajectory, ...]
    trades: np.ndarray
    slacks: np.ndarray
    residuals: np.ndarray
    solver_trace: tuple[TraceEntry, ...]

    @property
    def max_price(self) -> float:
        return self.prices.max

    def total_welfare(self, s: Scenario) -> float:
        """Sum of all agents' quadratic utilities (trading income nets out)."""
        return float(
            sum(_utility(a, traj) for a, traj in zip(s.agents, self.trajectories))
        )


def _utility(agent, traj: AgentTrajectory) -> float:
    total = -float(traj.states[-1] @ agent.Q @ traj.states[-1])
    for t in range(traj.horizon):
        total -= float(traj.states[t] @ agent.Q @ traj.states[t])
        total -= float(traj.controls[t] @ agent.R @ traj.controls[t])
    return total


def _demand_sweep(s: Scenario, lam: np.ndarray):
    """Best responses of all agents; returns (per-step demand, trajectories)."""
    trajs = [best_response(a, lam) for a in s.agents]
    demand = np.sum([t.consumption for t in trajs], axis=0)
    return demand, trajs


def excess_demand(s: Scenario, prices) -> np.ndarray:
    """Aggregate consumption at the best responses minus total supply."""
    lam = prices.values if isinstance(prices, PriceVector) else np.asarray(prices, float)
    demand, _ = _demand_sweep(s, lam)
    return demand - s.total_supply


def _fb_residual(lam: np.ndarray, excess: np.ndarray) -> np.ndarray:
    """Fischer-Burmeister map of (lambda_k, -excess_k); zero iff complementary."""
    return lam - excess - np.sqrt(lam * lam + excess * excess)


def _scaled_residual(lam: np.ndarray, excess: np.ndarray, C: np.ndarray) -> float:
    """Worst-step violation of the clearing conditions, relative to C(t)."""
    zero_tol = ZERO_PRICE_TOLERANCE * max(1.0, float(np.max(lam, initial=0.0)))
    worst = 0.0
    for k in range(len(lam)):
        if lam[k] > zero_tol:
            worst = max(worst, abs(excess[k]) * max(1.0, lam[k]) / C[k])
        else:
            worst = max(worst, max(excess[k], 0.0) / C[k])
    return worst


def _converged(lam, excess, C, tol) -> bool:
    return _scaled_residual(lam, excess, C) <= tol


def solve_equilibrium(s: Scenario, opts: SolverOptions | None = None) -> EquilibriumSolution:
    """Find the equilibrium price trajectory and the allocation it supports.

    Zero-demand scenarios resolve in the initial probe. Otherwise a damped
    Newton iteration with a forward-difference Jacobian drives the
    Fischer-Burmeister residual down; on stagnation (and by default) cyclic
    bisection sweeps finish the job. Raises EquilibriumError with the trace
    and best iterate if the iteration budget runs out.
    """
    opts = opts or SolverOptions()
    report = validate_scenario(s)
    if not report.is_valid:
        raise InvalidScenarioError(report)

    C = s.total_supply
    N = s.horizon
    tol = opts.tol_residual
    trace: list[TraceEntry] = []
    iters_used = 0

    def record(phase: str, lam, excess):
        trace.append(
            TraceEntry(
                iteration=len(trace),
                phase=phase,
                prices=lam.copy(),
                fb_norm=float(np.linalg.norm(_fb_residual(lam, excess))),
                max_scaled_residual=_scaled_residual(lam, excess, C),
            )
        )

    # Zero-price probe: if demand at free prices fits under supply, done.
    lam = np.zeros(N)
    excess = excess_demand(s, lam)
    record("probe", lam, excess)
    if np.all(excess <= tol * C):
        return _package(s, lam, trace)

    lam = np.full(N, float(opts.lambda_init))
    excess = excess_demand(s, lam)
    fb = _fb_residual(lam, excess)
    best = (float(np.linalg.norm(fb)), lam.copy())

    while iters_used < opts.max_iters:
        if _converged(lam, excess, C, tol):
            return _package(s, _snap_zeros(lam), trace)
        iters_used += 1

        jac = np.zeros((N, N))
        for j in range(N):
            h = opts.fd_step * max(1.0, abs(lam[j]))
            lam_j = lam.copy()
            lam_j[j] += h
            jac[:, j] = (_fb_residual(lam_j, excess_demand(s, lam_j)) - fb) / h
        try:
            step = np.linalg.solve(jac, -fb)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -fb, rcond=None)[0]

        fb_norm = float(np.linalg.norm(fb))
        scale = opts.damping
        accepted = False
        while scale >= 2.0 ** -16:
            cand = np.clip(lam + scale * step, 0.0, None)
            cand_excess = excess_demand(s, cand)
            cand_fb = _fb_residual(cand, cand_excess)
            if float(np.linalg.norm(cand_fb)) < fb_norm:
                lam, excess, fb = cand, cand_excess, cand_fb
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        record("newton", lam, excess)
        norm_now = float(np.linalg.norm(fb))
        if norm_now < best[0]:
            best = (norm_now, lam.copy())

    if opts.fallback:
        lam, excess, ok = _bisection_sweeps(
            s, lam, excess, C, tol, opts, trace, record, iters_used
        )
        if ok:
            return _package(s, _snap_zeros(lam), trace)

    if _converged(lam, excess, C, tol):
        return _package(s, _snap_zeros(lam), trace)
    raise EquilibriumError(
        f"no equilibrium found within {opts.max_iters} iterations "
        f"(best residual {best[0]:.3e})",
        trace=tuple(trace),
        best_prices=PriceVector(best[1]),
    )


def _bisection_sweeps(s, lam, excess, C, tol, opts, trace, record, iters_used):
    """Cyclic per-coordinate bisection on the clearing equations.

    Relies on per-step demand decreasing in the step's own price: brackets
    [0, hi] are grown until demand falls below supply, then halved.
    """
    N = len(lam)
    lam = lam.copy()
    sweeps_left = max(opts.max_iters - iters_used, 20)
    for _ in range(sweeps_left):
        for k in range(N):
            lam_try = lam.copy()
            lam_try[k] = 0.0
            excess_try = excess_demand(s, lam_try)
            if excess_try[k] <= tol * C[k]:
                lam, excess = lam_try, excess_try
                continue
            hi = max(1.0, 2.0 * lam[k])
            lam_try[k] = hi
            excess_try = excess_demand(s, lam_try)
            doublings = 0
            while excess_try[k] > 0 and doublings < 80:
                hi *= 2.0
                lam_try[k] = hi
                excess_try = excess_demand(s, lam_try)
                doublings += 1
            lo = 0.0
            for _halving in range(120):
                mid = 0.5 * (lo + hi)
                lam_try[k] = mid
                excess_try = excess_demand(s, lam_try)
                if abs(excess_try[k]) <= 0.25 * tol * C[k] / max(1.0, mid):
                    break
                if excess_try[k] > 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-15 * max(1.0, hi):
                    break
            lam, excess = lam_try, excess_try
        record("sweep", lam, excess)
        if _converged(lam, excess, C, tol):
            return lam, excess, True
    return lam, excess, False


def _snap_zeros(lam: np.ndarray) -> np.ndarray:
    """Clamp numerically-dead prices to exactly zero."""
    cutoff = ZERO_PRICE_TOLERANCE * max(1.0, float(np.max(lam, initial=0.0)))
    out = lam.copy()
    out[out <= cutoff] = 0.0
    return out


def _package(s: Scenario, lam: np.ndarray, trace) -> EquilibriumSolution:
    demand, trajs = _demand_sweep(s, lam)
    C = s.total_supply
    trades, slacks = trading_decisions(s, lam, trajs)
    residuals = np.where(lam > 0, np.abs(demand - C), np.maximum(demand - C, 0.0))
    return EquilibriumSolution(
        prices=PriceVector(lam),
        trajectories=tuple(trajs),
        trades=trades,
        slacks=slacks,
        residuals=residuals,
        solver_trace=tuple(trace),
    )


def trading_decisions(s: Scenario, prices, trajectories: Sequence[AgentTrajectory]):
    """Split each agent's surplus into a trade and an unsold slack.

    Positive-price steps sell the whole surplus (slack zero). Zero-price
    steps distribute the network surplus as slack proportionally to local
    supply, so trades still sum to zero. A negative surplus at a zero-price
    step means the prices are not an equilibrium.
    """
    lam = prices.values if isinstance(prices, PriceVector) else np.asarray(prices, float)
    n, N = s.n_agents, s.horizon
    supply = np.array([a.supply for a in s.agents])
    consumption = np.array([t.consumption for t in trajectories])
    C = s.total_supply
    trades = np.zeros((n, N))
    slacks = np.zeros((n, N))
    for k in range(N):
        surplus_i = supply[:, k] - consumption[:, k]
        if lam[k] > 0:
            trades[:, k] = surplus_i
        else:
            sigma = C[k] - float(np.sum(consumption[:, k]))
            if sigma < -1e-9 * C[k]:
                raise EquilibriumError(
                    f"internal inconsistency: negative surplus {sigma:.3e} at "
                    f"zero-price step {k}"
                )
            slacks[:, k] = sigma * supply[:, k] / C[k]
            trades[:, k] = surplus_i - slacks[:, k]
    return trades, slacks


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def __str__(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{mark} {self.name}: measured {self.measured:.3e} vs tol {self.tolerance:.3e}{extra}"


@dataclass
class CertificateReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self) -> str:
        return "\n".join(str(c) for c in self.checks)


def verify_equilibrium(s: Scenario, sol: EquilibriumSolution) -> CertificateReport:
    """Re-check every equilibrium condition on a finished solution.

    Diagnostics are data: all checks run and report their measured values,
    nothing raises. Stationarity is measured by the costate gradient, a
    path independent of the Riccati solver.
    """
    rep = CertificateReport()
    lam = sol.prices.values
    C = s.total_supply
    N = s.horizon
    consumption = np.array([t.consumption for t in sol.trajectories])
    demand = consumption.sum(axis=0)

    worst = float(np.min(lam))
    rep.checks.append(CheckResult(
        "price_nonnegativity", worst >= -1e-8, worst, -1e-8,
        detail="min price over steps"))

    active = lam > 1e-6
    bal = float(np.max(np.abs(demand - C)[active] / C[active])) if active.any() else 0.0
    rep.checks.append(CheckResult(
        "balance_at_active_steps", bal <= 1e-6, bal, 1e-6,
        detail="max |demand - C| / C where lambda > 1e-6"))

    trade_sum = float(np.max(np.abs(sol.trades.sum(axis=0))))
    rep.checks.append(CheckResult(
        "trades_sum_to_zero", trade_sum <= 1e-7, trade_sum, 1e-7))

    surplus = np.array([a.supply for a in s.agents]) - consumption
    feas = float(np.max(sol.trades - surplus))
    rep.checks.append(CheckResult(
        "trade_feasibility", feas <= 1e-7, feas, 1e-7,
        detail="max e - (a - h) over agents and steps"))

    slack_min = float(np.min(sol.slacks))
    rep.checks.append(CheckResult(
        "slack_nonnegativity", slack_min >= -1e-7, slack_min, -1e-7))

    compl = float(np.max(np.abs(lam * (C - demand)) / C))
    rep.checks.append(CheckResult(
        "complementarity", compl <= 1e-6, compl, 1e-6,
        detail="max |lambda * (C - demand)| / C"))

    grad_worst = 0.0
    for agent, traj in zip(s.agents, sol.trajectories):
        g = response_gradient(agent, lam, traj.controls)
        grad_worst = max(grad_worst, float(np.linalg.norm(g)))
    rep.checks.append(CheckResult(
        "stationarity", grad_worst <= 1e-6, grad_worst, 1e-6,
        detail="max objective-gradient norm over agents"))

    try:
        rho = scenario_constants(s).rho
        cap = np.sqrt(C / rho)
        worst_u = 0.0
        for traj in sol.trajectories:
            norms = np.linalg.norm(traj.controls, axis=1)
            worst_u = max(worst_u, float(np.max(norms - cap)))
        rep.checks.append(CheckResult(
            "control_norm_bound", worst_u <= 1e-9, worst_u, 1e-9,
            detail="max ||u|| - sqrt(C/rho)"))
    except InvalidScenarioError:
        rep.checks.append(CheckResult(
            "control_norm_bound", False, float("nan"), 1e-9,
            detail="scenario invalid; constants unavailable"))

    dyn_worst = 0.0
    dyn_tol = 0.0
    for agent, traj in zip(s.agents, sol.trajectories):
        for t in range(traj.horizon):
            gap = float(np.linalg.norm(
                traj.states[t + 1] - agent.A @ traj.states[t] - agent.B @ traj.controls[t]
            ))
            tol_t = 1e-9 * max(1.0, float(np.linalg.norm(traj.states[t + 1])))
            if gap - tol_t > dyn_worst - dyn_tol:
                dyn_worst, dyn_tol = gap, tol_t
    rep.checks.append(CheckResult(
        "dynamics_consistency", dyn_worst <= dyn_tol, dyn_worst, dyn_tol,
        detail="max ||x(t+1) - A x(t) - B u(t)||"))
    return rep
