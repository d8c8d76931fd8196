"""Numerical social shaping: bisection on the worst-case price function.

lambda_bar(delta) is the largest equilibrium price over time when every
agent picks its scalar preference q in (0, delta]. It is non-decreasing in
delta (a larger delta only enlarges the choice set), so the largest
admissible delta is found by bisection between an admissible lower bracket
and an inadmissible upper bracket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .bounds import delta_max_dp, delta_max_qp
from .core import EquilibriumError, Scenario, ScenarioConstants, ShapingError
from .equilibrium import SolverOptions, solve_equilibrium

#: Upper limit for the automatic inadmissible-bracket search.
MAX_AUTO_BRACKET = 2.0**20

_GRID_MAX_AGENTS = 3
_GRID_MAX_POINTS = 4

_lambda_bar_cache: dict[tuple[str, float, str], float] = {}


def clear_cache() -> None:
    _lambda_bar_cache.clear()


def _parse_strategy(strategy: str) -> tuple[str, int | None]:
    if strategy == "boundary":
        return "boundary", None
    if strategy.startswith("grid:"):
        g = int(strategy.split(":", 1)[1])
        if not (1 <= g <= _GRID_MAX_POINTS):
            raise ValueError(f"grid size must be in 1..{_GRID_MAX_POINTS}, got {g}")
        return "grid", g
    raise ValueError(f"unknown strategy {strategy!r}; use 'boundary' or 'grid:<g>'")


def lambda_bar(s: Scenario, delta: float, strategy: str = "boundary",
               opts: SolverOptions | None = None) -> float:
    """Worst-case equilibrium price when all q_i are chosen from (0, delta].

    The default boundary strategy evaluates q_i = delta for every agent
    (one solve). The grid strategy audits the boundary-attainment
    assumption by sweeping all q tuples on a per-agent grid over (0, delta];
    it is exponential in the agent count and guarded accordingly.
    """
    if not (delta > 0):
        raise ValueError(f"delta must be positive, got {delta}")
    kind, g = _parse_strategy(strategy)
    key = (s.content_digest(), float(delta), strategy)
    cached = _lambda_bar_cache.get(key)
    if cached is not None:
        return cached

    if kind == "grid" and s.n_agents > _GRID_MAX_AGENTS:
        raise ValueError(
            f"grid strategy limited to {_GRID_MAX_AGENTS} agents, got {s.n_agents}"
        )
    if kind == "boundary":
        tuples = [(delta,) * s.n_agents]
    else:
        levels = [delta * (i + 1) / g for i in range(g)]
        tuples = list(product(levels, repeat=s.n_agents))

    worst = 0.0
    for qs in tuples:
        scenario = _with_preferences(s, qs)
        try:
            sol = solve_equilibrium(scenario, opts)
        except EquilibriumError as exc:
            raise EquilibriumError(
                f"equilibrium solve failed at q={qs}: {exc}",
                trace=exc.trace,
                best_prices=exc.best_prices,
            ) from exc
        worst = max(worst, sol.max_price)
    _lambda_bar_cache[key] = worst
    return worst


def _with_preferences(s: Scenario, qs: Sequence[float]) -> Scenario:
    agents = tuple(
        replace(a, Q=q * np.eye(a.state_dim)) for a, q in zip(s.agents, qs)
    )
    return replace(s, agents=agents)


@dataclass
class BisectionState:
    """Bracket state after a bisection run.

    The trace holds one row per iteration: (k, b_k, d_k, L_k, lambda_at_L)
    with the brackets as they stood when the midpoint was evaluated, so
    |b_k - d_k| halves exactly from row to row.
    """

    b: float
    d: float
    L: float
    k: int
    lambda_at_L: float
    trace: list[tuple[int, float, float, float, float]] = field(default_factory=list)


def run_bisection(evaluate: Callable[[float], float], threshold: float,
                  d_rho: float, eps_lambda: float, max_iters: int) -> BisectionState:
    """Bisect [0, d_rho] for the largest delta whose worst price meets the threshold.

    The exact-hit branch of the textbook loop cannot fire in floating point;
    it is replaced by |value - threshold| <= eps_lambda. The midpoint moves
    toward the crossing from both sides, so the final L is returned even on
    an iteration-capped exit.
    """
    b, d = 0.0, float(d_rho)
    state = BisectionState(b=b, d=d, L=d, k=0, lambda_at_L=math.nan)
    for k in range(max_iters):
        L = 0.5 * (b + d)
        value = evaluate(L)
        state.trace.append((k, b, d, L, value))
        state.k = k + 1
        state.L = L
        state.lambda_at_L = value
        if abs(value - threshold) <= eps_lambda:
            break
        if value > threshold:
            d = L
        else:
            b = L
        state.b, state.d = b, d
    return state


@dataclass(frozen=True)
class ShapingReport:
    """Everything a shaping run produced, analytical bounds included."""

    constants: ScenarioConstants
    analytic_qp: float
    analytic_dp: float
    delta_max: float
    lambda_at_delta_max: float
    lambda_at_d_rho: float
    d_rho: float
    eps_lambda: float
    iterations: int
    threshold: float
    strategy: str
    certified: bool
    trace: tuple[tuple[int, float, float, float, float], ...]


def _auto_bracket(s: Scenario, threshold: float, strategy: str,
                  opts: SolverOptions | None) -> tuple[float, float]:
    d = 1.0
    while d <= MAX_AUTO_BRACKET:
        value = lambda_bar(s, d, strategy, opts)
        if value > threshold:
            return d, value
        d *= 2.0
    raise ShapingError(
        "threshold unreachable: worst-case price stayed at or below "
        f"{threshold:.6g} up to delta = {MAX_AUTO_BRACKET:.3g}; "
        "every tested preference bound is admissible"
    )


def bisection_shape(s: Scenario, d_rho: float | None = None,
                    eps_lambda: float | None = None, max_iters: int = 40,
                    strategy: str = "boundary",
                    opts: SolverOptions | None = None) -> ShapingReport:
    """Find the largest admissible scalar preference bound by bisection.

    Requires an inadmissible upper bracket: either a caller-supplied d_rho
    with worst-case price above the threshold, or an automatic search that
    doubles from 1. eps_lambda defaults to a 0.1% band around the threshold.
    """
    threshold = s.price_cap
    if eps_lambda is None:
        eps_lambda = 1e-3 * threshold
    if d_rho is None:
        d_rho, lambda_at_d_rho = _auto_bracket(s, threshold, strategy, opts)
    else:
        lambda_at_d_rho = lambda_bar(s, d_rho, strategy, opts)
        if not (lambda_at_d_rho > threshold):
            raise ShapingError(
                f"d_rho = {d_rho:.6g} is not large enough: worst-case price "
                f"{lambda_at_d_rho:.6g} does not exceed the threshold {threshold:.6g}"
            )

    state = run_bisection(
        lambda delta: lambda_bar(s, delta, strategy, opts),
        threshold, d_rho, eps_lambda, max_iters,
    )
    qp = delta_max_qp(s)
    dp = delta_max_dp(s)
    return ShapingReport(
        constants=qp.constants,
        analytic_qp=qp.delta_max,
        analytic_dp=dp.delta_max,
        delta_max=state.L,
        lambda_at_delta_max=state.lambda_at_L,
        lambda_at_d_rho=lambda_at_d_rho,
        d_rho=d_rho,
        eps_lambda=eps_lambda,
        iterations=state.k,
        threshold=threshold,
        strategy=strategy,
        certified=state.lambda_at_L <= threshold + eps_lambda,
        trace=tuple(state.trace),
    )


@dataclass(frozen=True)
class ProbeResult:
    points: tuple[tuple[float, float | None], ...]
    violations: tuple[str, ...]

    @property
    def is_monotone(self) -> bool:
        return not self.violations


def monotonicity_probe(s: Scenario, deltas: Sequence[float],
                       strategy: str = "boundary",
                       opts: SolverOptions | None = None) -> ProbeResult:
    """Evaluate the worst-case price on a grid and flag any strict decrease.

    Solver failures are recorded per point and skipped, not fatal.
    """
    deltas = list(deltas)
    if any(d <= 0 for d in deltas):
        raise ValueError("all probe deltas must be positive")
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("probe deltas must be strictly increasing")
    points: list[tuple[float, float | None]] = []
    violations: list[str] = []
    last: tuple[float, float] | None = None
    for delta in deltas:
        try:
            value = lambda_bar(s, delta, strategy, opts)
        except EquilibriumError as exc:
            points.append((delta, None))
            violations.append(f"solver failure at delta={delta:.6g}: {exc}")
            continue
        points.append((delta, value))
        if last is not None:
            prev_delta, prev_value = last
            if value < prev_value - 1e-6 * (1.0 + abs(prev_value)):
                violations.append(
                    f"worst-case price decreased from {prev_value:.6g} at "
                    f"delta={prev_delta:.6g} to {value:.6g} at delta={delta:.6g}"
                )
        last = (delta, value)
    return ProbeResult(points=tuple(points), violations=tuple(violations))
