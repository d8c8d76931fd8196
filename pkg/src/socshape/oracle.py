"""Independent ground-truth generators for desk-scale verification.

The welfare oracle maximizes total utility under the aggregate supply
constraint with an augmented-Lagrangian loop and recovers the per-step
multipliers, which at equilibrium coincide with the clearing prices. It
never touches the Riccati machinery, so it is a genuinely separate route
to the same answer. Test-only: guarded to small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AgentModel, OracleError, Scenario
from .lqr import AgentTrajectory, response_gradient, response_objective

#: The oracle refuses instances with more decision variables than this.
MAX_ORACLE_VARIABLES = 64


@dataclass(frozen=True)
class OracleSolution:
    """Welfare-optimal controls with multiplier estimates of the prices."""

    controls: tuple[np.ndarray, ...]
    multipliers: np.ndarray
    welfare: float
    feasibility_residuals: np.ndarray


def _welfare(s: Scenario, controls, zero) -> float:
    return sum(
        response_objective(a, zero, U) for a, U in zip(s.agents, controls)
    )


def _constraints(s: Scenario, controls) -> np.ndarray:
    """g_t = total consumption - C(t); feasible when g_t <= 0."""
    demand = np.zeros(s.horizon)
    for agent, U in zip(s.agents, controls):
        for t in range(s.horizon):
            demand[t] += agent.consumption(U[t])
    return demand - s.total_supply


def _augmented(s, controls, zero, mu, rho_pen):
    """Penalized objective and its gradient, both to be ascended."""
    g = _constraints(s, controls)
    shifted = np.maximum(0.0, mu + rho_pen * g)
    value = _welfare(s, controls, zero)
    value -= float(np.sum(shifted**2 - mu**2)) / (2.0 * rho_pen)
    grads = []
    for agent, U in zip(s.agents, controls):
        gr = response_gradient(agent, zero, U)
        for t in range(s.horizon):
            if shifted[t] > 0.0:
                gr[t] -= shifted[t] * 2.0 * (agent.H @ U[t])
        grads.append(gr)
    return value, grads, g


def _flat(arrs) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrs])


def _ascend(s, controls, zero, mu, rho_pen, tol, max_iters=4000):
    """Gradient ascent with a Barzilai-Borwein trial step and backtracking.

    Stops at the gradient tolerance or when line-search improvements drop
    below floating-point resolution; the caller judges the final gradient.
    """
    value, grads, _ = _augmented(s, controls, zero, mu, rho_pen)
    g_flat = _flat(grads)
    step = 1.0 / max(1.0, float(np.linalg.norm(g_flat)))
    prev_flat = None
    prev_grad = None
    for _ in range(max_iters):
        gnorm = float(np.linalg.norm(g_flat))
        u_flat = _flat(controls)
        if gnorm <= tol * max(1.0, float(np.linalg.norm(u_flat))):
            break
        if prev_flat is not None:
            du = u_flat - prev_flat
            dg = g_flat - prev_grad
            denom = -float(du @ dg)
            if denom > 0:
                step = float(du @ du) / denom
        step = min(max(step, 1e-14), 1e12)
        prev_flat, prev_grad = u_flat, g_flat
        trial = step
        improved = False
        for _bt in range(60):
            cand = [U + trial * gr for U, gr in zip(controls, grads)]
            cand_value, cand_grads, _ = _augmented(s, cand, zero, mu, rho_pen)
            if cand_value >= value + 1e-4 * trial * gnorm * gnorm:
                controls, value, grads = cand, cand_value, cand_grads
                g_flat = _flat(grads)
                improved = True
                break
            trial *= 0.5
        if not improved:
            break
    return controls, float(np.linalg.norm(_flat(grads)))


def welfare_oracle(s: Scenario, inner_tol: float = 1e-10,
                   max_outer: int = 60) -> OracleSolution:
    """Maximize total welfare under per-step aggregate supply limits.

    Trades and slacks are eliminated: any control plan meeting the
    aggregate constraint extends to a feasible zero-sum trade allocation,
    and neither appears in the objective. The multiplier estimates converge
    to the equilibrium prices.
    """
    n, N = s.n_agents, s.horizon
    m = s.agents[0].input_dim
    size = n * N * m
    if size > MAX_ORACLE_VARIABLES:
        raise OracleError(
            f"instance too large for the oracle: n*N*m = {size} > {MAX_ORACLE_VARIABLES}"
        )
    zero = np.zeros(N)
    C = s.total_supply
    controls = [np.zeros((N, a.input_dim)) for a in s.agents]
    mu = np.zeros(N)
    rho_pen = 10.0
    prev_violation = np.inf
    converged = False

    for _outer in range(max_outer):
        controls, gnorm, = _ascend(s, controls, zero, mu, rho_pen, inner_tol)
        if gnorm > 1e-4 * max(1.0, float(np.linalg.norm(_flat(controls)))):
            raise OracleError(
                f"inner ascent stalled (gradient norm {gnorm:.3e} at penalty {rho_pen:.1e})"
            )
        g = _constraints(s, controls)
        kkt = np.maximum(g, -mu / rho_pen)
        violation = float(np.max(np.abs(kkt) / C))
        mu = np.maximum(0.0, mu + rho_pen * g)
        if violation <= 1e-10:
            converged = True
            break
        if violation > 0.25 * prev_violation and rho_pen < 1e12:
            rho_pen *= 10.0
        prev_violation = violation

    if not converged:
        raise OracleError(
            f"augmented-Lagrangian loop did not converge in {max_outer} rounds "
            f"(violation {prev_violation:.3e})"
        )
    g = _constraints(s, controls)
    return OracleSolution(
        controls=tuple(controls),
        multipliers=mu,
        welfare=float(_welfare(s, controls, zero)),
        feasibility_residuals=np.maximum(g, 0.0),
    )


@dataclass(frozen=True)
class BestResponseCheck:
    passed: bool
    worst_improvement: float
    trials: int


def best_response_check(agent: AgentModel, prices, candidate: AgentTrajectory,
                        trials: int = 100, seed: int = 0) -> BestResponseCheck:
    """Try to beat a candidate trajectory at the given prices.

    Runs random control perturbations at several scales plus a gradient
    ascent polish from the candidate; fails if anything improves the
    objective beyond relative roundoff.
    """
    lam = np.asarray(prices.values if hasattr(prices, "values") else prices, float)
    base = response_objective(agent, lam, candidate.controls)
    rng = np.random.default_rng(seed)
    worst = -np.inf
    scales = (1e-3, 1e-2, 1e-1, 1.0)
    for trial in range(trials):
        noise = rng.standard_normal(candidate.controls.shape)
        perturbed = candidate.controls + scales[trial % len(scales)] * noise
        worst = max(worst, response_objective(agent, lam, perturbed) - base)

    controls = candidate.controls.copy()
    value = base
    step = 1.0
    prev = None
    for _ in range(400):
        grad = response_gradient(agent, lam, controls)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= 1e-13 * max(1.0, float(np.linalg.norm(controls))):
            break
        if prev is not None:
            du = controls.ravel() - prev[0]
            dg = grad.ravel() - prev[1]
            denom = -float(du @ dg)
            if denom > 0:
                step = float(du @ du) / denom
        prev = (controls.ravel().copy(), grad.ravel().copy())
        trial_step = min(max(step, 1e-14), 1e12)
        for _bt in range(60):
            cand = controls + trial_step * grad
            cand_value = response_objective(agent, lam, cand)
            if cand_value >= value + 1e-4 * trial_step * gnorm * gnorm:
                controls, value = cand, cand_value
                break
            trial_step *= 0.5
        else:
            break
    worst = max(worst, value - base)

    tolerance = 1e-8 * (1.0 + abs(base))
    return BestResponseCheck(
        passed=worst <= tolerance,
        worst_improvement=float(worst),
        trials=trials,
    )
