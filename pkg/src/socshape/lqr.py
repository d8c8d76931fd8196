"""Per-agent optimal response to a price trajectory.

With prices fixed, each agent faces a finite-horizon LQR whose effective
control penalty at step k is R + lambda_k * H: the price converts consumed
resource into cost. The backward Riccati recursion yields feedback gains,
the forward rollout yields the trajectory, and the adjoint recursion yields
objective gradients for independent optimality checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import AgentModel, NumericalError, PriceVector, quadratic_form

#: Rollout dynamics must close to this absolute tolerance (per unit state).
DYNAMICS_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RiccatiSolution:
    """Cost-to-go matrices P_0..P_N and feedback gains K_0..K_{N-1}.

    The optimal control is u(k) = -K_k x(k); P_N equals the agent's Q.
    """

    P: tuple[np.ndarray, ...]
    gains: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class AgentTrajectory:
    """States x(0..N), controls u(0..N-1), and per-step consumption h(u)."""

    states: np.ndarray
    controls: np.ndarray
    consumption: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.controls)


def _price_array(prices, horizon: int) -> np.ndarray:
    lam = prices.values if isinstance(prices, PriceVector) else np.asarray(prices, float)
    if lam.shape != (horizon,):
        raise ValueError(f"expected {horizon} prices, got shape {lam.shape}")
    if np.any(lam < 0):
        k = int(np.argmax(lam < 0))
        raise ValueError(f"negative price {lam[k]:.6g} at step {k}")
    return lam


def riccati_backward(agent: AgentModel, prices) -> RiccatiSolution:
    """Backward Riccati pass with the price-dependent penalty R + lambda_k H.

    Raises ValueError for negative prices and NumericalError if the inner
    matrix B^T P B + R + lambda H loses positive definiteness (impossible
    under the preconditions, checked anyway).
    """
    N = len(agent.supply)
    lam = _price_array(prices, N)
    A, B, Q = agent.A, agent.B, agent.Q
    P = [None] * (N + 1)
    gains = [None] * N
    P[N] = Q
    Pk = Q
    for k in range(N - 1, -1, -1):
        penalty = agent.R + lam[k] * agent.H
        M = B.T @ Pk @ B + penalty
        M = 0.5 * (M + M.T)
        G = B.T @ Pk @ A
        try:
            K = cho_solve(cho_factor(M), G)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"inner matrix not SPD at step {k}: cond={np.linalg.cond(M):.3e}, "
                f"smallest eigenvalue={np.linalg.eigvalsh(M)[0]:.3e}"
            ) from exc
        Pk = A.T @ Pk @ A + Q - G.T @ K
        Pk = 0.5 * (Pk + Pk.T)
        P[k] = Pk
        gains[k] = K
    return RiccatiSolution(P=tuple(P), gains=tuple(gains))


def rollout(agent: AgentModel, controls: np.ndarray) -> AgentTrajectory:
    """Propagate the dynamics from x0 under the given open-loop controls."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    N = controls.shape[0]
    d = agent.state_dim
    states = np.zeros((N + 1, d))
    consumption = np.zeros(N)
    states[0] = agent.x0
    for k in range(N):
        consumption[k] = agent.consumption(controls[k])
        states[k + 1] = agent.A @ states[k] + agent.B @ controls[k]
    return AgentTrajectory(states=states, controls=controls, consumption=consumption)


def best_response(agent: AgentModel, prices) -> AgentTrajectory:
    """The agent's payoff-maximizing trajectory at the given prices."""
    sol = riccati_backward(agent, prices)
    N = len(agent.supply)
    controls = np.zeros((N, agent.input_dim))
    x = np.array(agent.x0)
    for k in range(N):
        controls[k] = -(sol.gains[k] @ x)
        x = agent.A @ x + agent.B @ controls[k]
    return rollout(agent, controls)


def agent_payoff(agent: AgentModel, prices, traj: AgentTrajectory,
                 trades: np.ndarray) -> float:
    """Full payoff: quadratic utility plus trading income sum(lambda_t e_t).

    Trades must be feasible, e(t) <= a(t) - h(u(t)) up to roundoff slack;
    an infeasible step raises ValueError naming it.
    """
    N = traj.horizon
    lam = _price_array(prices, N)
    trades = np.asarray(trades, dtype=float)
    for t in range(N):
        cap = agent.supply[t] - traj.consumption[t]
        if trades[t] > cap + 1e-9:
            raise ValueError(
                f"infeasible trade at step {t}: e={trades[t]:.6g} exceeds "
                f"surplus {cap:.6g}"
            )
    total = -quadratic_form(agent.Q, traj.states[N])
    for t in range(N):
        total -= quadratic_form(agent.Q, traj.states[t])
        total -= quadratic_form(agent.R, traj.controls[t])
        total += lam[t] * trades[t]
    return total


def response_objective(agent: AgentModel, prices, controls: np.ndarray,
                       traj: AgentTrajectory | None = None) -> float:
    """Reduced objective after eliminating trades at positive prices.

    Equals the quadratic utility with the price-augmented control penalty
    plus the fixed income term sum(lambda_t a_t); concave in the controls.
    Pass a trajectory already rolled out for these controls to skip the
    rollout.
    """
    if traj is None:
        traj = rollout(agent, controls)
    N = traj.horizon
    lam = _price_array(prices, N)
    total = -quadratic_form(agent.Q, traj.states[N])
    for t in range(N):
        total -= quadratic_form(agent.Q, traj.states[t])
        total -= quadratic_form(agent.R + lam[t] * agent.H, traj.controls[t])
        total += lam[t] * agent.supply[t]
    return total


def response_gradient(agent: AgentModel, prices, controls: np.ndarray) -> np.ndarray:
    """Gradient of response_objective via the costate recursion.

    Independent of the Riccati path: it only uses the rollout and the
    backward adjoint p_t = -2 Q x_t + A^T p_{t+1}.
    """
    traj = rollout(agent, controls)
    N = traj.horizon
    lam = _price_array(prices, N)
    A, B, Q = agent.A, agent.B, agent.Q
    grad = np.zeros_like(traj.controls)
    p = -2.0 * (Q @ traj.states[N])
    for k in range(N - 1, -1, -1):
        grad[k] = -2.0 * ((agent.R + lam[k] * agent.H) @ traj.controls[k]) + B.T @ p
        p = -2.0 * (Q @ traj.states[k]) + A.T @ p
    return grad
