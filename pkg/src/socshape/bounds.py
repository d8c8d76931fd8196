"""Closed-form admissible bounds on the state-penalty norm.

Two conservative routes give the largest delta such that any agent
preference with ||Q|| <= delta keeps every equilibrium price at or below
the threshold. The QP route bounds the stationarity system of the stacked
control problem directly; the DP route bounds the Riccati cost-to-go
matrices step by step and is never tighter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Scenario, ScenarioConstants, scenario_constants


@dataclass(frozen=True)
class BoundReport:
    """Per-step caps on delta and their minimum, for one derivation route."""

    constants: ScenarioConstants
    per_step_caps: tuple[float, ...]
    delta_max: float
    method: str
    notes: tuple[str, ...] = ()


def _alpha_powers(alpha: float, top: int) -> list[float]:
    # Iterative products; powers[0] = 1 encodes the 0**0 = 1 convention.
    powers = [1.0]
    for _ in range(top):
        powers.append(powers[-1] * alpha)
    return powers


def _build_report(s: Scenario, method: str) -> BoundReport:
    c = scenario_constants(s)
    C = s.total_supply
    N = s.horizon
    n = s.n_agents
    powers = _alpha_powers(c.alpha, 2 * N)
    root_supply = [math.sqrt(C[j] / c.rho) for j in range(N)]

    caps = []
    for k in range(N):
        numerator = math.sqrt(C[k] * c.rho) * s.price_cap / (n * c.beta)
        terms: list[float] = []
        if method == "DP" and k == 0:
            terms = [c.gamma * powers[2 * t - 1] for t in range(1, N + 1)]
        else:
            for t in range(k + 1, N + 1):
                terms.append(c.gamma * powers[2 * t - k - 1])
                if method == "DP":
                    inner = range(k)
                else:
                    inner = (j for j in range(t) if j != k)
                terms.extend(
                    c.beta * root_supply[j] * powers[2 * t - j - k - 2] for j in inner
                )
        denominator = math.fsum(terms)
        caps.append(numerator / denominator if denominator > 0 else math.inf)

    notes = ()
    if c.alpha == 0:
        notes = ("alpha = 0: zeroth powers treated as 1, higher powers vanish",)
    return BoundReport(
        constants=c,
        per_step_caps=tuple(caps),
        delta_max=min(caps),
        method=method,
        notes=notes,
    )


def delta_max_qp(s: Scenario) -> BoundReport:
    """Largest admissible preference norm from the stacked-control route."""
    return _build_report(s, "QP")


def delta_max_dp(s: Scenario) -> BoundReport:
    """Largest admissible preference norm from the cost-to-go route.

    Dominates the QP value on every scenario: its inner supply sums range
    over a subset of the QP sums, so each per-step cap is at least as large.
    """
    return _build_report(s, "DP")
