"""Scenario data model, validation, and shared dense-matrix utilities.

A scenario describes a finite-horizon market of linear-dynamics agents that
consume a shared resource. Agents are quadratic throughout: state penalty Q,
control penalty R, and a consumption form H mapping control effort to
resource units.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

#: Smallest eigenvalue a matrix must exceed to count as positive definite.
PD_TOLERANCE = 1e-10

#: Asymmetry above this (relative to the matrix norm) triggers a load warning.
SYMMETRY_WARN_TOLERANCE = 1e-8


class SocshapeError(Exception):
    """Base class for all package errors."""


class InvalidScenarioError(SocshapeError):
    """Raised when an operation requires a valid scenario but got violations."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        lines = "; ".join(str(v) for v in report.violations)
        super().__init__(f"invalid scenario: {lines}")


class NumericalError(SocshapeError):
    """A linear-algebra step failed in a way the preconditions should prevent."""


class EquilibriumError(SocshapeError):
    """Equilibrium solve failed; carries the iteration trace and best iterate."""

    def __init__(self, message: str, trace=None, best_prices=None):
        super().__init__(message)
        self.trace = trace
        self.best_prices = best_prices


class OracleError(SocshapeError):
    """Welfare-oracle guard or convergence failure."""


class ShapingError(SocshapeError):
    """Bisection shaping could not be initialized or completed."""


def spectral_norm(M: np.ndarray) -> float:
    """Largest singular value, via the eigenvalues of M^T M."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    ev = np.linalg.eigvalsh(M.T @ M)
    return float(math.sqrt(max(ev[-1], 0.0)))


def smallest_eigenvalue(S: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part of S."""
    S = np.asarray(S, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def quadratic_form(S: np.ndarray, v: np.ndarray) -> float:
    """v^T S v for a small dense S."""
    v = np.asarray(v, dtype=float)
    return float(v @ S @ v)


def symmetrize(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return (M + M^T)/2, warning if the asymmetry is more than roundoff."""
    M = np.asarray(M, dtype=float)
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 0.0)
    if asym > SYMMETRY_WARN_TOLERANCE * scale:
        warnings.warn(
            f"{name} is asymmetric (max deviation {asym:.3g}); using its symmetric part",
            stacklevel=3,
        )
    return 0.5 * (M + M.T)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class AgentModel:
    """One agent: linear dynamics, quadratic penalties, consumption map, supply.

    Fields
    ------
    A : (d, d) state transition
    B : (d, m) input map
    H : (m, m) symmetric PD consumption form; h(u) = u^T H u in resource units
    R : (m, m) symmetric PD control penalty
    Q : (d, d) symmetric PD state penalty (the shapeable preference)
    x0 : (d,) initial state
    supply : (N,) local resource supply per step, entries >= 0
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    x0: np.ndarray
    supply: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "H", "R", "Q"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        object.__setattr__(self, "x0", _frozen(np.atleast_1d(self.x0)))
        object.__setattr__(self, "supply", _frozen(np.atleast_1d(self.supply)))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1] if self.B.ndim == 2 else 1

    def consumption(self, u: np.ndarray) -> float:
        """Resource consumed by control u: u^T H u."""
        return quadratic_form(self.H, u)


@dataclass(frozen=True, eq=False)
class Scenario:
    """A market: agents, horizon N, and the price threshold lambda-dagger.

    `constants_override` lets a scenario file pin looser (gamma, alpha, beta,
    rho) than the tightest-from-data values, for reproducing externally
    published bounds.
    """

    agents: tuple[AgentModel, ...]
    horizon: int
    price_cap: float
    constants_override: Mapping[str, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.constants_override is not None:
            object.__setattr__(
                self, "constants_override", dict(self.constants_override)
            )

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def total_supply(self) -> np.ndarray:
        """C(t) = sum_i a_i(t), length N."""
        return np.sum([a.supply for a in self.agents], axis=0)

    def with_q(self, q: float) -> "Scenario":
        """Copy of the scenario with every agent's Q replaced by q*I."""
        agents = tuple(
            replace(a, Q=q * np.eye(a.state_dim)) for a in self.agents
        )
        return replace(self, agents=agents)

    def content_digest(self) -> str:
        """Stable hash of all scenario data, for caching."""
        h = hashlib.sha256()
        h.update(f"{self.horizon}:{self.price_cap!r}".encode())
        for a in self.agents:
            for arr in (a.A, a.B, a.H, a.R, a.Q, a.x0, a.supply):
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        if self.constants_override:
            h.update(json.dumps(self.constants_override, sort_keys=True).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class PriceVector:
    """A candidate or solved price trajectory, one entry per time step."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.atleast_1d(self.values)))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k: int) -> float:
        return float(self.values[k])

    @property
    def max(self) -> float:
        return float(np.max(self.values))


@dataclass(frozen=True)
class ScenarioConstants:
    """Scenario-wide bound constants.

    gamma: max_i ||x_i(0)||, alpha: max_i ||A_i||, beta: max_i ||B_i||
    (spectral norms), rho: min_i smallest eigenvalue of H_i.
    """

    gamma: float
    alpha: float
    beta: float
    rho: float


@dataclass(frozen=True)
class Violation:
    """One broken invariant. `agent` is None for scenario-level problems."""

    agent: int | None
    field: str
    message: str

    def __str__(self) -> str:
        where = "scenario" if self.agent is None else f"agent {self.agent}"
        return f"[{where}.{self.field}] {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def add(self, agent: int | None, field_name: str, message: str) -> None:
        self.violations.append(Violation(agent, field_name, message))

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)

    def __str__(self) -> str:
        if self.is_valid:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


def _check_spd(rep: ValidationReport, idx: int, name: str, M: np.ndarray, dim: int):
    if M.ndim != 2 or M.shape != (dim, dim):
        rep.add(idx, name, f"expected {dim}x{dim}, got shape {M.shape}")
        return
    scale = max(1.0, float(np.max(np.abs(M))))
    if float(np.max(np.abs(M - M.T))) > SYMMETRY_WARN_TOLERANCE * scale:
        rep.add(idx, name, "not symmetric")
    if smallest_eigenvalue(M) <= PD_TOLERANCE:
        rep.add(idx, name, f"{name} not positive definite "
                           f"(smallest eigenvalue {smallest_eigenvalue(M):.3g})")


def validate_scenario(s: Scenario) -> ValidationReport:
    """Check every scenario invariant; an empty report means valid.

    Diagnostics are data: this never raises, it reports. Dimension problems
    are reported per agent; the shared-dimension and total-supply checks run
    only on the agents that individually pass.
    """
    rep = ValidationReport()
    if s.n_agents < 1:
        rep.add(None, "agents", "at least one agent required")
        return rep
    if s.horizon < 1:
        rep.add(None, "horizon", f"horizon must be >= 1, got {s.horizon}")
    if not (s.price_cap > 0):
        rep.add(None, "price_cap", f"price threshold must be > 0, got {s.price_cap}")

    dims: list[tuple[int, int] | None] = []
    for i, a in enumerate(s.agents):
        ok = True
        if a.A.ndim != 2 or a.A.shape[0] != a.A.shape[1]:
            rep.add(i, "A", f"A must be square, got shape {a.A.shape}")
            dims.append(None)
            continue
        d = a.A.shape[0]
        if a.B.ndim != 2 or a.B.shape[0] != d:
            rep.add(i, "B", f"B must have {d} rows, got shape {a.B.shape}")
            ok = False
        m = a.B.shape[1] if a.B.ndim == 2 else 0
        if ok:
            _check_spd(rep, i, "H", a.H, m)
            _check_spd(rep, i, "R", a.R, m)
        _check_spd(rep, i, "Q", a.Q, d)
        if a.x0.shape != (d,):
            rep.add(i, "x0", f"x0 must have length {d}, got shape {a.x0.shape}")
            ok = False
        if a.supply.shape != (s.horizon,):
            rep.add(i, "supply",
                    f"supply must have length {s.horizon}, got shape {a.supply.shape}")
            ok = False
        if a.supply.ndim == 1 and np.any(a.supply < 0):
            t_bad = int(np.argmax(a.supply < 0))
            rep.add(i, "supply", f"negative supply at t={t_bad}")
        dims.append((d, m) if ok else None)

    usable = [dm for dm in dims if dm is not None]
    if usable and len(set(usable)) > 1:
        rep.add(None, "agents", f"agents must share (d, m); found {sorted(set(usable))}")

    if all(dm is not None for dm in dims) and len(set(usable)) == 1:
        C = s.total_supply
        for t in range(s.horizon):
            if not (C[t] > 0):
                rep.add(None, "total_supply", f"C(t) not positive at t={t} (C={C[t]:.6g})")
    return rep


def scenario_constants(s: Scenario) -> ScenarioConstants:
    """Tightest (gamma, alpha, beta, rho) from the data, honoring overrides."""
    rep = validate_scenario(s)
    if not rep.is_valid:
        raise InvalidScenarioError(rep)
    values = {
        "gamma": max(float(np.linalg.norm(a.x0)) for a in s.agents),
        "alpha": max(spectral_norm(a.A) for a in s.agents),
        "beta": max(spectral_norm(a.B) for a in s.agents),
        "rho": min(smallest_eigenvalue(a.H) for a in s.agents),
    }
    if s.constants_override:
        values.update({k: float(v) for k, v in s.constants_override.items()})
    return ScenarioConstants(**values)


# ---------------------------------------------------------------------------
# Scenario files
# ---------------------------------------------------------------------------

_KNOWN_CONSTANT_KEYS = {"gamma", "alpha", "beta", "rho"}


def _supply_from_spec(spec, horizon: int, idx: int) -> np.ndarray:
    if isinstance(spec, dict):
        if spec.get("kind") != "sinusoid":
            raise ValueError(
                f"agent {idx}: unknown supply descriptor kind {spec.get('kind')!r}"
            )
        amp = float(spec["amp"])
        period = float(spec["period_steps"])
        offset = float(spec["offset"])
        t = np.arange(horizon, dtype=float)
        return amp * np.sin(2.0 * math.pi * t / period) + offset
    return np.asarray(spec, dtype=float)


def scenario_from_dict(doc: Mapping) -> Scenario:
    """Build a Scenario from a parsed scenario document.

    Symmetric matrices (H, R, Q) are replaced by their symmetric part on
    load; a warning is emitted if the asymmetry is above roundoff scale.
    """
    horizon = int(doc["horizon"])
    price_cap = float(doc["price_cap"])
    agents = []
    for idx, spec in enumerate(doc["agents"]):
        if ("Q" in spec) == ("q" in spec):
            raise ValueError(f"agent {idx}: exactly one of 'Q' or 'q' must be present")
        A = np.asarray(spec["A"], dtype=float)
        d = A.shape[0] if A.ndim == 2 else 1
        if "q" in spec:
            Q = float(spec["q"]) * np.eye(d)
        else:
            Q = symmetrize(np.asarray(spec["Q"], dtype=float), f"agent {idx} Q")
        agents.append(
            AgentModel(
                A=A,
                B=np.asarray(spec["B"], dtype=float),
                H=symmetrize(np.asarray(spec["H"], dtype=float), f"agent {idx} H"),
                R=symmetrize(np.asarray(spec["R"], dtype=float), f"agent {idx} R"),
                Q=Q,
                x0=np.asarray(spec["x0"], dtype=float),
                supply=_supply_from_spec(spec["supply"], horizon, idx),
            )
        )
    override = doc.get("constants")
    if override is not None:
        unknown = set(override) - _KNOWN_CONSTANT_KEYS
        if unknown:
            raise ValueError(f"unknown constants override keys: {sorted(unknown)}")
        override = {k: float(v) for k, v in override.items()}
    return Scenario(
        agents=tuple(agents),
        horizon=horizon,
        price_cap=price_cap,
        constants_override=override,
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))


def example_scenario() -> Scenario:
    """The bundled three-agent sinusoidal-supply market."""
    text = resources.files("socshape.data").joinpath("three_agent_market.json").read_text()
    return scenario_from_dict(json.loads(text))


def example_scenario_path() -> Path:
    """Filesystem path of the bundled market, for the CLI."""
    return Path(str(resources.files("socshape.data").joinpath("three_agent_market.json")))
