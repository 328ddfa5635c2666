"""Exact static optimization on a finite probability space.

Maximizes sum_i p_i u_i(xi_i) subject to sum_i q_i xi_i = x0. The solver
inverts the marginal utility and root-finds the multiplier; the brute-force
search only evaluates utilities on refining grids, so the two share no code
path.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq

from .env import get_workers
from .exceptions import BracketingError, DomainError, NonInvertibleMarginalError, ScenarioError
from .preferences import DetExp, Log, Power


logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
BUDGET_TOL = 1e-10
LAMBDA_BRACKET = (1e-8, 1e8)
MAX_LOG_LAMBDA = 700.0
GRID_POINTS = 21
INITIAL_SPAN = 10.0
MIN_STEP = 1e-5
MAX_STATES = 6
MAX_RECENTRES = 200
EVAL_CHUNK = 1 << 16
PROBE_STEP = 1e-3


@dataclass(frozen=True)
class PerStateExp:
    """Exponential utility with risk aversion gamma_i in state i."""

    gammas: Tuple[float, ...]

    def __post_init__(self) -> None:
        if not all(g > 0 and math.isfinite(g) for g in self.gammas):
            raise DomainError(f"Per-state risk aversions must be positive, got {self.gammas}")


OracleUtility = Union[DetExp, PerStateExp, Power, Log]


@dataclass(frozen=True)
class FiniteMarket:
    """States with P-weights ``p``, Q-weights ``q`` and budget ``x0``."""

    p: Tuple[float, ...]
    q: Tuple[float, ...]
    x0: float

    def __post_init__(self) -> None:
        p, q = np.asarray(self.p, dtype=float), np.asarray(self.q, dtype=float)
        if p.ndim != 1 or p.shape != q.shape or p.size < 1:
            raise DomainError(f"p and q must be equal-length vectors, got {len(self.p)} and {len(self.q)}")
        for label, w in (("p", p), ("q", q)):
            if not np.isfinite(w).all() or not (w > 0).all():
                raise DomainError(f"Weights {label} must be strictly positive and finite")
            if abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise DomainError(f"Weights {label} sum to {w.sum()!r}, not 1")
        if not math.isfinite(self.x0):
            raise DomainError(f"Budget must be finite, got {self.x0}")

    @property
    def n(self) -> int:
        return len(self.p)

    @property
    def density(self) -> np.ndarray:
        """Y_i = q_i / p_i."""
        return np.asarray(self.q) / np.asarray(self.p)

    def budget(self, xi: np.ndarray) -> float:
        return float(np.dot(self.q, xi))

    def shifted(self, c: float) -> "FiniteMarket":
        return FiniteMarket(self.p, self.q, self.x0 + c)

    def to_dict(self) -> Dict[str, Any]:
        return {"p": list(self.p), "q": list(self.q), "x0": self.x0}

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "FiniteMarket":
        try:
            return cls(p=tuple(float(v) for v in doc["p"]), q=tuple(float(v) for v in doc["q"]),
                       x0=float(doc.get("x0", 0.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise DomainError(f"Invalid market document: {e}") from e

    @classmethod
    def from_json(cls, source: Union[str, Path]) -> "FiniteMarket":
        """Parse a market from a JSON file path or a JSON string."""
        if isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            try:
                text = Path(source).read_text()
            except OSError as e:
                raise ScenarioError(f"Cannot read market file {source}: {e.strerror}") from e
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"Market is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise DomainError("Market document must be a JSON object")
        return cls.from_dict(doc)

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, x0: float = 0.0) -> "FiniteMarket":
        """Dirichlet-drawn weights, renormalized so the sum is 1 to rounding."""
        def weights() -> Tuple[float, ...]:
            w = rng.dirichlet(np.ones(n)) * 0.9 + 0.1 / n
            return tuple((w / w.sum()).tolist())
        return cls(p=weights(), q=weights(), x0=x0)


@dataclass(frozen=True)
class OracleSolution:
    xi: np.ndarray
    lam: float
    residual: float
    value: float

    def to_dict(self) -> Dict[str, Any]:
        return {"xi": self.xi.tolist(), "lambda": self.lam, "budget_residual": self.residual,
                "expected_utility": self.value}


@dataclass(frozen=True)
class BruteForceResult:
    xi: np.ndarray
    value: float
    span: float
    step: float
    rounds: int
    evaluations: int

    def to_dict(self) -> Dict[str, Any]:
        return {"xi": self.xi.tolist(), "expected_utility": self.value, "span": self.span,
                "step": self.step, "rounds": self.rounds, "evaluations": self.evaluations}


def parse_oracle_utility(name: str, gamma: Optional[Union[float, Sequence[float]]] = None) -> OracleUtility:
    """Utility family from CLI flags: exponential (scalar or per-state gamma), power or log."""
    name = name.lower()
    if name in ("exponential", "exp"):
        if gamma is None:
            gamma = 1.0
        if isinstance(gamma, (list, tuple)):
            return PerStateExp(tuple(float(g) for g in gamma)) if len(gamma) > 1 else DetExp(float(gamma[0]))
        return DetExp(float(gamma))
    if name == "power":
        if gamma is None or isinstance(gamma, (list, tuple)):
            raise DomainError("Power utility needs a single gamma in (0, 1)")
        return Power(float(gamma))
    if name == "log":
        return Log()
    raise NonInvertibleMarginalError(f"No invertible marginal for utility '{name}'")


def _gammas(family: OracleUtility, n: int) -> np.ndarray:
    if isinstance(family, PerStateExp):
        if len(family.gammas) != n:
            raise DomainError(f"{len(family.gammas)} risk aversions for a {n}-state market")
        return np.asarray(family.gammas)
    return np.full(n, family.gamma)


def inverse_marginal(family: OracleUtility, n: int) -> Callable[[np.ndarray], np.ndarray]:
    """F = (u')^-1, applied statewise."""
    if isinstance(family, (DetExp, PerStateExp)):
        gammas = _gammas(family, n)
        return lambda y: -np.log(y) / gammas
    if isinstance(family, Power):
        exponent = 1.0 / (family.gamma - 1.0)
        return lambda y: y ** exponent
    if isinstance(family, Log):
        return lambda y: 1.0 / y
    raise NonInvertibleMarginalError(f"Marginal utility of {family!r} has no known inverse")


def expected_utility(market: FiniteMarket, family: OracleUtility, xi: np.ndarray) -> np.ndarray:
    """sum_i p_i u_i(xi_i) along the last axis; -inf outside the utility's domain."""
    xi = np.asarray(xi, dtype=float)
    p = np.asarray(market.p)
    if isinstance(family, (DetExp, PerStateExp)):
        gammas = _gammas(family, market.n)
        return (p * -np.exp(-gammas * xi) / gammas).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        if isinstance(family, Power):
            u = np.where(xi > 0, np.abs(xi) ** family.gamma / family.gamma, -np.inf)
        elif isinstance(family, Log):
            u = np.where(xi > 0, np.log(np.abs(xi)), -np.inf)
        else:
            raise NonInvertibleMarginalError(f"Unsupported utility {family!r}")
    return (p * u).sum(axis=-1)


def solve_lagrangian(market: FiniteMarket, family: OracleUtility) -> OracleSolution:
    """xi_i = F(lambda* Y_i) with sum_i q_i F(lambda* Y_i) = x0, root-found on log(lambda)."""
    F = inverse_marginal(family, market.n)
    y = market.density
    q = np.asarray(market.q)

    def residual(log_lam: float) -> float:
        with np.errstate(over="ignore"):
            return float(np.dot(q, F(np.exp(log_lam) * y)) - market.x0)

    lo, hi = math.log(LAMBDA_BRACKET[0]), math.log(LAMBDA_BRACKET[1])
    r_lo, r_hi = residual(lo), residual(hi)
    while not (r_lo > 0 > r_hi) and max(-lo, hi) < MAX_LOG_LAMBDA:
        lo, hi = 2 * lo, 2 * hi
        r_lo, r_hi = residual(lo), residual(hi)
        logger.debug(f"Expanded lambda bracket to [{math.exp(lo):.3g}, {math.exp(hi):.3g}]")
    if not (r_lo > 0 > r_hi) or not (math.isfinite(r_lo) and math.isfinite(r_hi)):
        logger.error(f"Budget residual keeps its sign on lambda in [{math.exp(lo):.3g}, {math.exp(hi):.3g}]")
        raise BracketingError(f"No sign change of the budget residual for lambda in "
                              f"[{math.exp(lo):.3g}, {math.exp(hi):.3g}]")
    log_lam = brentq(residual, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=500)
    lam = math.exp(log_lam)
    xi = F(lam * y)
    res = market.budget(xi) - market.x0
    if abs(res) >= BUDGET_TOL:
        logger.error(f"Budget residual {res:.3g} after root-finding")
        raise BracketingError(f"Root-finding stopped with budget residual {res:.3g}")
    value = float(expected_utility(market, family, xi))
    logger.info(f"Lagrangian solution: lambda*={lam:.10g}, residual={res:.2e}")
    return OracleSolution(xi=xi, lam=lam, residual=float(res), value=value)


def closed_form_exponential(market: FiniteMarket, gamma: Union[float, Sequence[float]],
                            x0: Optional[float] = None) -> np.ndarray:
    """xi_i = (1/gamma_i)(c (x0 + sum_j q_j ln(Y_j)/gamma_j) - ln Y_i), c = 1/sum_j q_j/gamma_j."""
    x0 = market.x0 if x0 is None else x0
    gammas = np.broadcast_to(np.asarray(gamma, dtype=float), (market.n,))
    if not (gammas > 0).all():
        raise DomainError(f"Risk aversion must be positive, got {gamma}")
    q = np.asarray(market.q)
    log_y = np.log(market.density)
    c = 1.0 / np.dot(q, 1.0 / gammas)
    return (c * (x0 + np.dot(q, log_y / gammas)) - log_y) / gammas


def _pivot(market: FiniteMarket) -> int:
    return int(np.argmax(market.q))


def _free_to_full(market: FiniteMarket, free: np.ndarray) -> np.ndarray:
    """Insert the budget-implied coordinate of the largest-q state."""
    q = np.asarray(market.q)
    k = _pivot(market)
    rest = np.delete(q, k)
    implied = (market.x0 - free @ rest) / q[k]
    return np.insert(free, k, implied, axis=-1)


def _grid_best(market: FiniteMarket, family: OracleUtility, centre: np.ndarray,
               offsets: np.ndarray, workers: int) -> Tuple[np.ndarray, float, int]:
    """Best grid point (as grid indices), its value and the number of points evaluated."""
    dims = centre.size
    g = offsets.size
    total = g ** dims

    def evaluate(start: int) -> Tuple[int, float]:
        flat = np.arange(start, min(start + EVAL_CHUNK, total))
        idx = np.stack(np.unravel_index(flat, (g,) * dims), axis=-1)
        values = expected_utility(market, family, _free_to_full(market, centre + offsets[idx]))
        k = int(np.argmax(values))
        return int(flat[k]), float(values[k])

    starts = range(0, total, EVAL_CHUNK)
    if workers == 1 or total <= EVAL_CHUNK:
        results = [evaluate(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, starts))
    # ties resolve to the lowest flat index
    best_flat, best_value = max(results, key=lambda r: (r[1], -r[0]))
    return np.array(np.unravel_index(best_flat, (g,) * dims)), best_value, total


def brute_force(market: FiniteMarket, family: OracleUtility, grid_points: int = GRID_POINTS,
                span: float = INITIAL_SPAN, min_step: float = MIN_STEP,
                workers: Optional[int] = None) -> BruteForceResult:
    """Maximize over the budget hyperplane on refining grids of all coordinates but the largest-q one.

    Starts at xi = x0 * 1 with half-width ``span``; the window re-centres on
    the best point while it sits on the grid boundary and otherwise shrinks
    tenfold, until the grid spacing is at most ``min_step``.
    """
    if market.n > MAX_STATES:
        raise DomainError(f"Brute force supports at most {MAX_STATES} states, got {market.n}")
    if grid_points < 3 or grid_points % 2 == 0:
        raise DomainError(f"grid_points must be odd and at least 3, got {grid_points}")
    if market.n == 1:
        xi = np.array([market.x0 / market.q[0]])
        return BruteForceResult(xi, float(expected_utility(market, family, xi)), 0.0, 0.0, 0, 1)
    workers = workers or get_workers()
    centre = np.full(market.n - 1, float(market.x0))
    rounds = evaluations = recentres = 0
    value = -math.inf
    while True:
        offsets = np.linspace(-span, span, grid_points)
        best, value, count = _grid_best(market, family, centre, offsets, workers)
        evaluations += count
        rounds += 1
        centre = centre + offsets[best]
        step = offsets[1] - offsets[0]
        on_edge = bool(((best == 0) | (best == grid_points - 1)).any())
        if on_edge and recentres < MAX_RECENTRES:
            recentres += 1
            continue
        if step <= min_step:
            break
        span /= 10.0
    xi = _free_to_full(market, centre)
    logger.info(f"Brute force: {rounds} rounds, {evaluations} evaluations, final step {step:.1e}")
    return BruteForceResult(xi=xi, value=float(value), span=float(span), step=float(step),
                            rounds=rounds, evaluations=evaluations)


def budget_directions(market: FiniteMarket) -> List[np.ndarray]:
    """Unit directions d with sum_i q_i d_i = 0, both signs."""
    q = np.asarray(market.q)
    directions = []
    for i in range(market.n - 1):
        d = np.zeros(market.n)
        d[i], d[i + 1] = 1.0 / q[i], -1.0 / q[i + 1]
        d /= np.linalg.norm(d)
        directions.extend((d, -d))
    return directions


def uniqueness_check(market: FiniteMarket, family: OracleUtility, xi: np.ndarray,
                     step: float = PROBE_STEP) -> Dict[str, Any]:
    """Expected utility at xi versus budget-preserving perturbations of size ``step``."""
    base = float(expected_utility(market, family, xi))
    drops = [base - float(expected_utility(market, family, xi + step * d)) for d in budget_directions(market)]
    strict = all(drop > 0 for drop in drops)
    if not strict:
        logger.warning(f"Perturbation did not lower expected utility: min drop {min(drops):.3g}")
    return {"value": base, "min_drop": min(drops), "strict": strict, "directions": len(drops)}


def oracle_report(market: FiniteMarket, family: OracleUtility, brute: bool = True) -> Dict[str, Any]:
    """Solver result, brute-force agreement and uniqueness check as one document."""
    solution = solve_lagrangian(market, family)
    report: Dict[str, Any] = {"market": market.to_dict(), "solution": solution.to_dict()}
    if isinstance(family, (DetExp, PerStateExp)):
        gamma = family.gammas if isinstance(family, PerStateExp) else family.gamma
        closed = closed_form_exponential(market, gamma)
        report["closed_form_delta"] = float(np.abs(closed - solution.xi).max())
    if brute and market.n <= MAX_STATES:
        result = brute_force(market, family)
        report["brute_force"] = result.to_dict()
        report["brute_force_delta"] = float(np.abs(result.xi - solution.xi).max())
    report["uniqueness"] = uniqueness_check(market, family, solution.xi)
    return report
