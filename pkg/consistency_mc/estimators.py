"""Monte Carlo expectations under P, under Q by density weighting, and conditional on F_s.

Conditional Q-expectations come in two flavours: a nested estimator that
restarts inner paths from each outer state using dW^Q as the driving noise,
and a least-squares projection on polynomials of the state at s used as a
cross-check.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_triangular

from .env import get_workers
from .exceptions import (
    DegenerateSampleError,
    RankDeficiencyError,
    StateInsufficiencyError,
    WeightError,
)
from .paths import PathBatch, StrategyRule, advance_under_q
from .rng import nested_stream, standard_normals

if TYPE_CHECKING:
    from .scenario import ScenarioSpec


logger = logging.getLogger(__name__)

PLAIN = "plain"
Z_WEIGHTED = "z_weighted"
NESTED = "nested"
REGRESSION = "regression"
RATIO = "ratio"

RECONSTRUCTIBLE = ("W", "logZ", "gamma_inv", "X", "V")
RANK_TOL = 1e-10


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int
    method: str = PLAIN

    def band(self, k: float = 3.0) -> Tuple[float, float]:
        return (self.mean - k * self.se, self.mean + k * self.se)

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean, "se": self.se, "n": self.n, "method": self.method}


@dataclass(frozen=True)
class ConditionalEstimate:
    """Per-outer-path estimates of E_Q[X_t | F_s].

    Nested estimates carry a per-path ``se``; regression estimates carry the
    per-point standard error of the fitted value plus global fit diagnostics.
    """

    values: np.ndarray
    se: np.ndarray
    method: str
    n_inner: Optional[int] = None
    fit: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_outer(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Target:
    """A recipe computing a random variable at time t from the state dictionary at t.

    ``requires`` lists the state entries the recipe reads; only entries in
    ``RECONSTRUCTIBLE`` can be restarted from time s. Wealth (``V``) also
    needs the strategy ``rule`` that drives it.
    """

    fn: Callable[[Dict[str, np.ndarray]], np.ndarray]
    requires: Tuple[str, ...] = ("W", "logZ")
    rule: Optional[StrategyRule] = None
    name: str = "target"

    @classmethod
    def constant(cls, value: float) -> "Target":
        return cls(fn=lambda state: np.full(state["W"].shape, float(value)), name=f"constant {value}")

    @classmethod
    def channel(cls, name: str) -> "Target":
        """The state entry ``name`` itself."""
        return cls(fn=lambda state: state[name], requires=tuple(dict.fromkeys(("W", "logZ", name))), name=name)


def mc_mean(values: Union[Sequence[float], np.ndarray], method: str = PLAIN) -> Estimate:
    """Sample mean with standard error stdev / sqrt(n)."""
    values = np.asarray(values, dtype=float).ravel()
    n = values.size
    if n < 2:
        raise DegenerateSampleError(f"Need at least 2 samples, got {n}")
    if not np.isfinite(values).all():
        raise DegenerateSampleError(f"{int((~np.isfinite(values)).sum())} non-finite sample(s)")
    se = float(values.std(ddof=1) / np.sqrt(n))
    return Estimate(mean=float(values.mean()), se=se, n=n, method=method)


def _check_weights(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if not (weights > 0).all():
        bad = int((~(weights > 0)).sum())
        logger.error(f"Density weights must be strictly positive; {bad} offending sample(s)")
        raise WeightError(f"{bad} non-positive density weight(s)")
    return weights


def q_expectation(values: np.ndarray, weights: np.ndarray) -> Estimate:
    """E_Q[X] = E_P[Z X], estimated from P-samples of X and Z."""
    weights = _check_weights(weights)
    return mc_mean(weights * np.asarray(values, dtype=float), method=Z_WEIGHTED)


def ratio_estimate(numerator: np.ndarray, denominator: np.ndarray) -> Estimate:
    """mean(numerator) / mean(denominator), with a delta-method standard error."""
    num = np.asarray(numerator, dtype=float).ravel()
    den = np.asarray(denominator, dtype=float).ravel()
    a = mc_mean(num)
    b = mc_mean(den)
    if b.mean == 0:
        raise DegenerateSampleError("Ratio estimate with zero denominator mean")
    ratio = a.mean / b.mean
    influence = (num - ratio * den) / b.mean
    return Estimate(mean=ratio, se=float(influence.std(ddof=1) / np.sqrt(num.size)), n=num.size, method=RATIO)


class ColumnMoments:
    """Streaming means and co-moments of named sample columns.

    Chunks are merged with the pairwise update of Chan et al., so feeding the
    same chunks in the same order always reproduces the same statistics.
    """

    def __init__(self) -> None:
        self.n = 0
        self._mean: Dict[str, np.ndarray] = {}
        self._comoment: Dict[Tuple[str, str], np.ndarray] = {}

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(sorted(self._mean))

    def add(self, **samples: np.ndarray) -> None:
        """Add one chunk; every sample array has one row per path."""
        arrays = {k: np.asarray(v, dtype=float) for k, v in samples.items()}
        if self.n and set(arrays) != set(self._mean):
            raise ValueError(f"Chunk names {sorted(arrays)} differ from {sorted(self._mean)}")
        names = sorted(arrays)
        n_b = arrays[names[0]].shape[0]
        for name in names:
            if not np.isfinite(arrays[name]).all():
                raise DegenerateSampleError(f"Non-finite samples in '{name}'")
        mean_b = {k: v.mean(axis=0) for k, v in arrays.items()}
        dev = {k: arrays[k] - mean_b[k] for k in names}
        n_a = self.n
        n = n_a + n_b
        for i, a in enumerate(names):
            for b in names[i:]:
                m_b = (dev[a] * dev[b]).sum(axis=0)
                if n_a:
                    delta = (mean_b[a] - self._mean[a]) * (mean_b[b] - self._mean[b])
                    m_b = self._comoment[(a, b)] + m_b + delta * n_a * n_b / n
                self._comoment[(a, b)] = m_b
        for name in names:
            if n_a:
                self._mean[name] = self._mean[name] + (mean_b[name] - self._mean[name]) * n_b / n
            else:
                self._mean[name] = mean_b[name]
        self.n = n

    def _cov(self, a: str, b: str) -> np.ndarray:
        key = (a, b) if (a, b) in self._comoment else (b, a)
        return self._comoment[key] / (self.n - 1)

    def _require(self) -> None:
        if self.n < 2:
            raise DegenerateSampleError(f"Need at least 2 samples, got {self.n}")

    def mean(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Column means of ``name`` and their standard errors."""
        self._require()
        return self._mean[name], np.sqrt(np.maximum(self._cov(name, name), 0.0) / self.n)

    def estimate(self, name: str, column: int = 0, method: str = PLAIN) -> Estimate:
        mean, se = self.mean(name)
        return Estimate(mean=float(np.atleast_1d(mean)[column]), se=float(np.atleast_1d(se)[column]),
                        n=self.n, method=method)

    def ratio(self, num: str, den: str) -> Tuple[np.ndarray, np.ndarray]:
        """Column ratios mean(num)/mean(den) with delta-method standard errors."""
        self._require()
        a, b = self._mean[num], self._mean[den]
        r = a / b
        var = (self._cov(num, num) - 2 * r * self._cov(num, den) + r ** 2 * self._cov(den, den)) / b ** 2
        return r, np.sqrt(np.maximum(var, 0.0) / self.n)

    def difference(self, a: str, b: str) -> Tuple[np.ndarray, np.ndarray]:
        """Column differences mean(a) - mean(b) with paired standard errors."""
        self._require()
        var = self._cov(a, a) - 2 * self._cov(a, b) + self._cov(b, b)
        return self._mean[a] - self._mean[b], np.sqrt(np.maximum(var, 0.0) / self.n)


def _initial_state(batch: PathBatch, target: Target, i_s: int) -> Dict[str, np.ndarray]:
    unknown = [name for name in target.requires if name not in RECONSTRUCTIBLE]
    if unknown:
        raise StateInsufficiencyError(
            f"Target '{target.name}' needs {unknown}, which cannot be rebuilt from the state at s")
    if "V" in target.requires and target.rule is None:
        raise StateInsufficiencyError(f"Target '{target.name}' reads wealth but carries no strategy rule")
    names = tuple(dict.fromkeys(("W", "logZ") + target.requires))
    missing = [name for name in names if not batch.has(name)]
    if missing:
        raise StateInsufficiencyError(f"Outer batch lacks {missing} needed by target '{target.name}'")
    return {name: batch.channel(name)[:, i_s] for name in names}


def conditional_q_expectation_nested(spec: "ScenarioSpec", batch: PathBatch, s: float, t: float,
                                     target: Target, n_outer: Optional[int] = None,
                                     n_inner: Optional[int] = None, seed: Optional[int] = None,
                                     workers: Optional[int] = None) -> ConditionalEstimate:
    """Inner-simulate from the first ``n_outer`` outer states at s and average the target at t."""
    grid = batch.grid
    i_s, i_t = grid.index_of(s), grid.index_of(t)
    if not i_s < i_t:
        raise ValueError(f"Need s < t, got s={s}, t={t}")
    n_outer = min(n_outer or spec.n_outer, batch.n_paths)
    m = n_inner or spec.n_inner
    seed = spec.seed if seed is None else seed
    state_s = _initial_state(batch, target, i_s)
    sqrt_dt = np.sqrt(grid.dt)

    def inner(j: int) -> Tuple[float, float]:
        start = {name: np.full(m, values[j]) for name, values in state_s.items()}
        dWQ = standard_normals(seed, nested_stream(j, i_s), m, i_t - i_s, workers=1) * sqrt_dt
        state_t = advance_under_q(spec, grid, i_s, start, dWQ, noise_beta=spec.noise_beta, rule=target.rule)
        est = mc_mean(target.fn(state_t), method=NESTED)
        return est.mean, est.se

    workers = workers or get_workers()
    if workers == 1:
        results = [inner(j) for j in range(n_outer)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(inner, range(n_outer)))
    values = np.array([r[0] for r in results])
    se = np.array([r[1] for r in results])
    logger.info(f"Nested estimate of '{target.name}' at ({s}, {t}): {n_outer} outer x {m} inner, "
                f"median inner se {np.median(se):.3g}")
    return ConditionalEstimate(values=values, se=se, method=NESTED, n_inner=m)


def _standardize(x: np.ndarray) -> Optional[np.ndarray]:
    sd = x.std()
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, float(np.abs(x).max())):
        return None
    return (x - x.mean()) / sd


def conditional_q_expectation_regression(batch: PathBatch, s: float, t: float,
                                         target: Union[str, np.ndarray]) -> ConditionalEstimate:
    """Project (Z_t/Z_s) Y_t on cubic polynomials in log Z_s and ln(1/gamma_s).

    ``target`` is a channel name or the per-path values Y_t. Constant basis
    columns (e.g. ln(1/gamma) with deterministic risk aversion) are dropped.
    """
    grid = batch.grid
    i_s, i_t = grid.index_of(s), grid.index_of(t)
    if not i_s < i_t:
        raise ValueError(f"Need s < t, got s={s}, t={t}")
    y_t = batch.channel(target)[:, i_t] if isinstance(target, str) else np.asarray(target, dtype=float)
    logZ = batch.channel("logZ")
    y = np.exp(logZ[:, i_t] - logZ[:, i_s]) * y_t

    columns = [np.ones(batch.n_paths)]
    names = ["1"]
    state = [("logZ", logZ[:, i_s])]
    if batch.has("gamma_inv"):
        state.append(("ln_gamma_inv", np.log(batch.channel("gamma_inv")[:, i_s])))
    for label, raw in state:
        x = _standardize(raw)
        if x is None:
            continue
        for p in (1, 2, 3):
            columns.append(x ** p)
            names.append(f"{label}^{p}")
    design = np.column_stack(columns)
    n, p = design.shape
    if n <= p:
        raise RankDeficiencyError(f"Regression with {n} samples and {p} basis functions")
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.min() <= RANK_TOL * diag.max():
        raise RankDeficiencyError(f"Design matrix on {names} is rank deficient")
    coef = solve_triangular(r, q.T @ y)
    fitted = design @ coef
    resid = y - fitted
    sigma = float(np.sqrt(resid @ resid / (n - p)))
    leverage = np.einsum("ij,ij->i", q, q)
    total = float(((y - y.mean()) ** 2).sum())
    fit = {"columns": names, "residual_sd": sigma,
           "r2": 1.0 - float(resid @ resid) / total if total > 0 else 1.0}
    logger.info(f"Regression estimate at ({s}, {t}) on {names}: residual sd {sigma:.3g}")
    return ConditionalEstimate(values=fitted, se=sigma * np.sqrt(leverage), method=REGRESSION, fit=fit)
