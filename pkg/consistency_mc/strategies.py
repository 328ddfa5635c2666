"""Closed-form optimal wealth and strategy processes, carried as channels on a PathBatch.

Every strategy is represented by its monetary exposure e = sigma * alpha * V,
the diffusion coefficient of discounted wealth against dW^Q; proportions are
derived views where |wealth| > 1e-8.

Column i of an ``xi_star`` channel is the static optimum for the horizon t_i.
In the consistent regimes those columns form one self-financing process; in
the others they do not, which is exactly what the consistency check exposes.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Type

import numpy as np

from .exceptions import (
    AssumptionViolation,
    DomainError,
    GridAlignmentError,
    ScenarioError,
    SingularityError,
)
from .estimators import ColumnMoments, Target
from .paths import (
    PathBatch,
    StepState,
    StrategyRule,
    alpha_view,
    exposure_rule,
    guard_finite,
    simulate_brownian,
    simulate_market,
    simulate_risk_aversion,
    simulate_wealth,
    zero_exposure,
)
from .preferences import DetExp, Log, MultNoise, Power, StateDepExp, simulate_noise
from .rng import BLOCK_PATHS, STREAM_CONSTANTS, STREAM_MAIN
from .scenario import W_SAMPLES, ScenarioSpec, is_consistent_pair


logger = logging.getLogger(__name__)

CHUNK_PATHS = 32 * BLOCK_PATHS
MIN_LADDER = 3
SINGULARITY_TOL = 1e-6
NOISE_CONDITION_TOL = 1e-10


def simulate_scenario(spec: ScenarioSpec, n_paths: Optional[int] = None, seed: Optional[int] = None,
                      stream: int = STREAM_MAIN, start: int = 0, workers: Optional[int] = None) -> PathBatch:
    """Brownian driver, market, risk aversion (given or forward) and preference noise."""
    seed = spec.seed if seed is None else seed
    batch = simulate_brownian(spec.grid, n_paths or spec.n_paths, seed, stream, workers, start)
    batch = simulate_market(spec, batch)
    if spec.eta is None:
        batch = forward_family_simulate(spec, batch)
    else:
        batch = simulate_risk_aversion(spec, batch)
    if isinstance(spec.utility, MultNoise):
        batch = simulate_noise(spec.utility, spec, batch)
    return batch


def iter_scenario_batches(spec: ScenarioSpec, n_paths: Optional[int] = None, seed: Optional[int] = None,
                          stream: int = STREAM_MAIN, chunk_paths: int = CHUNK_PATHS) -> Iterator[PathBatch]:
    """Yield consecutive path chunks; together they equal one batch of ``n_paths`` paths."""
    total = n_paths or spec.n_paths
    for start in range(0, total, chunk_paths):
        yield simulate_scenario(spec, min(chunk_paths, total - start), seed, stream, start)


@dataclass(frozen=True)
class DerivedConstants:
    """E_Q-constants on every grid time, with standard errors, from an independent batch.

    Keys: ``ep_Z`` (E_P[Z_t]), ``eq_logZ`` (E_Q[ln Z_t]), ``entropy``
    (E_Q[1/2 int_0^t theta^2]); with risk aversion ``eq_gamma_inv``, ``c``
    and ``k``; for power utility ``H`` (E_Q[Z_t^b]); under preference noise
    ``eq_logphi`` or ``H_phi`` for phi = Z/X.
    """

    times: np.ndarray
    x: float
    values: Dict[str, np.ndarray]
    errors: Dict[str, np.ndarray]
    n_paths: int
    seed: int
    stream: int = STREAM_CONSTANTS

    def has(self, name: str) -> bool:
        return name in self.values

    def value(self, name: str, i: Any = slice(None)) -> Any:
        return self.values[name][i]

    def se(self, name: str, i: Any = slice(None)) -> Any:
        return self.errors[name][i]

    def to_dict(self, indices: Sequence[int]) -> Dict[str, Any]:
        return {
            "n_paths": self.n_paths, "seed": self.seed, "stream": self.stream,
            "t": [float(self.times[i]) for i in indices],
            "values": {k: [float(v[i]) for i in indices] for k, v in sorted(self.values.items())},
            "errors": {k: [float(v[i]) for i in indices] for k, v in sorted(self.errors.items())},
        }


def estimate_constants(spec: ScenarioSpec, x: Optional[float] = None, n_paths: Optional[int] = None,
                       seed: Optional[int] = None, power_gamma: Optional[float] = None,
                       chunk_paths: int = CHUNK_PATHS) -> DerivedConstants:
    """Z-weighted Monte Carlo estimates of c_t, k_t, H_t and the entropy terms on every grid time."""
    x = spec.x0 if x is None else x
    n_paths = n_paths or spec.constants_paths or spec.n_paths
    seed = spec.seed if seed is None else seed
    family = spec.utility
    power = Power(power_gamma) if power_gamma is not None else (family if isinstance(family, Power) else None)
    noise = family if isinstance(family, MultNoise) else None
    dt = spec.grid.dt

    acc = ColumnMoments()
    for batch in iter_scenario_batches(spec, n_paths, seed, STREAM_CONSTANTS, chunk_paths):
        logZ = batch.logZ
        Z = np.exp(logZ)
        half_theta_sq = np.zeros_like(logZ)
        np.cumsum(0.5 * batch.theta[:, :-1] ** 2 * dt, axis=1, out=half_theta_sq[:, 1:])
        gamma_inv = batch.channel("gamma_inv")
        samples = {"Z": Z, "Z_logZ": Z * logZ, "Z_entropy": Z * half_theta_sq,
                   "Z_gamma_inv": Z * gamma_inv, "k_num": x + Z * gamma_inv * logZ}
        if power is not None:
            samples["Z_pow"] = np.exp((power.exponent + 1.0) * logZ)
        if noise is not None:
            logphi = logZ - np.log(batch.channel("X"))
            if isinstance(noise.base, Power):
                samples["Z_phi_pow"] = Z * np.exp(noise.base.exponent * logphi)
            else:
                samples["Z_logphi"] = Z * logphi
        acc.add(**samples)

    values: Dict[str, np.ndarray] = {}
    errors: Dict[str, np.ndarray] = {}
    for key, name in (("ep_Z", "Z"), ("eq_logZ", "Z_logZ"), ("entropy", "Z_entropy"),
                      ("eq_gamma_inv", "Z_gamma_inv"), ("H", "Z_pow"), ("H_phi", "Z_phi_pow"),
                      ("eq_logphi", "Z_logphi")):
        if name in acc.names:
            values[key], errors[key] = acc.mean(name)
    values["c"] = 1.0 / values["eq_gamma_inv"]
    errors["c"] = values["c"] ** 2 * errors["eq_gamma_inv"]
    values["k"], errors["k"] = acc.ratio("k_num", "Z_gamma_inv")
    for key in ("c", "H", "H_phi"):
        if key in values and not (values[key] > 0).all():
            raise DomainError(f"Estimated constant {key} is not strictly positive")
    logger.info(f"Estimated constants on {n_paths} independent paths: "
                f"E_Q[ln Z_T]={values['eq_logZ'][-1]:.6g}, c_T={values['c'][-1]:.6g}, k_T={values['k'][-1]:.6g}")
    return DerivedConstants(times=spec.grid.times, x=x, values=values, errors=errors,
                            n_paths=n_paths, seed=seed)


def _state_of(batch: PathBatch, names: Sequence[str]) -> Dict[str, np.ndarray]:
    return {name: batch.channel(name) for name in names}


def exposure_on(rule: StrategyRule, batch: PathBatch, wealth_channel: str) -> np.ndarray:
    """Evaluate ``rule`` on every path and step, with wealth read from ``wealth_channel``."""
    state = StepState(-1, batch.grid.times[None, :], batch.channel, batch.channel(wealth_channel))
    return rule.exposure(state)


class WealthModel:
    """Optimal wealth of one utility regime.

    Bundles the closed form (``wealth``), its nested-estimation recipe
    (``target``), the error carried in from estimated constants
    (``offset_se``) and the feedback rule that replicates it.
    """

    name = "wealth"
    requires: Tuple[str, ...] = ("W", "logZ")
    needs_constants = True

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None):
        self.spec = spec
        self.x = spec.x0
        self.logger = logging.getLogger(self.__class__.__name__)
        if self.needs_constants and constants is None:
            constants = estimate_constants(spec)
        self.constants = constants

    def wealth(self, state: Dict[str, np.ndarray], cols: Any) -> np.ndarray:
        raise NotImplementedError

    def replication_rule(self) -> StrategyRule:
        raise NotImplementedError

    def offset_se(self, state_s: Dict[str, np.ndarray], i_s: int, i_t: int) -> np.ndarray:
        return np.zeros_like(state_s["W"])

    def budget_se(self, i: int) -> float:
        """Error in E_Q[xi*_t] carried in from the estimated constants at column i."""
        return 0.0

    def fill(self, batch: PathBatch, channel: str = "xi_star") -> PathBatch:
        xi = np.array(np.broadcast_to(self.wealth(_state_of(batch, self.requires), slice(None)), batch.shape))
        guard_finite(channel, xi)
        self.logger.info(f"Filled {channel}: E_P[xi*_T] sample {xi[:, -1].mean():.6g}")
        return batch.with_channels(**{channel: xi})

    def target(self, i_t: int) -> Target:
        return Target(fn=lambda state: self.wealth(state, i_t), requires=self.requires,
                      name=f"{self.name} xi*")

    def optimal_exposure(self, batch: PathBatch, wealth_channel: str = "xi_star") -> np.ndarray:
        return exposure_on(self.replication_rule(), batch, wealth_channel)

    def _combined_se(self, key: str, i_s: int, i_t: int) -> float:
        return float(np.hypot(self.constants.se(key, i_s), self.constants.se(key, i_t)))


class ConsistentExpModel(WealthModel):
    """xi*_t = (1/gamma_t)(gamma0 x - ln Z_t) for the consistent pair eta = 0, beta = -theta/2."""

    name = "consistent_exp"
    requires = ("W", "logZ", "gamma_inv")
    needs_constants = False

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None):
        if not is_consistent_pair(spec):
            logger.error(f"Scenario '{spec.name}' does not use eta = 0, beta = -theta/2")
            raise AssumptionViolation("The consistent closed form needs eta = 0 and beta = -theta/2")
        super().__init__(spec, constants)

    def wealth(self, state, cols):
        return state["gamma_inv"] * (self.spec.gamma0 * self.x - state["logZ"])

    def replication_rule(self) -> StrategyRule:
        return exposure_rule(lambda s: -0.5 * s["theta"] * s.V - s["theta"] * s["gamma_inv"],
                             name="consistent_exp")


class MertonModel(WealthModel):
    """xi*_t = x + (E_Q[ln Z_t] - ln Z_t)/gamma for constant risk aversion."""

    name = "merton_exp"

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None,
                 gamma: Optional[float] = None):
        self.gamma = float(gamma if gamma is not None else getattr(spec.utility, "gamma", spec.gamma0))
        if not self.gamma > 0:
            raise DomainError(f"Risk aversion must be positive, got {self.gamma}")
        super().__init__(spec, constants)

    def wealth(self, state, cols):
        return self.x + (self.constants.value("eq_logZ", cols) - state["logZ"]) / self.gamma

    def offset_se(self, state_s, i_s, i_t):
        return np.full_like(state_s["W"], self._combined_se("eq_logZ", i_s, i_t) / self.gamma)

    def budget_se(self, i):
        return float(self.constants.se("eq_logZ", i)) / self.gamma

    def replication_rule(self) -> StrategyRule:
        gamma = self.gamma
        return exposure_rule(lambda s: -s["theta"] / gamma, name="merton_exp")


class GeneralExpModel(WealthModel):
    """xi*_t = (1/gamma_t)(k_t - ln Z_t): the static optimum for any (eta, beta)."""

    name = "general_exp"
    requires = ("W", "logZ", "gamma_inv")

    def wealth(self, state, cols):
        return state["gamma_inv"] * (self.constants.value("k", cols) - state["logZ"])

    def offset_se(self, state_s, i_s, i_t):
        return state_s["gamma_inv"] * self._combined_se("k", i_s, i_t)

    def budget_se(self, i):
        return float(self.constants.se("k", i) * self.constants.value("eq_gamma_inv", i))

    def replication_rule(self) -> StrategyRule:
        return exposure_rule(lambda s: s["beta"] * s.V - s["theta"] * s["gamma_inv"], name="general_exp")


class PowerModel(WealthModel):
    """xi*_t = x Z_t^b / H_t with b = -1/(1 - gamma)."""

    name = "power"

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None,
                 gamma: Optional[float] = None):
        family = Power(gamma) if gamma is not None else spec.utility
        if not isinstance(family, Power):
            raise ScenarioError(f"Power optimum needs a power utility, got {family!r}")
        if spec.x0 <= 0:
            logger.error(f"Power optimum requested with x0 = {spec.x0}")
            raise DomainError(f"Power utility needs positive initial wealth, got {spec.x0}")
        self.b = family.exponent
        if constants is None:
            constants = estimate_constants(spec, power_gamma=family.gamma)
        super().__init__(spec, constants)

    def wealth(self, state, cols):
        return self.x * np.exp(self.b * state["logZ"]) / self.constants.value("H", cols)

    def offset_se(self, state_s, i_s, i_t):
        c = self.constants
        rel = np.hypot(c.se("H", i_s) / c.value("H", i_s), c.se("H", i_t) / c.value("H", i_t))
        return np.abs(self.wealth(state_s, i_s)) * rel

    def budget_se(self, i):
        return float(abs(self.x) * self.constants.se("H", i) / self.constants.value("H", i))

    def replication_rule(self) -> StrategyRule:
        b = self.b
        return exposure_rule(lambda s: b * s["theta"] * s.V, name="power")


class LogModel(WealthModel):
    """xi*_t = x / Z_t."""

    name = "log"
    needs_constants = False

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None):
        if spec.x0 <= 0:
            raise DomainError(f"Log utility needs positive initial wealth, got {spec.x0}")
        super().__init__(spec, constants)

    def wealth(self, state, cols):
        return self.x * np.exp(-state["logZ"])

    def replication_rule(self) -> StrategyRule:
        return exposure_rule(lambda s: -s["theta"] * s.V, name="log")


class NoiseModel(WealthModel):
    """Static optimum under u_t(x) = u(x) X_t through the reduction phi = Z/X."""

    name = "mult_noise"
    requires = ("W", "logZ", "X")

    def __init__(self, spec: ScenarioSpec, constants: Optional[DerivedConstants] = None):
        if not isinstance(spec.utility, MultNoise):
            raise ScenarioError(f"Noise optimum needs a multiplicative-noise utility, got {spec.utility!r}")
        self.base = spec.utility.base
        if isinstance(self.base, Power) and spec.x0 <= 0:
            raise DomainError(f"Power utility needs positive initial wealth, got {spec.x0}")
        super().__init__(spec, constants)

    def wealth(self, state, cols):
        logphi = state["logZ"] - np.log(state["X"])
        if isinstance(self.base, Power):
            return self.x * np.exp(self.base.exponent * logphi) / self.constants.value("H_phi", cols)
        return self.x + (self.constants.value("eq_logphi", cols) - logphi) / self.base.gamma

    def offset_se(self, state_s, i_s, i_t):
        c = self.constants
        if isinstance(self.base, Power):
            rel = np.hypot(c.se("H_phi", i_s) / c.value("H_phi", i_s), c.se("H_phi", i_t) / c.value("H_phi", i_t))
            return np.abs(self.wealth(state_s, i_s)) * rel
        return np.full_like(state_s["W"], self._combined_se("eq_logphi", i_s, i_t) / self.base.gamma)

    def budget_se(self, i):
        c = self.constants
        if isinstance(self.base, Power):
            return float(abs(self.x) * c.se("H_phi", i) / c.value("H_phi", i))
        return float(c.se("eq_logphi", i)) / self.base.gamma

    def replication_rule(self) -> StrategyRule:
        return noise_exposure_rule(self.spec.utility)


def noise_exposure_rule(family: MultNoise) -> StrategyRule:
    """(beta - theta)/gamma for an exponential base, b (theta - beta) V for a power base."""
    if isinstance(family.base, Power):
        b = family.base.exponent
        return exposure_rule(lambda s: b * (s["theta"] - s["noise_beta"]) * s.V, name="mult_noise")
    gamma = family.base.gamma
    return exposure_rule(lambda s: (s["noise_beta"] - s["theta"]) / gamma, name="mult_noise")


MODELS: Dict[str, Type[WealthModel]] = {
    cls.name: cls for cls in (ConsistentExpModel, MertonModel, GeneralExpModel, PowerModel, LogModel, NoiseModel)
}


def wealth_model(spec: ScenarioSpec, constants: Optional[DerivedConstants] = None) -> WealthModel:
    """Pick the optimal-wealth model matching the scenario's utility family."""
    family = spec.utility
    if isinstance(family, StateDepExp):
        if spec.eta is None:
            raise ScenarioError("The forward-performance family has no horizon-wise optimum to roll over; "
                                "use forward_family_simulate")
        if is_consistent_pair(spec):
            return ConsistentExpModel(spec, constants)
        return GeneralExpModel(spec, constants)
    if isinstance(family, DetExp):
        return MertonModel(spec, constants, gamma=family.gamma)
    if isinstance(family, Power):
        return PowerModel(spec, constants)
    if isinstance(family, Log):
        return LogModel(spec, constants)
    return NoiseModel(spec, constants)


def consistent_optimal_wealth(spec: ScenarioSpec, batch: PathBatch) -> PathBatch:
    return ConsistentExpModel(spec).fill(batch)


def consistent_optimal_exposure(spec: ScenarioSpec, batch: PathBatch) -> PathBatch:
    """Fill exposure e = -(theta/2) xi* - theta/gamma and alpha = e/(sigma xi*) where defined."""
    batch.require("xi_star", "gamma_inv", "sigma")
    xi = batch.channel("xi_star")
    theta = batch.theta
    e = -0.5 * theta * xi - theta * batch.channel("gamma_inv")
    return batch.with_channels(exposure=e, alpha=alpha_view(e, batch.channel("sigma"), xi))


def merton_exponential_wealth(spec: ScenarioSpec, batch: PathBatch, gamma: float,
                              constants: Optional[DerivedConstants] = None) -> PathBatch:
    return MertonModel(spec, constants, gamma=gamma).fill(batch)


def power_optimal_wealth(spec: ScenarioSpec, batch: PathBatch, gamma: float,
                         constants: Optional[DerivedConstants] = None) -> PathBatch:
    return PowerModel(spec, constants, gamma=gamma).fill(batch)


def general_exp_optimal_wealth(spec: ScenarioSpec, batch: PathBatch,
                               constants: Optional[DerivedConstants] = None) -> PathBatch:
    """Column i is the static optimum for horizon t_i, for whatever (eta, beta) drove gamma."""
    batch.require("gamma_inv")
    return GeneralExpModel(spec, constants).fill(batch)


def noise_optimal_wealth(spec: ScenarioSpec, batch: PathBatch,
                         constants: Optional[DerivedConstants] = None) -> PathBatch:
    batch.require("X")
    return NoiseModel(spec, constants).fill(batch)


def log_optimal_wealth(spec: ScenarioSpec, batch: PathBatch) -> PathBatch:
    return LogModel(spec).fill(batch)


def forward_family_simulate(spec: ScenarioSpec, batch: PathBatch) -> PathBatch:
    """Jointly Euler-step 1/gamma and V* with eta* = theta(theta + 2 beta) / (2(gamma V* + 1)).

    V*_0 = x0 and gamma_0 = gamma0. Aborts when |gamma V* + 1| < 1e-6.
    """
    batch.require("theta", "dWQ", "sigma")
    if spec.eta is not None:
        logger.info("forward_family_simulate ignores the scenario's eta and uses the forward relation")
    grid = batch.grid
    dt = grid.dt
    times = grid.times
    shape = batch.shape
    gamma_inv = np.empty(shape)
    V = np.empty(shape)
    eta = np.empty(shape)
    exposure = np.empty(shape)
    beta = spec.beta.evaluate(times[None, :], batch.W, batch.theta)
    gamma_inv[:, 0] = 1.0 / spec.gamma0
    V[:, 0] = spec.x0
    for i in range(grid.n_steps + 1):
        theta = batch.theta[:, i]
        b = beta[:, i]
        gi = gamma_inv[:, i]
        D = V[:, i] / gi + 1.0
        near = np.abs(D) < SINGULARITY_TOL
        if near.any():
            path = int(np.flatnonzero(near)[0])
            logger.error(f"gamma V* + 1 = {D[path]:.3g} at path {path}, step {i}")
            raise SingularityError("Forward-family denominator near zero", "V_star", path, i)
        eta[:, i] = theta * (theta + 2.0 * b) / (2.0 * D)
        exposure[:, i] = V[:, i] * b - theta * gi
        if i < grid.n_steps:
            dq = batch.dWQ[:, i]
            V[:, i + 1] = V[:, i] + exposure[:, i] * dq
            gamma_inv[:, i + 1] = gi * np.exp((eta[:, i] - 0.5 * b ** 2) * dt + b * dq)
    for name, values in (("gamma_inv", gamma_inv), ("V_star", V), ("eta_star", eta)):
        guard_finite(name, values)
    logger.info(f"Forward family simulated: eta* in [{eta.min():.4g}, {eta.max():.4g}]")
    return batch.with_channels(gamma_inv=gamma_inv, V_star=V, eta_star=eta, eta=eta, beta=beta,
                               exposure_star=exposure,
                               alpha_star=alpha_view(exposure, batch.channel("sigma"), V))


def forward_drift(gamma_inv: np.ndarray, V: np.ndarray, e: np.ndarray, theta: np.ndarray,
                  beta: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Bracket f with drift of u_t(V) = -(gamma_t exp(gamma_t V))^-1 f, in exposure form.

    f = 1/2 (v + theta)^2 - 1/2 theta^2 + eta (gamma V + 1) - theta beta with
    v = gamma (e - V beta); f >= 0 for every e is the supermartingale condition.
    """
    v = (e - V * beta) / gamma_inv
    return 0.5 * (v + theta) ** 2 - 0.5 * theta ** 2 + eta * (V / gamma_inv + 1.0) - theta * beta


def noise_drift(gamma: float, e: np.ndarray, theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Bracket g = 1/2 gamma e^2 + e (theta - beta) for u(V) X with exponential u."""
    return 0.5 * gamma * e ** 2 + e * (theta - beta)


def noise_strategy(spec: ScenarioSpec, batch: PathBatch,
                   k: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> PathBatch:
    """Exposure of the noise optimum once (theta - beta)^2 = k(t) is confirmed on the grid.

    With an exponential base the exposure is (beta - theta)/gamma; k = 0 gives e = 0.
    """
    family = spec.utility
    if not isinstance(family, MultNoise):
        raise ScenarioError(f"noise_strategy needs a multiplicative-noise utility, got {family!r}")
    t, w = np.meshgrid(spec.grid.times, np.asarray(W_SAMPLES), indexing="ij")
    theta = spec.theta(t, w)
    gap = (theta - family.beta.evaluate(t, w, theta)) ** 2
    if k is not None:
        times = t[:, 0]
        expected = np.broadcast_to(np.asarray(k(times), dtype=float), times.shape)[:, None]
    else:
        expected = gap[:, :1]
    worst = float(np.abs(gap - expected).max())
    if worst > NOISE_CONDITION_TOL:
        logger.error(f"(theta - beta)^2 departs from a deterministic k(t) by {worst:.3g}")
        raise AssumptionViolation(f"(theta - beta)^2 is not a deterministic function of t (gap {worst:.3g})")
    if not batch.has("xi_star"):
        batch = noise_optimal_wealth(spec, batch)
    e = exposure_on(noise_exposure_rule(family), batch, "xi_star")
    return batch.with_channels(exposure=e, alpha=alpha_view(e, batch.channel("sigma"), batch.channel("xi_star")))


def forward_rule(spec: ScenarioSpec) -> StrategyRule:
    """The drift-minimising exposure: V beta - theta/gamma, or (beta - theta)/gamma under noise."""
    family = spec.utility
    if isinstance(family, MultNoise):
        if isinstance(family.base, Power):
            raise ScenarioError("Forward-performance drift is only available for exponential bases")
        return noise_exposure_rule(family)
    if isinstance(family, DetExp):
        gamma = family.gamma
        return exposure_rule(lambda s: -s["theta"] / gamma, name="forward_det_exp")
    if isinstance(family, StateDepExp):
        return exposure_rule(lambda s: s["beta"] * s.V - s["theta"] * s["gamma_inv"], name="forward_exp")
    raise ScenarioError(f"Forward-performance drift is not available for {type(family).__name__} utility")


def replication_errors(spec: ScenarioSpec, batch: PathBatch, model: WealthModel,
                       rule: Optional[StrategyRule] = None) -> np.ndarray:
    """Terminal V_T - xi*_T for wealth run under ``rule`` (default: the model's replication rule)."""
    batch = model.fill(batch)
    rule = rule or model.replication_rule()
    batch = simulate_wealth(rule, spec, batch, spec.x0, channel="V", exposure_channel="V_exposure")
    return batch.channel("V")[:, -1] - batch.channel("xi_star")[:, -1]


@dataclass(frozen=True)
class ConvergenceRow:
    dt: float
    n_steps: int
    rms_error: float
    rms_se: float

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def convergence_study(spec: ScenarioSpec, dt_ladder: Sequence[float], strategy: str = "optimal",
                      n_paths: Optional[int] = None,
                      chunk_paths: int = CHUNK_PATHS) -> Tuple[List[ConvergenceRow], Optional[float]]:
    """RMS terminal replication error on each step size, all driven by one fine Brownian path set.

    Returns the rows (coarsest first) and the fitted log-log slope, or
    ``None`` for the zero-exposure strategy whose error does not vanish.
    """
    ladder = sorted({float(dt) for dt in dt_ladder}, reverse=True)
    if len(ladder) < MIN_LADDER:
        logger.error(f"Convergence ladder {list(dt_ladder)} has {len(ladder)} distinct step size(s)")
        raise ScenarioError(f"A convergence study needs at least {MIN_LADDER} distinct step sizes, got {len(ladder)}")
    finest = ladder[-1]
    steps_per_unit = int(round(1.0 / finest))
    factors = []
    for dt in ladder:
        factor = dt / finest
        if abs(factor - round(factor)) > 1e-9 or abs(1.0 / finest - steps_per_unit) > 1e-6 \
                or steps_per_unit % int(round(factor)):
            raise GridAlignmentError(f"dt={dt} is not a multiple of the finest step {finest}")
        factors.append(int(round(factor)))
    fine_spec = dataclasses.replace(spec, steps_per_unit=steps_per_unit)
    level_specs = [dataclasses.replace(spec, steps_per_unit=steps_per_unit // f) for f in factors]
    models = [wealth_model(s) for s in level_specs]
    rules = [zero_exposure() if strategy == "zero" else None for _ in ladder]

    acc = ColumnMoments()
    total = n_paths or spec.n_paths
    for start in range(0, total, chunk_paths):
        fine = simulate_brownian(fine_spec.grid, min(chunk_paths, total - start), spec.seed, STREAM_MAIN,
                                 start=start)
        squares = []
        for level_spec, factor, model, rule in zip(level_specs, factors, models, rules):
            coarse = fine.coarsen(factor) if factor > 1 else fine
            coarse = simulate_market(level_spec, coarse)
            coarse = simulate_risk_aversion(level_spec, coarse)
            if isinstance(level_spec.utility, MultNoise):
                coarse = simulate_noise(level_spec.utility, level_spec, coarse)
            squares.append(replication_errors(level_spec, coarse, model, rule) ** 2)
        acc.add(sq=np.column_stack(squares))

    mean_sq, se_sq = acc.mean("sq")
    rms = np.sqrt(mean_sq)
    rows = [ConvergenceRow(dt=dt, n_steps=s.grid.n_steps, rms_error=float(r),
                           rms_se=float(se / (2 * r)) if r > 0 else 0.0)
            for dt, s, r, se in zip(ladder, level_specs, rms, se_sq)]
    order = None
    if strategy != "zero" and np.all(rms > 0):
        order = float(np.polyfit(np.log(ladder), np.log(rms), 1)[0])
    logger.info(f"Convergence study on {total} paths: rms {[f'{r:.3g}' for r in rms]}, order {order}")
    return rows, order
