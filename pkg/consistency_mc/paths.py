"""Reproducible simulation of the Brownian driver, market, risk aversion and wealth.

All exponential-form processes (Z, S, 1/gamma) are integrated in log space so
they stay strictly positive; wealth is integrated in level space in exposure
form, V_{i+1} = V_i + e_i * dWQ_i, since (mu - r) dt + sigma dW = sigma dW^Q.
Coefficients are always evaluated at the left endpoint of a step.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Dict, Iterable, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    DomainError,
    GridAlignmentError,
    MissingChannelError,
    NumericalAbort,
    ScenarioError,
)
from .rng import STREAM_MAIN, standard_normals

if TYPE_CHECKING:
    from .coefficients import CoefficientFn
    from .scenario import ScenarioSpec


logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-8
EXPOSURE_RULE = "exposure_rule"
PROPORTION_RULE = "proportion_rule"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i * T / n_steps on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise DomainError(f"Horizon must be positive, got {self.T}")
        if self.n_steps < 1:
            raise DomainError(f"Grid needs at least one step, got {self.n_steps}")

    @classmethod
    def from_rate(cls, T: float, steps_per_unit: int) -> "TimeGrid":
        n = T * steps_per_unit
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise GridAlignmentError(f"T={T} is not a multiple of 1/{steps_per_unit}")
        return cls(T=float(T), n_steps=int(round(n)))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        times = np.arange(self.n_steps + 1) * self.dt
        times[-1] = self.T
        return times

    def index_of(self, t: float) -> int:
        """Return the grid index of time ``t``; it must lie on the grid."""
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or abs(i * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise GridAlignmentError(f"t={t} is not a grid point of {self}")
        return i

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.n_steps % factor:
            raise GridAlignmentError(f"Cannot coarsen {self.n_steps} steps by {factor}")
        return TimeGrid(T=self.T, n_steps=self.n_steps // factor)


@dataclass
class PathBatch:
    """Paths on a common grid: the Brownian driver plus every derived channel.

    ``dW`` and ``dWQ`` hold per-step increments (n_paths x n_steps); every
    other array is a level channel of shape (n_paths, n_steps + 1).
    """

    grid: TimeGrid
    dW: np.ndarray
    W: np.ndarray
    seed: int = 0
    stream: int = STREAM_MAIN
    theta: Optional[np.ndarray] = None
    logZ: Optional[np.ndarray] = None
    dWQ: Optional[np.ndarray] = None
    channels: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.W.shape[0]

    @property
    def shape(self):
        return (self.n_paths, self.grid.n_steps + 1)

    def has(self, name: str) -> bool:
        if name in ("W", "theta", "logZ", "dWQ"):
            return getattr(self, name) is not None
        if name == "Z":
            return self.logZ is not None or "Z" in self.channels
        return name in self.channels

    def channel(self, name: str) -> np.ndarray:
        if name in ("W", "theta", "logZ", "dWQ"):
            value = getattr(self, name)
            if value is None:
                raise MissingChannelError(f"Batch has no '{name}' channel yet")
            return value
        if name in self.channels:
            return self.channels[name]
        if name == "Z" and self.logZ is not None:
            return np.exp(self.logZ)
        raise MissingChannelError(f"Batch has no '{name}' channel (have: {sorted(self.channels)})")

    def require(self, *names: str) -> None:
        missing = [n for n in names if not self.has(n)]
        if missing:
            raise MissingChannelError(f"Batch is missing channel(s) {missing}")

    def with_fields(self, **fields: np.ndarray) -> "PathBatch":
        return dataclasses.replace(self, channels=dict(self.channels), **fields)

    def with_channels(self, **arrays: np.ndarray) -> "PathBatch":
        for name, arr in arrays.items():
            if arr.shape != self.shape:
                raise ValueError(f"Channel '{name}' has shape {arr.shape}, expected {self.shape}")
        merged = dict(self.channels)
        merged.update(arrays)
        return dataclasses.replace(self, channels=merged)

    def head(self, n: int) -> "PathBatch":
        """Return the first ``n`` paths as a new batch sharing memory."""
        def cut(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if a is None else a[:n]
        return dataclasses.replace(
            self, dW=self.dW[:n], W=self.W[:n], theta=cut(self.theta), logZ=cut(self.logZ),
            dWQ=cut(self.dWQ), channels={k: v[:n] for k, v in self.channels.items()})

    def coarsen(self, factor: int) -> "PathBatch":
        """Aggregate the Brownian increments onto a grid ``factor`` times coarser.

        Only the driver is kept; derived channels must be re-simulated.
        """
        grid = self.grid.coarsen(factor)
        dW = self.dW.reshape(self.n_paths, grid.n_steps, factor).sum(axis=2)
        W = np.zeros((self.n_paths, grid.n_steps + 1))
        np.cumsum(dW, axis=1, out=W[:, 1:])
        return PathBatch(grid=grid, dW=dW, W=W, seed=self.seed, stream=self.stream)

    def lookup(self, i: int) -> Callable[[str], np.ndarray]:
        return lambda name: self.channel(name)[:, i]


class StepState:
    """State of every path at one grid step, as seen by a strategy rule."""

    def __init__(self, i: int, t: float, lookup: Callable[[str], np.ndarray], V: np.ndarray):
        self.i = i
        self.t = t
        self._lookup = lookup
        self.V = V

    def __getitem__(self, name: str) -> np.ndarray:
        if name == "V":
            return self.V
        if name == "gamma":
            return 1.0 / self._lookup("gamma_inv")
        if name == "Z":
            return np.exp(self._lookup("logZ"))
        return self._lookup(name)


@dataclass(frozen=True)
class StrategyRule:
    """A trading rule giving either the monetary exposure e_t or the proportion alpha_t."""

    kind: str
    fn: Callable[[StepState], Union[float, np.ndarray]]
    name: str = "custom"

    def exposure(self, state: StepState) -> np.ndarray:
        value = np.asarray(self.fn(state), dtype=float)
        if self.kind == PROPORTION_RULE:
            value = state["sigma"] * value * state.V
        return np.array(np.broadcast_to(value, state.V.shape))


def exposure_rule(fn: Callable[[StepState], Union[float, np.ndarray]], name: str = "exposure") -> StrategyRule:
    return StrategyRule(kind=EXPOSURE_RULE, fn=fn, name=name)


def proportion_rule(fn: Callable[[StepState], Union[float, np.ndarray]], name: str = "proportion") -> StrategyRule:
    return StrategyRule(kind=PROPORTION_RULE, fn=fn, name=name)


def zero_exposure() -> StrategyRule:
    return exposure_rule(lambda state: 0.0, name="zero")


def constant_proportion(alpha: float) -> StrategyRule:
    return proportion_rule(lambda state: alpha, name=f"alpha={alpha}")


def guard_finite(name: str, values: np.ndarray) -> None:
    """Abort on the first non-finite entry, reporting its (path, step)."""
    bad = ~np.isfinite(values)
    if bad.any():
        path, step = (int(k) for k in np.argwhere(bad)[0])
        logger.error(f"Non-finite value in channel '{name}' at path {path}, step {step}")
        raise NumericalAbort("Non-finite value", name, path, step)


def cumulate_increments(increments: np.ndarray) -> np.ndarray:
    levels = np.zeros((increments.shape[0], increments.shape[1] + 1))
    np.cumsum(increments, axis=1, out=levels[:, 1:])
    return levels


def simulate_brownian(grid: TimeGrid, n_paths: int, seed: int, stream: int = STREAM_MAIN,
                      workers: Optional[int] = None, start: int = 0) -> PathBatch:
    """Simulate Brownian increments dW_i ~ N(0, dt) for paths start .. start + n_paths - 1."""
    if n_paths < 1:
        raise DomainError(f"n_paths must be at least 1, got {n_paths}")
    dW = standard_normals(seed, stream, n_paths, grid.n_steps, workers, start=start) * np.sqrt(grid.dt)
    W = cumulate_increments(dW)
    logger.info(f"Simulated {n_paths} Brownian paths on {grid.n_steps} steps "
                f"(seed={seed}, stream={stream}, start={start})")
    return PathBatch(grid=grid, dW=dW, W=W, seed=seed, stream=stream)


def simulate_market(spec: "ScenarioSpec", batch: PathBatch) -> PathBatch:
    """Fill theta, log Z, S and the Q-Brownian increments dWQ = dW - theta dt."""
    grid = batch.grid
    dt = grid.dt
    t = grid.times[None, :]
    mu = spec.mu.evaluate(t, batch.W)
    sigma = spec.sigma.evaluate(t, batch.W)
    if np.any(sigma <= 0):
        path, step = (int(k) for k in np.argwhere(sigma <= 0)[0])
        raise NumericalAbort("Non-positive volatility", "sigma", path, step)
    theta = -(mu - spec.r) / sigma
    guard_finite("theta", theta)

    th = theta[:, :-1]
    logZ = cumulate_increments(-0.5 * th ** 2 * dt + th * batch.dW)
    sig = sigma[:, :-1]
    logS = np.log(spec.s0) + cumulate_increments((mu[:, :-1] - 0.5 * sig ** 2) * dt + sig * batch.dW)
    S = np.exp(logS)
    dWQ = batch.dW - th * dt
    for name, values in (("logZ", logZ), ("S", S), ("dWQ", dWQ)):
        guard_finite(name, values)

    logger.info(f"Market simulated: theta in [{theta.min():.4g}, {theta.max():.4g}]")
    return batch.with_fields(theta=theta, logZ=logZ, dWQ=dWQ).with_channels(S=S, sigma=sigma)


def simulate_risk_aversion(spec: "ScenarioSpec", batch: PathBatch) -> PathBatch:
    """Fill gamma_inv from d(1/gamma) = (1/gamma)(eta dt + beta dW^Q) in log space."""
    if batch.dWQ is None:
        raise MissingChannelError("simulate_risk_aversion needs dWQ; run simulate_market first")
    if spec.eta is None:
        raise ScenarioError("eta follows the forward-performance relation; "
                            "use strategies.forward_family_simulate")
    grid = batch.grid
    t = grid.times[None, :]
    eta = spec.eta.evaluate(t, batch.W, batch.theta)
    beta = spec.beta.evaluate(t, batch.W, batch.theta)
    increments = (eta[:, :-1] - 0.5 * beta[:, :-1] ** 2) * grid.dt + beta[:, :-1] * batch.dWQ
    gamma_inv = np.exp(cumulate_increments(increments)) / spec.gamma0
    guard_finite("gamma_inv", gamma_inv)
    logger.info(f"Risk aversion simulated: 1/gamma_T mean {gamma_inv[:, -1].mean():.6g}")
    return batch.with_channels(gamma_inv=gamma_inv, eta=eta, beta=beta)


def simulate_wealth(rule: StrategyRule, spec: "ScenarioSpec", batch: PathBatch, x0: float,
                    channel: str = "V", exposure_channel: str = "exposure") -> PathBatch:
    """Euler-integrate discounted wealth V_{i+1} = V_i + e_i dWQ_i from V_0 = x0."""
    if batch.dWQ is None:
        raise MissingChannelError("simulate_wealth needs market channels; run simulate_market first")
    grid = batch.grid
    times = grid.times
    V = np.empty(batch.shape)
    E = np.empty(batch.shape)
    V[:, 0] = x0
    for i in range(grid.n_steps + 1):
        state = StepState(i, times[i], batch.lookup(i), V[:, i])
        E[:, i] = rule.exposure(state)
        if i < grid.n_steps:
            V[:, i + 1] = V[:, i] + E[:, i] * batch.dWQ[:, i]
    guard_finite(exposure_channel, E)
    guard_finite(channel, V)
    logger.info(f"Wealth under rule '{rule.name}' simulated: V_T mean {V[:, -1].mean():.6g}")
    return batch.with_channels(**{channel: V, exposure_channel: E})


def alpha_view(exposure: np.ndarray, sigma: np.ndarray, wealth: np.ndarray) -> np.ndarray:
    """Proportion alpha = e / (sigma V) where |V| > 1e-8; NaN marks missing entries."""
    alpha = np.full(exposure.shape, np.nan)
    ok = np.abs(wealth) > ALPHA_FLOOR
    alpha[ok] = exposure[ok] / (sigma[ok] * wealth[ok])
    return alpha


def advance_under_q(spec: "ScenarioSpec", grid: TimeGrid, start: int, state: Dict[str, np.ndarray],
                    dWQ: np.ndarray, noise_beta: Optional["CoefficientFn"] = None,
                    rule: Optional[StrategyRule] = None) -> Dict[str, np.ndarray]:
    """Advance a state dictionary from grid index ``start`` using dWQ as the driving noise.

    Under Q the primitive noise is dW^Q; the P-increment is rebuilt as
    dW = dW^Q + theta dt. Recognised keys: W, logZ, gamma_inv, X, V.
    """
    dt = grid.dt
    times = grid.times
    state = {k: np.array(v, dtype=float) for k, v in state.items()}
    for j in range(dWQ.shape[1]):
        i = start + j
        t = times[i]
        W = state["W"]
        sigma = spec.sigma.evaluate(t, W)
        theta = -(spec.mu.evaluate(t, W) - spec.r) / sigma
        dq = dWQ[:, j]
        dw = dq + theta * dt
        nb = noise_beta.evaluate(t, W, theta) if noise_beta is not None else None
        beta = spec.beta.evaluate(t, W, theta)
        if rule is not None and "V" in state:
            values = dict(state, theta=theta, sigma=sigma, beta=beta)
            if nb is not None:
                values["noise_beta"] = nb
            e = rule.exposure(StepState(i, t, values.__getitem__, state["V"]))
            state["V"] = state["V"] + e * dq
        if "gamma_inv" in state:
            eta = spec.eta.evaluate(t, W, theta)
            state["gamma_inv"] = state["gamma_inv"] * np.exp((eta - 0.5 * beta ** 2) * dt + beta * dq)
        if "X" in state:
            state["X"] = state["X"] * np.exp(-0.5 * nb ** 2 * dt + nb * dw)
        state["logZ"] = state["logZ"] - 0.5 * theta ** 2 * dt + theta * dw
        state["W"] = W + dw
    t_end = times[start + dWQ.shape[1]]
    state["sigma"] = spec.sigma.evaluate(t_end, state["W"])
    state["theta"] = -(spec.mu.evaluate(t_end, state["W"]) - spec.r) / state["sigma"]
    for name, values in state.items():
        guard_finite(name, values[:, None])
    return state


def write_channel_dump(batch: PathBatch, path: Union[str, Path], channels: Optional[Sequence[str]] = None,
                       max_paths: Optional[int] = None) -> Path:
    """Write ``path,step,t,<channel>...`` rows with round-trip float formatting."""
    names = list(channels) if channels is not None else _default_dump_channels(batch)
    arrays = [batch.channel(name) for name in names]
    n = batch.n_paths if max_paths is None else min(max_paths, batch.n_paths)
    times = batch.grid.times
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "step", "t", *names])
        for p in range(n):
            for i, t in enumerate(times):
                writer.writerow([p, i, repr(float(t)), *(repr(float(a[p, i])) for a in arrays)])
    logger.info(f"Wrote channel dump {path} ({n} paths, channels={names})")
    return path


def _default_dump_channels(batch: PathBatch) -> Iterable[str]:
    names = [name for name in ("W", "theta", "logZ") if batch.has(name)]
    return names + sorted(batch.channels)
