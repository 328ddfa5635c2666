"""Utility families evaluated pointwise on simulated states.

Nothing here averages: expectations (and therefore every P-versus-Q choice)
belong to the estimators module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import singledispatch
from typing import TYPE_CHECKING, Any, Dict, Optional, Union

import numpy as np

from .coefficients import CoefficientFn, parse_coefficient
from .exceptions import DomainError, MissingChannelError, ScenarioParseError
from .paths import PathBatch, cumulate_increments, guard_finite

if TYPE_CHECKING:
    from .scenario import ScenarioSpec


logger = logging.getLogger(__name__)

STATE_DEP_EXP = "state_dep_exp"
DET_EXP = "det_exp"
POWER = "power"
LOG = "log"
MULT_NOISE = "mult_noise"
FAMILY_TAGS = (STATE_DEP_EXP, DET_EXP, POWER, LOG, MULT_NOISE)


@dataclass(frozen=True)
class StateDepExp:
    """u_t(x) = -(1/gamma_t) exp(-gamma_t x) with gamma_t read from channel gamma_inv."""

    tag = STATE_DEP_EXP


@dataclass(frozen=True)
class DetExp:
    gamma: float
    tag = DET_EXP

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise DomainError(f"Exponential risk aversion must be positive, got {self.gamma}")


@dataclass(frozen=True)
class Power:
    gamma: float
    tag = POWER

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise DomainError(f"Power utility needs gamma in (0, 1), got {self.gamma}")

    @property
    def exponent(self) -> float:
        """Exponent b = -1/(1 - gamma) of Z in the optimal profile."""
        return -1.0 / (1.0 - self.gamma)


@dataclass(frozen=True)
class Log:
    tag = LOG


@dataclass(frozen=True)
class MultNoise:
    """u_t(x) = u(x) X_t with dX = X beta dW and X_0 = 1."""

    beta: CoefficientFn
    base: Union[DetExp, Power]
    tag = MULT_NOISE


UtilityFamily = Union[StateDepExp, DetExp, Power, Log, MultNoise]


def _param(params: Dict[str, Any], name: str, default: Any = None) -> Any:
    value = params.get(name, default)
    if value is None:
        raise ScenarioParseError(f"Missing utility parameter '{name}'", key="utility.params")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioParseError(f"Utility parameter '{name}' must be a number", key="utility.params")
    return float(value)


def parse_family(tag: str, params: Optional[Dict[str, Any]], gamma0: float) -> UtilityFamily:
    """Build a utility family from ``utility.family`` and ``utility.params``.

    Exponential bases default their risk aversion to ``gamma0``.
    """
    params = dict(params or {})
    known = {STATE_DEP_EXP: set(), DET_EXP: {"gamma"}, POWER: {"gamma"}, LOG: set(),
             MULT_NOISE: {"beta", "base", "gamma"}}
    if tag not in known:
        raise ScenarioParseError(f"Unknown utility family '{tag}' (expected one of {FAMILY_TAGS})",
                                 key="utility.family")
    unknown = set(params) - known[tag]
    if unknown:
        raise ScenarioParseError(f"Unknown parameter(s) {sorted(unknown)} for family '{tag}'",
                                 key="utility.params")
    if tag == STATE_DEP_EXP:
        return StateDepExp()
    if tag == DET_EXP:
        return DetExp(gamma=_param(params, "gamma", gamma0))
    if tag == POWER:
        return Power(gamma=_param(params, "gamma"))
    if tag == LOG:
        return Log()
    if "beta" not in params:
        raise ScenarioParseError("Multiplicative noise needs a 'beta' coefficient", key="utility.params")
    beta = parse_coefficient(params["beta"], key="utility.params.beta", allow_theta=True)
    base_tag = params.get("base", DET_EXP)
    if base_tag == DET_EXP:
        base: Union[DetExp, Power] = DetExp(gamma=_param(params, "gamma", gamma0))
    elif base_tag == POWER:
        base = Power(gamma=_param(params, "gamma"))
    else:
        raise ScenarioParseError(f"Noise base must be '{DET_EXP}' or '{POWER}', got {base_tag!r}",
                                 key="utility.params.base")
    return MultNoise(beta=beta, base=base)


def family_document(family: UtilityFamily) -> Dict[str, Any]:
    """Serialize a family to its ``{"family", "params"}`` document form."""
    if isinstance(family, (DetExp, Power)):
        return {"family": family.tag, "params": {"gamma": family.gamma}}
    if isinstance(family, MultNoise):
        return {"family": MULT_NOISE, "params": {"beta": family.beta.to_document(),
                                                 "base": family.base.tag,
                                                 "gamma": family.base.gamma}}
    return {"family": family.tag, "params": {}}


@singledispatch
def utility_value(family: Any, x: np.ndarray, gamma_inv: Optional[np.ndarray] = None,
                  X: Optional[np.ndarray] = None) -> np.ndarray:
    raise TypeError(f"Unsupported utility family {family!r}")


@utility_value.register
def _(family: StateDepExp, x, gamma_inv=None, X=None):
    if gamma_inv is None:
        raise MissingChannelError("State-dependent exponential utility needs gamma_inv")
    gamma_inv = np.asarray(gamma_inv, dtype=float)
    return -gamma_inv * np.exp(-np.asarray(x, dtype=float) / gamma_inv)


@utility_value.register
def _(family: DetExp, x, gamma_inv=None, X=None):
    return -np.exp(-family.gamma * np.asarray(x, dtype=float)) / family.gamma


@utility_value.register
def _(family: Power, x, gamma_inv=None, X=None):
    _require_positive(x, family)
    return np.asarray(x, dtype=float) ** family.gamma / family.gamma


@utility_value.register
def _(family: Log, x, gamma_inv=None, X=None):
    _require_positive(x, family)
    return np.log(np.asarray(x, dtype=float))


@utility_value.register
def _(family: MultNoise, x, gamma_inv=None, X=None):
    if X is None:
        raise MissingChannelError("Multiplicative-noise utility needs the X channel")
    return utility_value(family.base, x) * np.asarray(X, dtype=float)


def _require_positive(x: Any, family: Any) -> None:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    bad = np.flatnonzero(~(x > 0))
    if bad.size:
        shown = bad[:10].tolist()
        logger.error(f"{type(family).__name__} utility evaluated at non-positive wealth on {bad.size} path(s)")
        raise DomainError(f"{type(family).__name__} utility needs positive wealth; "
                          f"offending paths {shown}{' ...' if bad.size > 10 else ''}")


def evaluate_utility(family: UtilityFamily, batch: PathBatch, i: int,
                     wealth_channel: str = "xi_star") -> np.ndarray:
    """Per-path utility of ``wealth_channel`` at grid index ``i``."""
    x = batch.channel(wealth_channel)[:, i]
    gamma_inv = batch.channel("gamma_inv")[:, i] if isinstance(family, StateDepExp) else None
    X = batch.channel("X")[:, i] if isinstance(family, MultNoise) else None
    return utility_value(family, x, gamma_inv=gamma_inv, X=X)


def simulate_noise(family: MultNoise, spec: "ScenarioSpec", batch: PathBatch) -> PathBatch:
    """Fill channel X from dX = X beta dW (P-Brownian) in log space."""
    if not isinstance(family, MultNoise):
        raise DomainError(f"simulate_noise needs a multiplicative-noise family, got {family!r}")
    grid = batch.grid
    theta = batch.theta if family.beta.uses_theta else None
    if family.beta.uses_theta and theta is None:
        raise MissingChannelError("Noise coefficient references theta; run simulate_market first")
    beta = family.beta.evaluate(grid.times[None, :], batch.W, theta)
    b = beta[:, :-1]
    X = np.exp(cumulate_increments(-0.5 * b ** 2 * grid.dt + b * batch.dW))
    guard_finite("X", X)
    logger.info(f"Preference noise simulated: E_P[X_T] sample {X[:, -1].mean():.6g}")
    return batch.with_channels(X=X, noise_beta=beta)
