"""Scenario documents: parsing, serialization and assumption validation.

A scenario document is a JSON object with dotted keys (``"market.mu"``) or
the equivalent nested sections (``{"market": {"mu": ...}}``). Coefficients are
numbers or ``{"expr": ..., "bound": ...}`` objects.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .coefficients import CONSTANT, CoefficientFn, parse_coefficient
from .exceptions import DomainError, ScenarioParseError
from .paths import TimeGrid
from .preferences import (
    STATE_DEP_EXP,
    MultNoise,
    UtilityFamily,
    family_document,
    parse_family,
)


logger = logging.getLogger(__name__)

SECTIONS = ("market", "risk", "utility", "sim", "checks")
REQUIRED_KEYS = ("market.mu", "market.sigma")
FORWARD_ETA = "forward"
W_SAMPLES = (-3.0, -1.0, 0.0, 1.0, 3.0)
STOCHASTIC_W = (-1.0, 0.0, 1.0)
TIGHT_RATIO = 0.999
ZERO_TOL = 1e-12

DEFAULTS: Dict[str, Any] = {
    "name": "scenario",
    "market.r": 0.0,
    "market.s0": 1.0,
    "risk.gamma0": 1.0,
    "risk.eta": 0.0,
    "risk.beta": 0.0,
    "utility.family": STATE_DEP_EXP,
    "utility.params": {},
    "sim.x0": 1.0,
    "sim.T": 1.0,
    "sim.steps_per_unit": 256,
    "sim.n_paths": 100_000,
    "sim.seed": 0,
    "sim.constants_paths": None,
    "checks.pairs": None,
    "checks.n_outer": 50,
    "checks.n_inner": 2000,
    "checks.pass_fraction": 0.94,
    "checks.effect_size": None,
}
KNOWN_KEYS = frozenset(DEFAULTS) | frozenset(REQUIRED_KEYS)


@dataclass(frozen=True)
class ScenarioSpec:
    """Immutable description of one experiment.

    ``eta`` is ``None`` when the risk-aversion drift follows the
    forward-performance relation instead of a given coefficient.
    """

    mu: CoefficientFn
    sigma: CoefficientFn
    r: float
    gamma0: float
    eta: Optional[CoefficientFn]
    beta: CoefficientFn
    utility: UtilityFamily
    x0: float
    T: float
    steps_per_unit: int
    n_paths: int
    seed: int
    check_times: Tuple[Tuple[float, float], ...]
    s0: float = 1.0
    n_outer: int = 50
    n_inner: int = 2000
    pass_fraction: float = 0.94
    effect_size: Optional[float] = None
    constants_paths: Optional[int] = None
    name: str = "scenario"
    defaults: Tuple[str, ...] = field(default=(), compare=False)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_rate(self.T, self.steps_per_unit)

    @property
    def forward_eta(self) -> bool:
        return self.eta is None

    @property
    def noise_beta(self) -> Optional[CoefficientFn]:
        return self.utility.beta if isinstance(self.utility, MultNoise) else None

    def theta(self, t: Any, w: Any) -> np.ndarray:
        """Market price of risk theta = -(mu - r)/sigma at (t, w)."""
        return -(self.mu.evaluate(t, w) - self.r) / self.sigma.evaluate(t, w)

    def with_overrides(self, seed: Optional[int] = None, n_paths: Optional[int] = None) -> "ScenarioSpec":
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = _check_seed(seed, "sim.seed")
        if n_paths is not None:
            if n_paths < 2:
                raise DomainError(f"n_paths must be at least 2, got {n_paths}")
            changes["n_paths"] = int(n_paths)
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Witness:
    """A grid point where a bound was tight or violated."""

    coefficient: str
    t: float
    w: float
    value: float
    bound: Optional[float]
    kind: str

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AssumptionReport:
    hp_theta_ok: bool
    assumption_A_ok: bool
    theta_stochastic: bool
    witnesses: Tuple[Witness, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {"hp_theta_ok": self.hp_theta_ok, "assumption_A_ok": self.assumption_A_ok,
                "theta_stochastic": self.theta_stochastic,
                "witnesses": [w.to_dict() for w in self.witnesses]}


def _line_of(text: str, key: str) -> Optional[int]:
    for needle in (f'"{key}"', f'"{key.split(".")[-1]}"'):
        pos = text.find(needle)
        if pos >= 0:
            return text.count("\n", 0, pos) + 1
    return None


def _flatten(doc: Dict[str, Any]) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in doc.items():
        if key in SECTIONS and isinstance(value, dict):
            for sub, inner in value.items():
                flat[f"{key}.{sub}"] = inner
        else:
            flat[key] = value
    return flat


class _Reader:
    """Typed access to a flattened document, recording which defaults were used."""

    def __init__(self, flat: Dict[str, Any], text: str):
        self.flat = flat
        self.text = text
        self.defaulted: List[str] = []

    def error(self, message: str, key: str) -> ScenarioParseError:
        return ScenarioParseError(message, key=key, line=_line_of(self.text, key))

    def raw(self, key: str) -> Any:
        if key in self.flat:
            return self.flat[key]
        if key in REQUIRED_KEYS:
            raise self.error(f"Missing required key '{key.split('.')[-1]}'", key)
        self.defaulted.append(key)
        return DEFAULTS[key]

    def number(self, key: str) -> Optional[float]:
        value = self.raw(key)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(f"Expected a number, got {value!r}", key)
        return float(value)

    def integer(self, key: str) -> Optional[int]:
        value = self.raw(key)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise self.error(f"Expected an integer, got {value!r}", key)
        return value

    def coefficient(self, key: str, allow_theta: bool = False) -> CoefficientFn:
        try:
            return parse_coefficient(self.raw(key), key, allow_theta=allow_theta)
        except ScenarioParseError as e:
            raise self.error(str(e).split(" (key")[0], key) from e


def _check_seed(seed: Any, key: str) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise DomainError(f"Seed must be an unsigned 64-bit integer, got {seed!r} ({key})")
    return seed


def _parse_pairs(raw: Any, reader: _Reader, grid: TimeGrid, T: float) -> Tuple[Tuple[float, float], ...]:
    if raw is None:
        raw = [[T / 2, T]]
    if not isinstance(raw, list):
        raise reader.error("checks.pairs must be a list of [s, t] pairs", "checks.pairs")
    if not raw:
        raise DomainError("checks.pairs must contain at least one (s, t) pair")
    pairs = []
    for item in raw:
        if not (isinstance(item, (list, tuple)) and len(item) == 2
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in item)):
            raise reader.error(f"Invalid check pair {item!r}", "checks.pairs")
        s, t = float(item[0]), float(item[1])
        if not 0 < s < t <= T:
            raise DomainError(f"Check pair ({s}, {t}) must satisfy 0 < s < t <= T={T}")
        grid.index_of(s)
        grid.index_of(t)
        pairs.append((s, t))
    return tuple(pairs)


def parse_scenario(text: str, name: Optional[str] = None) -> ScenarioSpec:
    """Parse a scenario document, fill defaults and check the domain contracts."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(f"Malformed scenario document: {e.msg}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise ScenarioParseError("Scenario document must be a JSON object", line=1)

    flat = _flatten(doc)
    unknown = sorted(set(flat) - KNOWN_KEYS)
    if unknown:
        raise ScenarioParseError(f"Unknown key(s) {unknown}", key=unknown[0], line=_line_of(text, unknown[0]))
    reader = _Reader(flat, text)

    mu = reader.coefficient("market.mu")
    sigma = reader.coefficient("market.sigma")
    if sigma.form == CONSTANT and sigma.value <= 0:
        logger.error(f"Rejecting scenario with sigma = {sigma.value}")
        raise DomainError(f"Volatility sigma must be positive, got {sigma.value}")
    r = reader.number("market.r")
    s0 = reader.number("market.s0")
    if s0 <= 0:
        raise DomainError(f"Initial stock price must be positive, got {s0}")

    gamma0 = reader.number("risk.gamma0")
    if gamma0 <= 0:
        logger.error(f"Rejecting scenario with gamma0 = {gamma0}")
        raise DomainError(f"Initial risk aversion gamma0 must be positive, got {gamma0}")
    eta_raw = reader.raw("risk.eta")
    eta = None if eta_raw == FORWARD_ETA else reader.coefficient("risk.eta", allow_theta=True)
    beta = reader.coefficient("risk.beta", allow_theta=True)

    tag = reader.raw("utility.family")
    params = reader.raw("utility.params")
    if not isinstance(params, dict):
        raise reader.error("utility.params must be an object", "utility.params")
    try:
        utility = parse_family(tag, params, gamma0)
    except ScenarioParseError as e:
        raise ScenarioParseError(str(e).split(" (key")[0], key=e.key, line=_line_of(text, e.key or "utility")) from e

    x0 = reader.number("sim.x0")
    T = reader.number("sim.T")
    if T <= 0:
        logger.error(f"Rejecting scenario with T = {T}")
        raise DomainError(f"Horizon T must be positive, got {T}")
    steps_per_unit = reader.integer("sim.steps_per_unit")
    n_paths = reader.integer("sim.n_paths")
    if steps_per_unit < 1 or n_paths < 2:
        raise DomainError(f"Need steps_per_unit >= 1 and n_paths >= 2, got {steps_per_unit}, {n_paths}")
    seed = _check_seed(reader.raw("sim.seed"), "sim.seed")
    constants_paths = reader.integer("sim.constants_paths")
    if constants_paths is not None and constants_paths < 2:
        raise DomainError(f"sim.constants_paths must be at least 2, got {constants_paths}")
    grid = TimeGrid.from_rate(T, steps_per_unit)
    check_times = _parse_pairs(reader.raw("checks.pairs"), reader, grid, T)

    n_outer = reader.integer("checks.n_outer")
    n_inner = reader.integer("checks.n_inner")
    pass_fraction = reader.number("checks.pass_fraction")
    effect_size = reader.number("checks.effect_size")
    if n_outer < 2 or n_inner < 2:
        raise DomainError(f"Nested checks need n_outer, n_inner >= 2, got {n_outer}, {n_inner}")
    if not 0 < pass_fraction <= 1:
        raise DomainError(f"checks.pass_fraction must lie in (0, 1], got {pass_fraction}")
    if effect_size is not None and effect_size <= 0:
        raise DomainError(f"checks.effect_size must be positive, got {effect_size}")

    scenario_name = flat.get("name", name or DEFAULTS["name"])
    spec = ScenarioSpec(
        mu=mu, sigma=sigma, r=r, gamma0=gamma0, eta=eta, beta=beta, utility=utility,
        x0=x0, T=T, steps_per_unit=steps_per_unit, n_paths=n_paths, seed=seed,
        check_times=check_times, s0=s0, n_outer=n_outer, n_inner=n_inner,
        pass_fraction=pass_fraction, effect_size=effect_size, constants_paths=constants_paths,
        name=str(scenario_name), defaults=tuple(k for k in reader.defaulted if k != "name"))
    logger.info(f"Parsed scenario '{spec.name}' ({type(utility).__name__}, "
                f"{n_paths} paths, seed {seed}); defaults used: {list(spec.defaults)}")
    return spec


def scenario_document(spec: ScenarioSpec) -> Dict[str, Any]:
    """Flat dotted-key document for ``spec``; every key is written explicitly."""
    family = family_document(spec.utility)
    return {
        "name": spec.name,
        "market.mu": spec.mu.to_document(),
        "market.sigma": spec.sigma.to_document(),
        "market.r": spec.r,
        "market.s0": spec.s0,
        "risk.gamma0": spec.gamma0,
        "risk.eta": FORWARD_ETA if spec.eta is None else spec.eta.to_document(),
        "risk.beta": spec.beta.to_document(),
        "utility.family": family["family"],
        "utility.params": family["params"],
        "sim.x0": spec.x0,
        "sim.T": spec.T,
        "sim.steps_per_unit": spec.steps_per_unit,
        "sim.n_paths": spec.n_paths,
        "sim.seed": spec.seed,
        "sim.constants_paths": spec.constants_paths,
        "checks.pairs": [list(p) for p in spec.check_times],
        "checks.n_outer": spec.n_outer,
        "checks.n_inner": spec.n_inner,
        "checks.pass_fraction": spec.pass_fraction,
        "checks.effect_size": spec.effect_size,
    }


def serialize_scenario(spec: ScenarioSpec) -> str:
    return json.dumps(scenario_document(spec), indent=2, sort_keys=True)


def load_scenario(path: Union[str, Path]) -> ScenarioSpec:
    """Read a scenario file; its stem names the scenario unless the document does."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioParseError(f"Cannot read scenario file {path}: {e.strerror}") from e
    return parse_scenario(text, name=path.stem)


def _sample_points(spec: ScenarioSpec, w_values=W_SAMPLES) -> Tuple[np.ndarray, np.ndarray]:
    t, w = np.meshgrid(spec.grid.times, np.asarray(w_values, dtype=float), indexing="ij")
    return t, w


def _bound_witnesses(name: str, coef: CoefficientFn, values: np.ndarray, t: np.ndarray,
                     w: np.ndarray) -> Tuple[bool, List[Witness]]:
    witnesses = []
    ok = True
    finite = np.isfinite(values)
    over = ~finite | (np.abs(values) > coef.bound)
    tight = finite & ~over & (np.abs(values) >= TIGHT_RATIO * coef.bound)
    for mask, kind in ((over, "violated"), (tight, "tight")):
        if mask.any():
            j = tuple(np.argwhere(mask)[0])
            witnesses.append(Witness(name, float(t[j]), float(w[j]), float(values[j]), coef.bound, kind))
    if over.any():
        ok = False
        logger.warning(f"Coefficient {name} exceeds its bound {coef.bound} at {int(over.sum())} sample(s)")
    return ok, witnesses


def _theta_varies(spec: ScenarioSpec) -> bool:
    """True when theta moves with w at some fixed t."""
    t, w = _sample_points(spec, STOCHASTIC_W)
    with np.errstate(all="ignore"):
        theta = spec.theta(t, w)
    spread = np.nanmax(theta, axis=1) - np.nanmin(theta, axis=1)
    scale = max(1.0, float(np.nanmax(np.abs(theta))))
    return bool(np.nanmax(spread) > ZERO_TOL * scale)


def validate_assumptions(spec: ScenarioSpec) -> AssumptionReport:
    """Sample every coefficient on the grid x w-quantiles and report bound and sign behavior."""
    t, w = _sample_points(spec)
    witnesses: List[Witness] = []

    mu = spec.mu.evaluate(t, w)
    sigma = spec.sigma.evaluate(t, w)
    mu_ok, found = _bound_witnesses("mu", spec.mu, mu, t, w)
    witnesses += found
    sigma_ok, found = _bound_witnesses("sigma", spec.sigma, sigma, t, w)
    witnesses += found
    positive = sigma > 0
    if not positive.all():
        j = tuple(np.argwhere(~positive)[0])
        witnesses.append(Witness("sigma", float(t[j]), float(w[j]), float(sigma[j]), None, "non_positive"))

    with np.errstate(all="ignore"):
        theta = -(mu - spec.r) / sigma
    theta_ok = bool(positive.all() and np.isfinite(theta).all())
    zero = np.abs(theta) <= ZERO_TOL
    if zero.any():
        theta_ok = False
        j = tuple(np.argwhere(zero)[0])
        witnesses.append(Witness("theta", float(t[j]), float(w[j]), float(theta[j]), None, "zero"))
    elif theta_ok and (theta > 0).any() and (theta < 0).any():
        theta_ok = False
        j = tuple(np.argwhere(np.sign(theta) != np.sign(theta.flat[0]))[0])
        witnesses.append(Witness("theta", float(t[j]), float(w[j]), float(theta[j]), None, "sign_change"))
    hp_theta_ok = theta_ok and mu_ok and sigma_ok

    assumption_ok = True
    coefficients = [("beta", spec.beta)]
    if spec.eta is not None:
        coefficients.insert(0, ("eta", spec.eta))
    if spec.noise_beta is not None:
        coefficients.append(("noise_beta", spec.noise_beta))
    for name, coef in coefficients:
        values = coef.evaluate(t, w, theta if coef.uses_theta else None)
        ok, found = _bound_witnesses(name, coef, values, t, w)
        assumption_ok = assumption_ok and ok
        witnesses += found

    report = AssumptionReport(hp_theta_ok=hp_theta_ok, assumption_A_ok=assumption_ok,
                              theta_stochastic=_theta_varies(spec),
                              witnesses=tuple(witnesses))
    logger.info(f"Assumptions for '{spec.name}': theta ok={report.hp_theta_ok}, "
                f"(A) ok={report.assumption_A_ok}, theta stochastic={report.theta_stochastic}")
    return report


def theta_is_deterministic(spec: ScenarioSpec) -> bool:
    return not _theta_varies(spec)


def is_consistent_pair(spec: ScenarioSpec, tol: float = 1e-12) -> bool:
    """True when eta vanishes and beta = -theta/2 on the validation grid."""
    if spec.eta is None:
        return False
    t, w = _sample_points(spec)
    theta = spec.theta(t, w)
    eta = spec.eta.evaluate(t, w, theta)
    beta = spec.beta.evaluate(t, w, theta)
    return bool(np.all(np.abs(eta) <= tol) and np.all(np.abs(beta + theta / 2) <= tol * (1 + np.abs(theta))))
