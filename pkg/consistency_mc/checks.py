"""Numerical certificates for consistency, forward-performance and martingale properties.

Every check returns a CheckReport with verdict ``pass``, ``fail`` or
``inconclusive``. Statistical bands are 3 standard errors wide (plus a 1e-12
absolute floor for deterministic quantities). A passing check is downgraded to
inconclusive when the scenario declares ``checks.effect_size`` and the band is
wider than a quarter of it.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .coefficients import CONSTANT, CoefficientFn
from .estimators import (
    ColumnMoments,
    Target,
    conditional_q_expectation_nested,
    conditional_q_expectation_regression,
)
from .exceptions import ScenarioError
from .paths import PathBatch, simulate_wealth
from .preferences import DetExp, MultNoise, Power, StateDepExp, utility_value
from .scenario import ScenarioSpec, is_consistent_pair
from .strategies import (
    CHUNK_PATHS,
    GeneralExpModel,
    NoiseModel,
    PowerModel,
    WealthModel,
    forward_drift,
    forward_rule,
    iter_scenario_batches,
    noise_drift,
    simulate_scenario,
    wealth_model,
)


logger = logging.getLogger(__name__)

PASS = "pass"
FAIL = "fail"
INCONCLUSIVE = "inconclusive"

BAND_K = 3.0
ABS_TOL = 1e-12
DRIFT_TOL = 1e-10
RESOLUTION_RATIO = 0.25
PERTURBATIONS = (-0.5, -0.25, 0.25, 0.5)
REGRESSION_AGREEMENT = 0.9
SWEEP_SEEDS = 5
SWEEP_REQUIRED = 4


@dataclass
class CheckReport:
    """Outcome of one property check."""

    name: str
    scenario: str
    statistic: Dict[str, Any]
    band: Dict[str, Any]
    verdict: str
    n_paths: int
    seed: int
    wall_time_ms: int = 0
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    details: Optional[Dict[str, np.ndarray]] = field(default=None, compare=False, repr=False)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "scenario": self.scenario, "statistic": _jsonable(self.statistic),
                "band": _jsonable(self.band), "verdict": self.verdict, "n_paths": self.n_paths,
                "seed": self.seed, "wall_time_ms": self.wall_time_ms,
                "diagnostics": _jsonable(self.diagnostics)}


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


@contextmanager
def _timer() -> Iterator[Dict[str, int]]:
    clock = {"ms": 0}
    start = time.perf_counter()
    try:
        yield clock
    finally:
        clock["ms"] = int(round((time.perf_counter() - start) * 1000))


def _verdict(spec: ScenarioSpec, ok: bool, resolution: float) -> str:
    if not ok:
        return FAIL
    if spec.effect_size is not None and resolution > RESOLUTION_RATIO * spec.effect_size:
        logger.warning(f"Band half-width {resolution:.3g} exceeds {RESOLUTION_RATIO} x effect size "
                       f"{spec.effect_size}; verdict is inconclusive")
        return INCONCLUSIVE
    return PASS


def pass_quota(n: int, pass_fraction: float, k: float = BAND_K) -> int:
    """Paths that must fall inside their band: the stricter of the binomial k-sigma
    allowance for a k-sigma per-path band and ``ceil(pass_fraction * n)``."""
    p_out = 2.0 * stats.norm.sf(k)
    allowed = int(stats.binom.ppf(stats.norm.cdf(k), n, p_out))
    return min(n - allowed, math.ceil(pass_fraction * n - 1e-9))


def _pair(spec: ScenarioSpec, pair: Optional[Tuple[float, float]]) -> Tuple[float, float]:
    if pair is None:
        return spec.check_times[0]
    pair = (float(pair[0]), float(pair[1]))
    if pair not in spec.check_times:
        raise ScenarioError(f"Pair {pair} is not one of the scenario's check times {list(spec.check_times)}")
    return pair


def check_consistency(spec: ScenarioSpec, model: Optional[WealthModel] = None,
                      pair: Optional[Tuple[float, float]] = None, name: str = "consistency") -> CheckReport:
    """Compare xi*_s with the nested estimate of E_Q[xi*_t | F_s] on each outer path."""
    with _timer() as clock:
        s, t = _pair(spec, pair)
        model = model or wealth_model(spec)
        grid = spec.grid
        i_s, i_t = grid.index_of(s), grid.index_of(t)
        outer = model.fill(simulate_scenario(spec, n_paths=spec.n_outer))
        nested = conditional_q_expectation_nested(spec, outer, s, t, model.target(i_t))
        xi_s = outer.channel("xi_star")[:, i_s]
        state_s = {key: outer.channel(key)[:, i_s] for key in model.requires}
        offset = model.offset_se(state_s, i_s, i_t)
        band = BAND_K * np.sqrt(nested.se ** 2 + offset ** 2) + ABS_TOL * (1 + np.abs(xi_s))
        deviation = nested.values - xi_s
        inside = np.abs(deviation) <= band
        # inner sampling error only, without the constants offset
        n_deviating = int((np.abs(deviation) > BAND_K * nested.se).sum())
        n = nested.n_outer
        quota = pass_quota(n, spec.pass_fraction)
        n_pass = int(inside.sum())
        median_band = float(np.median(band))
    verdict = _verdict(spec, n_pass >= quota, median_band)
    logger.info(f"{name} ({model.name}) at ({s}, {t}): {n_pass}/{n} inside, quota {quota} -> {verdict}")
    return CheckReport(
        name=name, scenario=spec.name,
        statistic={"s": s, "t": t, "n_inside": n_pass, "n_outer": n,
                   "n_deviating": n_deviating,
                   "mean_deviation": float(deviation.mean()),
                   "max_abs_deviation": float(np.abs(deviation).max())},
        band={"k": BAND_K, "quota": quota, "median_band": median_band, "n_inner": nested.n_inner},
        verdict=verdict, n_paths=n, seed=spec.seed, wall_time_ms=clock["ms"],
        diagnostics={"model": model.name},
        details={"outer_path": np.arange(n), "xi_s": xi_s, "nested_mean": nested.values,
                 "nested_se": nested.se, "offset_se": offset, "band": band, "inside": inside})


def check_noise_consistency(spec: ScenarioSpec, pair: Optional[Tuple[float, float]] = None) -> CheckReport:
    """Consistency of the multiplicative-noise optimum through phi = Z/X."""
    if not isinstance(spec.utility, MultNoise):
        raise ScenarioError("noise_consistency needs a multiplicative-noise utility")
    return check_consistency(spec, NoiseModel(spec), pair, name="noise_consistency")


def check_power_identity(spec: ScenarioSpec, pair: Optional[Tuple[float, float]] = None) -> CheckReport:
    """Power-utility consistency in H form: E_Q[(Z_t/Z_s)^b | F_s] = H_t/H_s on each outer path.

    Dividing the generic condition E_Q[xi*_t | F_s] = xi*_s by x Z_s^b / H_t
    gives this ratio identity; it holds for every path exactly when theta is
    deterministic.
    """
    if not isinstance(spec.utility, Power):
        raise ScenarioError("power_identity needs a power utility")
    with _timer() as clock:
        s, t = _pair(spec, pair)
        model = PowerModel(spec)
        b, constants = model.b, model.constants
        i_s, i_t = spec.grid.index_of(s), spec.grid.index_of(t)
        outer = simulate_scenario(spec, n_paths=spec.n_outer)
        target = Target(fn=lambda state: np.exp(b * state["logZ"]), name="Z^b")
        nested = conditional_q_expectation_nested(spec, outer, s, t, target)
        scale = np.exp(b * outer.channel("logZ")[:, i_s])
        conditional = nested.values / scale
        conditional_se = nested.se / scale
        h_s, h_t = constants.value("H", i_s), constants.value("H", i_t)
        h_ratio = h_t / h_s
        h_ratio_se = h_ratio * np.hypot(constants.se("H", i_s) / h_s, constants.se("H", i_t) / h_t)
        band = BAND_K * np.sqrt(conditional_se ** 2 + h_ratio_se ** 2) + ABS_TOL * h_ratio
        deviation = conditional - h_ratio
        inside = np.abs(deviation) <= band
        n = nested.n_outer
        quota = pass_quota(n, spec.pass_fraction)
        n_pass = int(inside.sum())
        median_band = float(np.median(band))
    verdict = _verdict(spec, n_pass >= quota, median_band)
    logger.info(f"Power identity at ({s}, {t}): H_t/H_s = {h_ratio:.6g}, {n_pass}/{n} inside -> {verdict}")
    return CheckReport(
        name="power_identity", scenario=spec.name,
        statistic={"s": s, "t": t, "h_ratio": float(h_ratio), "n_inside": n_pass, "n_outer": n,
                   "max_abs_deviation": float(np.abs(deviation).max())},
        band={"k": BAND_K, "quota": quota, "median_band": median_band, "h_ratio_se": float(h_ratio_se)},
        verdict=verdict, n_paths=n, seed=spec.seed, wall_time_ms=clock["ms"],
        diagnostics={"exponent": b},
        details={"outer_path": np.arange(n), "conditional": conditional, "conditional_se": conditional_se,
                 "band": band, "inside": inside})


def check_regression_agreement(spec: ScenarioSpec, pair: Optional[Tuple[float, float]] = None,
                               n_regression: int = CHUNK_PATHS) -> CheckReport:
    """Cross-check nested conditional means against the regression projection on the same outer paths."""
    with _timer() as clock:
        s, t = _pair(spec, pair)
        model = wealth_model(spec)
        i_t = spec.grid.index_of(t)
        batch = model.fill(simulate_scenario(spec, n_paths=max(n_regression, spec.n_outer)))
        regression = conditional_q_expectation_regression(batch, s, t, "xi_star")
        outer = batch.head(spec.n_outer)
        nested = conditional_q_expectation_nested(spec, outer, s, t, model.target(i_t))
        band = BAND_K * np.hypot(nested.se, regression.se[:spec.n_outer]) + ABS_TOL
        agree = np.abs(nested.values - regression.values[:spec.n_outer]) <= band
        fraction = float(agree.mean())
    verdict = _verdict(spec, fraction >= REGRESSION_AGREEMENT, float(np.median(band)))
    logger.info(f"Regression vs nested at ({s}, {t}): {fraction:.0%} agree -> {verdict}")
    return CheckReport(
        name="regression_cross_check", scenario=spec.name,
        statistic={"s": s, "t": t, "agreement": fraction},
        band={"k": BAND_K, "required": REGRESSION_AGREEMENT},
        verdict=verdict, n_paths=batch.n_paths, seed=spec.seed, wall_time_ms=clock["ms"],
        diagnostics={"fit": regression.fit})


def _check_times(spec: ScenarioSpec, times: Optional[Sequence[float]]) -> List[float]:
    if times is None:
        times = sorted({0.0} | {u for pair in spec.check_times for u in pair})
    times = sorted(float(u) for u in times)
    for u in times:
        spec.grid.index_of(u)
    return times


def _martingale_values(spec: ScenarioSpec, batch: PathBatch, channel: str,
                       model: Optional[WealthModel]) -> np.ndarray:
    if channel in ("xi_star", "u_xi_star"):
        batch = model.fill(batch)
        if channel == "xi_star":
            return batch.channel("xi_star")
        return utility_value(spec.utility, batch.channel("xi_star"),
                             gamma_inv=batch.channel("gamma_inv") if batch.has("gamma_inv") else None,
                             X=batch.channel("X") if batch.has("X") else None)
    if channel == "u_V_star":
        return utility_value(StateDepExp(), batch.channel("V_star"), gamma_inv=batch.channel("gamma_inv"))
    return batch.channel(channel)


def check_martingale(spec: ScenarioSpec, channel: str, measure: str = "P",
                     times: Optional[Sequence[float]] = None, n_paths: Optional[int] = None,
                     batch: Optional[PathBatch] = None) -> CheckReport:
    """E[channel_t] is constant across ``times`` (Z-weighted for measure Q).

    ``channel`` is any batch channel, or ``xi_star``, ``u_xi_star`` (utility
    of the optimum) or ``u_V_star`` (forward-family utility).
    """
    if measure not in ("P", "Q"):
        raise ScenarioError(f"Measure must be 'P' or 'Q', got {measure!r}")
    with _timer() as clock:
        times = _check_times(spec, times)
        cols = [spec.grid.index_of(u) for u in times]
        model = wealth_model(spec) if channel in ("xi_star", "u_xi_star") else None
        batches = [batch] if batch is not None else iter_scenario_batches(spec, n_paths)
        acc = ColumnMoments()
        total = 0
        for chunk in batches:
            values = _martingale_values(spec, chunk, channel, model)[:, cols]
            if measure == "Q":
                values = np.exp(chunk.logZ[:, cols]) * values
            acc.add(**{f"m{j}": values[:, j] for j in range(len(cols))})
            total += chunk.n_paths
        means = [acc.estimate(f"m{j}") for j in range(len(cols))]
        diffs, bands = [], []
        for j in range(1, len(cols)):
            d, se = acc.difference(f"m{j}", "m0")
            diffs.append(float(d))
            bands.append(float(BAND_K * se + ABS_TOL * (1 + abs(means[0].mean))))
        ok = all(abs(d) <= b for d, b in zip(diffs, bands))
        drift = float(np.sign(diffs[-1])) if diffs and not ok else 0.0
    verdict = _verdict(spec, ok, max(bands, default=0.0))
    logger.info(f"Martingale check of {channel} under {measure}: differences {diffs} -> {verdict}")
    return CheckReport(
        name=f"martingale:{channel}:{measure}", scenario=spec.name,
        statistic={"times": times, "means": [m.mean for m in means], "se": [m.se for m in means],
                   "differences": diffs, "drift_sign": drift},
        band={"k": BAND_K, "half_widths": bands},
        verdict=verdict, n_paths=total, seed=spec.seed, wall_time_ms=clock["ms"])


def check_budget(spec: ScenarioSpec, times: Optional[Sequence[float]] = None,
                 n_paths: Optional[int] = None, model: Optional[WealthModel] = None) -> CheckReport:
    """E_Q[xi*_t] = x at each time, with constant-estimation error folded into the band."""
    with _timer() as clock:
        times = [u for u in _check_times(spec, times) if u > 0]
        cols = [spec.grid.index_of(u) for u in times]
        model = model or wealth_model(spec)
        acc = ColumnMoments()
        total = 0
        for chunk in iter_scenario_batches(spec, n_paths):
            chunk = model.fill(chunk)
            acc.add(q=np.exp(chunk.logZ[:, cols]) * chunk.channel("xi_star")[:, cols])
            total += chunk.n_paths
        means, ses = acc.mean("q")
        bands = [float(BAND_K * math.hypot(se, model.budget_se(i)) + ABS_TOL * (1 + abs(spec.x0)))
                 for se, i in zip(ses, cols)]
        deviations = [float(m - spec.x0) for m in means]
        ok = all(abs(d) <= b for d, b in zip(deviations, bands))
    verdict = _verdict(spec, ok, max(bands))
    logger.info(f"Budget check ({model.name}): deviations {deviations} -> {verdict}")
    return CheckReport(
        name="budget", scenario=spec.name,
        statistic={"times": times, "means": [float(m) for m in means], "deviations": deviations},
        band={"k": BAND_K, "half_widths": bands},
        verdict=verdict, n_paths=total, seed=spec.seed, wall_time_ms=clock["ms"],
        diagnostics={"model": model.name})


def _forward_states(spec: ScenarioSpec, batch: PathBatch) -> Dict[str, np.ndarray]:
    """Wealth, exposure and the coefficients the drift bracket reads, on every state."""
    family = spec.utility
    if spec.eta is None:
        return {"V": batch.channel("V_star"), "e": batch.channel("exposure_star"),
                "gamma_inv": batch.channel("gamma_inv"), "eta": batch.channel("eta_star"),
                "beta": batch.channel("beta")}
    batch = simulate_wealth(forward_rule(spec), spec, batch, spec.x0)
    states = {"V": batch.channel("V"), "e": batch.channel("exposure")}
    if isinstance(family, MultNoise):
        states.update(gamma=family.base.gamma, beta=batch.channel("noise_beta"), X=batch.channel("X"))
    else:
        states.update(gamma_inv=batch.channel("gamma_inv"), eta=batch.channel("eta"), beta=batch.channel("beta"))
    return states


def _bracket(spec: ScenarioSpec, states: Dict[str, np.ndarray], theta: np.ndarray, e: np.ndarray) -> np.ndarray:
    if isinstance(spec.utility, MultNoise):
        return noise_drift(states["gamma"], e, theta, states["beta"])
    return forward_drift(states["gamma_inv"], states["V"], e, theta, states["beta"], states["eta"])


def _forward_utility(spec: ScenarioSpec, states: Dict[str, np.ndarray]) -> np.ndarray:
    family = spec.utility
    if isinstance(family, MultNoise):
        return utility_value(family, states["V"], X=states["X"])
    return utility_value(StateDepExp(), states["V"], gamma_inv=states["gamma_inv"])


def check_forward_performance(spec: ScenarioSpec, times: Optional[Sequence[float]] = None,
                              perturbations: Sequence[float] = PERTURBATIONS,
                              n_paths: Optional[int] = None) -> CheckReport:
    """Drift bracket >= 0 for the candidate and perturbed strategies, = 0 for the candidate,
    and E_P[u_t(V*_t)] constant in t."""
    family = spec.utility
    if not (isinstance(family, StateDepExp) or (isinstance(family, MultNoise) and isinstance(family.base, DetExp))):
        raise ScenarioError(f"Forward-performance check is not available for {type(family).__name__} utility")
    if len(perturbations) < 4:
        raise ScenarioError("The strategy set needs at least 4 perturbations of the candidate")
    with _timer() as clock:
        times = _check_times(spec, times)
        cols = [spec.grid.index_of(u) for u in times]
        acc = ColumnMoments()
        min_drift = {delta: math.inf for delta in perturbations}
        candidate_min, candidate_max = math.inf, -math.inf
        total = 0
        for chunk in iter_scenario_batches(spec, n_paths):
            states = _forward_states(spec, chunk)
            theta = chunk.theta
            sigma = chunk.channel("sigma")
            f_star = _bracket(spec, states, theta, states["e"])
            candidate_min = min(candidate_min, float(f_star.min()))
            candidate_max = max(candidate_max, float(f_star.max()))
            for delta in perturbations:
                f = _bracket(spec, states, theta, states["e"] + sigma * delta * states["V"])
                min_drift[delta] = min(min_drift[delta], float(f.min()))
            u = _forward_utility(spec, states)[:, cols]
            acc.add(**{f"u{j}": u[:, j] for j in range(len(cols))})
            total += chunk.n_paths

        drift_ok = candidate_min >= -DRIFT_TOL and all(v >= -DRIFT_TOL for v in min_drift.values())
        equality_ok = max(abs(candidate_min), abs(candidate_max)) <= DRIFT_TOL
        means = [acc.estimate(f"u{j}") for j in range(len(cols))]
        diffs, bands = [], []
        for a in range(len(cols)):
            for b in range(a + 1, len(cols)):
                d, se = acc.difference(f"u{b}", f"u{a}")
                diffs.append({"s": times[a], "t": times[b], "difference": float(d)})
                bands.append(float(BAND_K * se + ABS_TOL * (1 + abs(means[a].mean))))
        martingale_ok = all(abs(d["difference"]) <= band for d, band in zip(diffs, bands))
    ok = drift_ok and equality_ok and martingale_ok
    verdict = _verdict(spec, ok, max(bands, default=0.0))
    logger.info(f"Forward performance: drift ok={drift_ok}, equality ok={equality_ok}, "
                f"martingale ok={martingale_ok} -> {verdict}")
    return CheckReport(
        name="forward_performance", scenario=spec.name,
        statistic={"candidate_drift_min": candidate_min, "candidate_drift_max": candidate_max,
                   "perturbed_drift_min": {str(d): v for d, v in min_drift.items()},
                   "times": times, "expected_utility": [m.mean for m in means], "differences": diffs},
        band={"drift_tol": DRIFT_TOL, "k": BAND_K, "half_widths": bands},
        verdict=verdict, n_paths=total, seed=spec.seed, wall_time_ms=clock["ms"],
        diagnostics={"drift_ok": drift_ok, "equality_ok": equality_ok, "martingale_ok": martingale_ok})


def check_optimality_gap(spec: ScenarioSpec, t: Optional[float] = None, expect_gap: bool = True,
                         n_paths: Optional[int] = None) -> CheckReport:
    """Delta = E_P[u_t(xi*_t)] - E_P[u_t(V*_t)] between the static optimum and the forward family.

    Both run on the same paths with the forward risk-aversion field. With
    ``expect_gap`` the check passes iff Delta > 3 SE, otherwise iff |Delta| <= 3 SE.
    """
    if not isinstance(spec.utility, StateDepExp):
        raise ScenarioError("The optimality gap compares state-dependent exponential utilities")
    with _timer() as clock:
        forward_spec = dataclasses.replace(spec, eta=None)
        t = spec.T if t is None else float(t)
        i = spec.grid.index_of(t)
        model = GeneralExpModel(forward_spec)
        acc = ColumnMoments()
        total = 0
        for chunk in iter_scenario_batches(forward_spec, n_paths):
            chunk = model.fill(chunk)
            gi = chunk.channel("gamma_inv")[:, i]
            xi = chunk.channel("xi_star")[:, i]
            acc.add(u_xi=-gi * np.exp(-xi / gi), u_v=-gi * np.exp(-chunk.channel("V_star")[:, i] / gi),
                    du_dk=gi * np.exp(-xi / gi))
            total += chunk.n_paths
        delta, se = acc.difference("u_xi", "u_v")
        sensitivity, _ = acc.mean("du_dk")
        offset = float(sensitivity) * float(model.constants.se("k", i))
        combined = float(math.hypot(se, offset))
        ok = delta > BAND_K * combined if expect_gap else abs(delta) <= BAND_K * combined + ABS_TOL
    verdict = _verdict(spec, ok, BAND_K * combined)
    logger.info(f"Optimality gap at t={t}: delta={float(delta):.4g} (se {combined:.3g}) -> {verdict}")
    return CheckReport(
        name="optimality_gap", scenario=spec.name,
        statistic={"t": t, "delta": float(delta), "se": combined,
                   "u_static": acc.estimate("u_xi").mean, "u_forward": acc.estimate("u_v").mean},
        band={"k": BAND_K, "expect_gap": expect_gap},
        verdict=verdict, n_paths=total, seed=spec.seed, wall_time_ms=clock["ms"])


def seed_sweep(spec: ScenarioSpec, check: Callable[[ScenarioSpec], CheckReport], n_seeds: int = SWEEP_SEEDS,
               required: int = SWEEP_REQUIRED, expect: str = PASS) -> CheckReport:
    """Run ``check`` on seeds seed..seed+n_seeds-1; pass iff ``required`` of them give ``expect``."""
    with _timer() as clock:
        reports = [check(spec.with_overrides(seed=(spec.seed + k) % 2 ** 64)) for k in range(n_seeds)]
        hits = sum(r.verdict == expect for r in reports)
    verdict = PASS if hits >= required else FAIL
    logger.info(f"Seed sweep of {reports[0].name}: {hits}/{n_seeds} gave {expect} -> {verdict}")
    return CheckReport(
        name=f"seed_sweep:{reports[0].name}", scenario=spec.name,
        statistic={"hits": hits, "verdicts": [r.verdict for r in reports]},
        band={"required": required, "expect": expect},
        verdict=verdict, n_paths=reports[0].n_paths, seed=spec.seed, wall_time_ms=clock["ms"])


def default_checks(spec: ScenarioSpec) -> List[str]:
    family = spec.utility
    if isinstance(family, MultNoise):
        names = ["noise_consistency", "budget"]
        return names + (["forward_performance"] if isinstance(family.base, DetExp) else [])
    if isinstance(family, StateDepExp):
        if spec.eta is None:
            return ["forward_performance", "optimality_gap", "martingale"]
        return ["consistency", "budget", "martingale", "forward_performance"]
    if isinstance(family, Power):
        return ["consistency", "power_identity", "budget", "martingale"]
    return ["consistency", "budget", "martingale"]


def _eta_is_zero(spec: ScenarioSpec) -> bool:
    return spec.eta is not None and spec.eta.form == CONSTANT and spec.eta.value == 0.0


def _beta_halves_theta(spec: ScenarioSpec) -> bool:
    return is_consistent_pair(dataclasses.replace(spec, eta=CoefficientFn.constant(0.0)))


def _martingale_battery(spec: ScenarioSpec) -> List[CheckReport]:
    reports = [check_martingale(spec, "Z", "P")]
    if isinstance(spec.utility, StateDepExp):
        if spec.eta is None:
            reports.append(check_martingale(spec, "u_V_star", "P"))
        else:
            if _eta_is_zero(spec):
                reports.append(check_martingale(spec, "gamma_inv", "Q"))
            if is_consistent_pair(spec):
                reports.append(check_martingale(spec, "u_xi_star", "P"))
    return reports


def run_checks(spec: ScenarioSpec, names: Optional[Sequence[str]] = None) -> List[CheckReport]:
    """Run the named checks (default: those applicable to the scenario), one report per pair or channel."""
    names = list(names) if names else default_checks(spec)
    runners: Dict[str, Callable[[], List[CheckReport]]] = {
        "consistency": lambda: [check_consistency(spec, pair=p) for p in spec.check_times],
        "noise_consistency": lambda: [check_noise_consistency(spec, p) for p in spec.check_times],
        "power_identity": lambda: [check_power_identity(spec, p) for p in spec.check_times],
        "regression_cross_check": lambda: [check_regression_agreement(spec, p) for p in spec.check_times],
        "budget": lambda: [check_budget(spec)],
        "martingale": lambda: _martingale_battery(spec),
        "forward_performance": lambda: [check_forward_performance(spec)],
        "optimality_gap": lambda: [check_optimality_gap(spec, expect_gap=not _beta_halves_theta(spec))],
    }
    unknown = [n for n in names if n not in runners]
    if unknown:
        raise ScenarioError(f"Unknown check(s) {unknown}; available: {sorted(runners)}")
    reports: List[CheckReport] = []
    for name in names:
        logger.info(f"Running check '{name}' on scenario '{spec.name}'")
        reports.extend(runners[name]())
    return reports
