"""Tests for the consistency, martingale, budget and forward-performance checks."""

import json
import logging
import math

import numpy as np
import pytest

from consistency_mc.checks import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    check_budget,
    check_consistency,
    check_forward_performance,
    check_martingale,
    check_noise_consistency,
    check_optimality_gap,
    check_power_identity,
    check_regression_agreement,
    default_checks,
    pass_quota,
    run_checks,
    seed_sweep,
)
from consistency_mc.exceptions import ScenarioError
from tests.helpers.scenarios import build_scenario


logger = logging.getLogger(__name__)

STRONG_MU = {"expr": "0.05 + 0.1*tanh(2*w)", "bound": 0.15}
TIME_BETA = {"expr": "0.05 + 0.05*t", "bound": 0.1}
POWER_STRONG_MU = {"expr": "0.08 + 0.05*tanh(2*w)", "bound": 0.13}


@pytest.fixture
def strong_beta_zero_spec():
    """Strongly state-dependent theta with beta = 0 and a large inner sample."""
    return build_scenario("strong_beta_zero", market={"mu": STRONG_MU}, risk={"beta": 0.0},
                          checks={"n_inner": 2000})


class TestPassQuota:
    """Test cases for the per-path pass quota."""

    @pytest.mark.parametrize("n, quota", [(50, 47), (20, 19)])
    def test_quota(self, n, quota):
        """Test the binomial allowance against ceil(0.94 n)."""
        assert pass_quota(n, 0.94) == quota

    def test_fraction_can_dominate(self):
        """Test that a strict pass fraction overrides the binomial allowance."""
        assert pass_quota(50, 1.0) == 50


class TestConsistency:
    """Test cases for the nested consistency check."""

    def test_consistent_pair_passes(self, consistent_spec):
        """Test that eta = 0, beta = -theta/2 is time-consistent."""
        report = check_consistency(consistent_spec)
        logging.info(f"Consistency report: {report.statistic}")
        assert report.verdict == PASS
        assert report.statistic["n_outer"] == consistent_spec.n_outer
        assert report.band["quota"] == 19
        assert set(report.details) == {"outer_path", "xi_s", "nested_mean", "nested_se", "offset_se",
                                       "band", "inside"}

    def test_beta_zero_fails(self, strong_beta_zero_spec):
        """Test that beta = 0 under a state-dependent theta is not time-consistent."""
        report = check_consistency(strong_beta_zero_spec)
        logging.info(f"Consistency report: {report.statistic}")
        assert report.verdict == FAIL
        assert report.diagnostics["model"] == "general_exp"
        details = report.details
        beyond = np.abs(details["nested_mean"] - details["xi_s"]) > 3 * details["nested_se"]
        assert report.statistic["n_deviating"] == int(beyond.sum())
        assert report.statistic["n_deviating"] > report.statistic["n_outer"] - report.band["quota"]

    def test_merton_constant_theta_passes(self, merton_spec):
        """Test that constant theta with constant risk aversion is time-consistent."""
        assert check_consistency(merton_spec).verdict == PASS

    def test_unknown_pair(self, consistent_spec):
        """Test that only declared check pairs are accepted."""
        with pytest.raises(ScenarioError):
            check_consistency(consistent_spec, pair=(0.25, 0.5))

    def test_noise_k_zero_passes(self):
        """Test that beta = theta keeps the noise optimum time-consistent."""
        spec = build_scenario("noise_k_zero", risk={"beta": 0.0}, utility={
            "family": "mult_noise", "params": {"beta": {"expr": "theta", "bound": 0.3}, "gamma": 1.0}})
        report = check_noise_consistency(spec)
        assert report.name == "noise_consistency"
        assert report.verdict == PASS

    def test_noise_needs_noise_family(self, consistent_spec):
        """Test that noise_consistency refuses other utilities."""
        with pytest.raises(ScenarioError):
            check_noise_consistency(consistent_spec)

    def test_regression_agrees_with_nested(self, consistent_spec):
        """Test that the regression projection broadly agrees with the nested estimate."""
        report = check_regression_agreement(consistent_spec)
        logging.info(f"Regression cross-check: {report.statistic}, fit {report.diagnostics['fit']}")
        assert report.name == "regression_cross_check"
        assert report.statistic["agreement"] > 0.7


class TestPowerIdentity:
    """Test cases for power-utility consistency through H_t / H_s."""

    def test_constant_theta_passes(self, power_spec):
        """Test that deterministic theta passes both the generic and the H-ratio form."""
        generic = check_consistency(power_spec)
        assert generic.verdict == PASS
        assert generic.diagnostics["model"] == "power"
        report = check_power_identity(power_spec)
        logging.info(f"Power identity: {report.statistic}")
        assert report.verdict == PASS
        # theta^2 (b + b^2) / 2 = 0.04 per unit time for b = -2
        assert report.statistic["h_ratio"] == pytest.approx(math.exp(0.04 * 0.5), rel=1e-2)

    def test_stochastic_theta_fails(self):
        """Test that a strongly state-dependent theta breaks the H-ratio identity."""
        spec = build_scenario(
            "power_stochastic", market={"mu": POWER_STRONG_MU}, risk={"beta": 0.0},
            utility={"family": "power", "params": {"gamma": 0.5}},
            sim={"constants_paths": 20000}, checks={"n_inner": 8000})
        report = check_power_identity(spec)
        logging.info(f"Power identity: {report.statistic}, band {report.band}")
        assert report.verdict == FAIL
        assert report.statistic["n_inside"] < report.band["quota"]

    def test_needs_power_utility(self, consistent_spec):
        """Test that other families are refused."""
        with pytest.raises(ScenarioError):
            check_power_identity(consistent_spec)


class TestMartingale:
    """Test cases for the martingale battery."""

    def test_density_under_p(self, consistent_spec):
        """Test that Z is a P-martingale."""
        report = check_martingale(consistent_spec, "Z", "P")
        assert report.name == "martingale:Z:P"
        assert report.statistic["times"] == [0.0, 0.5, 1.0]
        assert report.verdict == PASS

    def test_density_under_q_drifts(self, consistent_spec):
        """Test that E_Q[Z_t] = E_P[Z_t^2] increases and the drift sign is reported."""
        report = check_martingale(consistent_spec, "Z", "Q")
        logging.info(f"Differences: {report.statistic['differences']}")
        assert report.verdict == FAIL
        assert report.statistic["drift_sign"] == 1.0

    def test_consistent_battery(self, consistent_spec):
        """Test Z under P, 1/gamma under Q and u(xi*) under P in the consistent regime."""
        reports = run_checks(consistent_spec, ["martingale"])
        names = [r.name for r in reports]
        assert names == ["martingale:Z:P", "martingale:gamma_inv:Q", "martingale:u_xi_star:P"]
        assert all(r.verdict == PASS for r in reports)

    def test_forward_battery(self, forward_spec):
        """Test that the forward family checks u(V*) under P."""
        names = [r.name for r in run_checks(forward_spec, ["martingale"])]
        assert names == ["martingale:Z:P", "martingale:u_V_star:P"]

    def test_bad_measure(self, consistent_spec):
        """Test that only P and Q are accepted."""
        with pytest.raises(ScenarioError):
            check_martingale(consistent_spec, "Z", "R")

    def test_inconclusive_when_unresolved(self):
        """Test that a passing check with a band wider than effect_size/4 is inconclusive."""
        spec = build_scenario("tiny_effect", checks={"effect_size": 1e-6})
        assert check_martingale(spec, "Z", "P").verdict == INCONCLUSIVE

    def test_seed_sweep(self, consistent_spec):
        """Test that the sweep passes when enough seeds give the expected verdict."""
        report = seed_sweep(consistent_spec, lambda s: check_martingale(s, "Z", "P", n_paths=512))
        assert report.name == "seed_sweep:martingale:Z:P"
        assert report.statistic["hits"] >= 4
        assert report.verdict == PASS


class TestBudget:
    """Test cases for the budget constraint E_Q[xi*_t] = x."""

    def test_consistent_budget(self, consistent_spec):
        """Test the budget at each check time for the consistent optimum."""
        report = check_budget(consistent_spec)
        assert report.statistic["times"] == [0.5, 1.0]
        assert report.verdict == PASS

    def test_general_budget(self, beta_zero_spec):
        """Test the budget with estimated constants folded into the band."""
        report = check_budget(beta_zero_spec)
        assert report.diagnostics["model"] == "general_exp"
        assert report.verdict == PASS


class TestForwardPerformance:
    """Test cases for the forward-performance check."""

    def test_forward_family_passes(self, forward_spec):
        """Test the drift, equality and martingale conditions for beta = 0.1."""
        report = check_forward_performance(forward_spec)
        logging.info(f"Forward report: {report.statistic}")
        assert report.diagnostics == {"drift_ok": True, "equality_ok": True, "martingale_ok": True}
        assert report.verdict == PASS

    def test_consistent_pair_is_forward(self, consistent_spec):
        """Test that eta = 0, beta = -theta/2 satisfies the forward conditions."""
        report = check_forward_performance(consistent_spec)
        assert report.diagnostics["drift_ok"] and report.diagnostics["equality_ok"]

    def test_time_dependent_beta_fails(self):
        """Test that deterministic theta with beta = 0.05 + 0.05t fails the drift condition."""
        spec = build_scenario("det_theta_time_beta", market={"mu": 0.05}, risk={"beta": TIME_BETA})
        report = check_forward_performance(spec)
        logging.info(f"Candidate drift range: {report.statistic['candidate_drift_min']}, "
                     f"{report.statistic['candidate_drift_max']}")
        assert report.verdict == FAIL
        assert not report.diagnostics["drift_ok"]
        assert report.statistic["candidate_drift_min"] < 0

    def test_noise_k_zero_passes(self):
        """Test that beta = theta gives zero drift at e* = 0."""
        spec = build_scenario("noise_k_zero", risk={"beta": 0.0}, utility={
            "family": "mult_noise", "params": {"beta": {"expr": "theta", "bound": 0.3}, "gamma": 1.0}})
        assert check_forward_performance(spec).verdict == PASS

    def test_noise_k_positive_fails(self, noise_spec):
        """Test that (theta - beta)^2 = 0.01 gives drift -k/(2 gamma) at the candidate."""
        report = check_forward_performance(noise_spec)
        assert report.verdict == FAIL
        assert report.statistic["candidate_drift_max"] == pytest.approx(-0.005, abs=1e-10)

    def test_unsupported_families(self, merton_spec):
        """Test that deterministic exponential and power utilities are refused."""
        power = build_scenario("power", utility={"family": "power", "params": {"gamma": 0.5}})
        for spec in (merton_spec, power):
            with pytest.raises(ScenarioError):
                check_forward_performance(spec)

    def test_needs_four_perturbations(self, forward_spec):
        """Test that the strategy set must contain at least four perturbations."""
        with pytest.raises(ScenarioError):
            check_forward_performance(forward_spec, perturbations=(-0.5, 0.5))


class TestOptimalityGap:
    """Test cases for the static-versus-forward utility gap."""

    def test_report_layout(self, forward_spec):
        """Test the reported statistics and the expectation flag."""
        report = check_optimality_gap(forward_spec, expect_gap=True, n_paths=1024)
        logging.info(f"Gap report: {report.statistic}")
        assert set(report.statistic) == {"t", "delta", "se", "u_static", "u_forward"}
        assert report.statistic["t"] == forward_spec.T
        assert report.band["expect_gap"] is True

    def test_needs_state_dependent_exponential(self, merton_spec):
        """Test that other utilities are refused."""
        with pytest.raises(ScenarioError):
            check_optimality_gap(merton_spec)


class TestRunner:
    """Test cases for check selection and report serialization."""

    def test_default_checks(self, consistent_spec, forward_spec, noise_spec, merton_spec, power_spec):
        """Test the checks applicable to each regime."""
        assert default_checks(consistent_spec) == ["consistency", "budget", "martingale", "forward_performance"]
        assert default_checks(forward_spec) == ["forward_performance", "optimality_gap", "martingale"]
        assert default_checks(noise_spec) == ["noise_consistency", "budget", "forward_performance"]
        assert default_checks(merton_spec) == ["consistency", "budget", "martingale"]
        assert default_checks(power_spec) == ["consistency", "power_identity", "budget", "martingale"]

    def test_unknown_check(self, consistent_spec):
        """Test that unknown check names are rejected before anything runs."""
        with pytest.raises(ScenarioError):
            run_checks(consistent_spec, ["martingale", "arbitrage"])

    def test_report_is_json(self, consistent_spec):
        """Test that reports serialize to strict JSON."""
        report = check_consistency(consistent_spec)
        text = json.dumps(report.to_dict(), allow_nan=False)
        doc = json.loads(text)
        assert doc["verdict"] == report.verdict
        assert "details" not in doc
