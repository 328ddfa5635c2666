"""Tests for closed-form optima, replication rules and the forward-performance family."""

import logging

import numpy as np
import pytest

from consistency_mc.exceptions import (
    AssumptionViolation,
    DomainError,
    GridAlignmentError,
    MissingChannelError,
    ScenarioError,
    SingularityError,
)
from consistency_mc.paths import simulate_brownian
from consistency_mc.preferences import StateDepExp, utility_value
from consistency_mc.strategies import (
    ConsistentExpModel,
    GeneralExpModel,
    LogModel,
    MertonModel,
    NoiseModel,
    PowerModel,
    consistent_optimal_exposure,
    consistent_optimal_wealth,
    convergence_study,
    estimate_constants,
    forward_drift,
    forward_family_simulate,
    forward_rule,
    noise_drift,
    noise_strategy,
    replication_errors,
    simulate_scenario,
    wealth_model,
)
from tests.helpers.scenarios import build_scenario
from tests.helpers.stats import assert_within_band


logger = logging.getLogger(__name__)


class TestClosedForms:
    """Test cases for horizon-wise optimal wealth."""

    def test_consistent_utility_identity(self, consistent_spec):
        """Test u_t(xi*_t) = -(1/gamma_t) Z_t exp(-gamma0 x) pathwise."""
        batch = consistent_optimal_wealth(consistent_spec, simulate_scenario(consistent_spec, n_paths=256))
        gi = batch.channel("gamma_inv")
        u = utility_value(StateDepExp(), batch.channel("xi_star"), gamma_inv=gi)
        expected = -gi * np.exp(batch.logZ) * np.exp(-consistent_spec.gamma0 * consistent_spec.x0)
        np.testing.assert_allclose(u, expected, rtol=1e-12)

    def test_consistent_form_needs_pair(self, beta_zero_spec):
        """Test that the consistent closed form refuses beta = 0."""
        with pytest.raises(AssumptionViolation):
            ConsistentExpModel(beta_zero_spec)

    def test_consistent_exposure(self, consistent_spec):
        """Test e = -(theta/2) xi* - theta/gamma and the proportion view."""
        batch = consistent_optimal_wealth(consistent_spec, simulate_scenario(consistent_spec, n_paths=16))
        batch = consistent_optimal_exposure(consistent_spec, batch)
        theta, xi = batch.theta, batch.channel("xi_star")
        np.testing.assert_allclose(batch.channel("exposure"), -0.5 * theta * xi - theta * batch.channel("gamma_inv"))
        alpha = batch.channel("alpha")
        ok = np.isfinite(alpha)
        np.testing.assert_allclose((alpha * batch.channel("sigma") * xi)[ok], batch.channel("exposure")[ok])

    def test_constant_theta_constants(self, merton_spec):
        """Test E_P[Z_T] = 1 and E_Q[ln Z_T] = theta^2 T / 2 for theta = -0.2."""
        constants = estimate_constants(merton_spec, n_paths=8192)
        logging.info(f"Constants at T: {constants.to_dict([merton_spec.grid.n_steps])}")
        assert_within_band(constants.value("ep_Z", -1), constants.se("ep_Z", -1), 1.0, label="E_P[Z_T]")
        assert_within_band(constants.value("eq_logZ", -1), constants.se("eq_logZ", -1), 0.02, label="E_Q[ln Z_T]")
        assert constants.value("ep_Z", 0) == 1.0

    def test_log_optimum(self):
        """Test xi*_t = x / Z_t."""
        spec = build_scenario("log", utility={"family": "log", "params": {}}, sim={"x0": 2.0})
        batch = LogModel(spec).fill(simulate_scenario(spec, n_paths=8))
        np.testing.assert_allclose(batch.channel("xi_star"), 2.0 * np.exp(-batch.logZ))

    def test_power_needs_positive_wealth(self):
        """Test that power utility with x0 <= 0 is a domain error."""
        with pytest.raises(DomainError):
            spec = build_scenario("power_zero", utility={"family": "power", "params": {"gamma": 0.5}},
                                  sim={"x0": 0.0})
            PowerModel(spec)

    def test_power_budget(self):
        """Test E_Q[xi*_T] = x for the power optimum."""
        spec = build_scenario("power", utility={"family": "power", "params": {"gamma": 0.5}})
        model = PowerModel(spec)
        batch = model.fill(simulate_scenario(spec, n_paths=8192))
        q = np.exp(batch.logZ[:, -1]) * batch.channel("xi_star")[:, -1]
        se = np.hypot(q.std(ddof=1) / np.sqrt(q.size), model.budget_se(spec.grid.n_steps))
        assert_within_band(q.mean(), se, spec.x0, label="E_Q[xi*_T]")

    def test_model_selection(self, consistent_spec, beta_zero_spec, merton_spec, forward_spec, noise_spec):
        """Test that each utility regime maps to its optimum."""
        assert isinstance(wealth_model(consistent_spec), ConsistentExpModel)
        assert isinstance(wealth_model(beta_zero_spec), GeneralExpModel)
        assert isinstance(wealth_model(merton_spec), MertonModel)
        assert isinstance(wealth_model(noise_spec), NoiseModel)
        with pytest.raises(ScenarioError):
            wealth_model(forward_spec)


class TestReplication:
    """Test cases for replicating optimal wealth by trading."""

    def test_merton_replicates_exactly(self, merton_spec):
        """Test that constant exposure -theta/gamma reproduces xi*_T up to the constant's error."""
        model = MertonModel(merton_spec)
        errors = replication_errors(merton_spec, simulate_scenario(merton_spec, n_paths=256), model)
        se = model.constants.se("eq_logZ", -1)
        logging.info(f"Replication error spread {np.ptp(errors):.3g}, constant se {se:.3g}")
        assert np.ptp(errors) < 1e-10
        assert np.abs(errors).max() <= 4 * se + 1e-12

    def test_consistent_convergence(self, consistent_spec):
        """Test that the replication error shrinks as the step size falls."""
        rows, order = convergence_study(consistent_spec, [1 / 8, 1 / 16, 1 / 32], n_paths=1024)
        logging.info(f"Convergence rows: {[r.to_dict() for r in rows]}, order {order}")
        assert [r.n_steps for r in rows] == [8, 16, 32]
        assert rows[0].rms_error > rows[-1].rms_error
        assert order > 0.25

    def test_zero_strategy_has_no_order(self, consistent_spec):
        """Test that the zero-exposure baseline reports no convergence order."""
        rows, order = convergence_study(consistent_spec, [1 / 8, 1 / 16, 1 / 32], strategy="zero",
                                        n_paths=256)
        assert order is None
        assert all(r.rms_error > 0 for r in rows)

    @pytest.mark.parametrize("ladder", [[1 / 32], [1 / 16, 1 / 32], [1 / 16, 1 / 16, 1 / 32]])
    def test_ladder_too_short(self, consistent_spec, ladder):
        """Test that fewer than three distinct step sizes are refused before any simulation."""
        with pytest.raises(ScenarioError):
            convergence_study(consistent_spec, ladder)

    def test_ladder_must_nest(self, consistent_spec):
        """Test that coarse steps must be multiples of the finest one."""
        with pytest.raises(GridAlignmentError):
            convergence_study(consistent_spec, [1 / 8, 1 / 12, 1 / 16], n_paths=16)


class TestForwardFamily:
    """Test cases for the forward-performance family."""

    def test_initial_state(self, forward_spec):
        """Test V*_0 = x0 and 1/gamma_0 = 1/gamma0."""
        batch = simulate_scenario(forward_spec, n_paths=64)
        assert np.all(batch.channel("V_star")[:, 0] == forward_spec.x0)
        assert np.all(batch.channel("gamma_inv")[:, 0] == 1.0 / forward_spec.gamma0)

    def test_eta_star_relation(self, forward_spec):
        """Test eta* = theta (theta + 2 beta) / (2 (gamma V* + 1)) on every step."""
        batch = simulate_scenario(forward_spec, n_paths=64)
        gi, V, theta = batch.channel("gamma_inv"), batch.channel("V_star"), batch.theta
        expected = theta * (theta + 0.2) / (2.0 * (V / gi + 1.0))
        np.testing.assert_allclose(batch.channel("eta_star"), expected, rtol=1e-12)

    def test_drift_vanishes_at_optimum(self, forward_spec):
        """Test that the drift bracket is zero at e* and non-negative elsewhere."""
        batch = simulate_scenario(forward_spec, n_paths=64)
        gi, V, theta = batch.channel("gamma_inv"), batch.channel("V_star"), batch.theta
        beta, eta = batch.channel("beta"), batch.channel("eta_star")
        e_star = batch.channel("exposure_star")
        np.testing.assert_allclose(forward_drift(gi, V, e_star, theta, beta, eta), 0.0, atol=1e-10)
        for delta in (-0.5, 0.25):
            assert np.all(forward_drift(gi, V, e_star + delta * V, theta, beta, eta) >= -1e-12)

    def test_eta_zero_needs_half_theta(self):
        """Test that with eta = 0 the bracket at e* vanishes only for beta = -theta/2."""
        theta = np.array([-0.2, -0.3])
        gi = np.ones(2)
        V = np.ones(2)
        zero = np.zeros(2)
        for beta, vanishes in ((-theta / 2, True), (zero, False)):
            f = forward_drift(gi, V, V * beta - theta * gi, theta, beta, zero)
            assert np.allclose(f, 0.0, atol=1e-15) == vanishes

    def test_singular_denominator(self):
        """Test abort when gamma V* + 1 reaches zero."""
        spec = build_scenario("singular", risk={"eta": "forward", "beta": 0.1}, sim={"x0": -1.0})
        with pytest.raises(SingularityError) as exc:
            simulate_scenario(spec, n_paths=4)
        assert exc.value.step == 0

    def test_forward_rule_families(self, consistent_spec):
        """Test that the drift-minimising rule exists only for exponential families."""
        assert forward_rule(consistent_spec).name == "forward_exp"
        log_spec = build_scenario("log", utility={"family": "log", "params": {}})
        with pytest.raises(ScenarioError):
            forward_rule(log_spec)

    def test_refuses_missing_market(self, forward_spec):
        """Test that the joint simulation needs the market channels."""
        with pytest.raises(MissingChannelError):
            forward_family_simulate(forward_spec, simulate_brownian(forward_spec.grid, 4, seed=1))


class TestNoiseStrategy:
    """Test cases for the multiplicative-noise optimum."""

    def test_exposure(self, noise_spec):
        """Test e = (beta - theta)/gamma = -0.1 for beta = theta - 0.1."""
        batch = noise_strategy(noise_spec, simulate_scenario(noise_spec, n_paths=64))
        np.testing.assert_allclose(batch.channel("exposure"), -0.1, atol=1e-12)

    def test_explicit_k(self, noise_spec):
        """Test agreement with a supplied k(t) and rejection of a wrong one."""
        batch = simulate_scenario(noise_spec, n_paths=16)
        noise_strategy(noise_spec, batch, k=lambda t: 0.01)
        with pytest.raises(AssumptionViolation):
            noise_strategy(noise_spec, batch, k=lambda t: 0.02)

    def test_stochastic_gap_rejected(self):
        """Test that beta = 0 under stochastic theta fails the deterministic-k condition."""
        spec = build_scenario("noise_beta_zero", utility={"family": "mult_noise", "params": {"beta": 0.0}})
        with pytest.raises(AssumptionViolation):
            noise_strategy(spec, simulate_scenario(spec, n_paths=16))

    def test_noise_drift_at_optimum(self):
        """Test g(e*) = -k/(2 gamma) with k = (theta - beta)^2."""
        theta = np.array([-0.2, -0.25])
        beta = theta - 0.1
        e_star = (beta - theta) / 2.0
        np.testing.assert_allclose(noise_drift(2.0, e_star, theta, beta), -0.01 / 4.0)
