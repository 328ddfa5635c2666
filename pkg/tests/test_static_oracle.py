"""Tests for the finite-state static optimization oracle."""

import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consistency_mc.exceptions import BracketingError, DomainError, NonInvertibleMarginalError
from consistency_mc.preferences import DetExp, Log, Power
from consistency_mc.static_oracle import (
    FiniteMarket,
    PerStateExp,
    brute_force,
    closed_form_exponential,
    oracle_report,
    parse_oracle_utility,
    solve_lagrangian,
    uniqueness_check,
)
from tests.helpers.env import get_market_dir


logger = logging.getLogger(__name__)

SKEWED = FiniteMarket(p=(0.5, 0.5), q=(0.75, 0.25), x0=0.0)


class TestMarket:
    """Test cases for finite market validation and loading."""

    def test_density(self):
        """Test Y = q / p."""
        np.testing.assert_allclose(SKEWED.density, [1.5, 0.5])

    @pytest.mark.parametrize("p, q", [
        ((0.5, 0.4), (0.5, 0.5)),
        ((1.0, 0.0), (0.5, 0.5)),
        ((0.5, 0.5), (0.2, 0.3, 0.5)),
    ])
    def test_invalid_weights(self, p, q):
        """Test rejection of unnormalized, zero and mismatched weights."""
        with pytest.raises(DomainError):
            FiniteMarket(p=p, q=q, x0=0.0)

    def test_shipped_markets_load(self):
        """Test that every market file in the repository parses."""
        files = sorted(get_market_dir().glob("*.json"))
        assert files
        for path in files:
            market = FiniteMarket.from_json(path)
            logging.info(f"Loaded {path.name}: {market.to_dict()}")

    def test_from_json_string(self):
        """Test parsing an inline JSON document."""
        market = FiniteMarket.from_json('{"p": [0.5, 0.5], "q": [0.75, 0.25]}')
        assert market == SKEWED

    def test_missing_weights(self):
        """Test that a market without q is rejected."""
        with pytest.raises(DomainError):
            FiniteMarket.from_dict({"p": [1.0]})


class TestSolver:
    """Test cases for the Lagrangian solver."""

    def test_exponential_two_states(self):
        """Test xi = (ln Y terms) for gamma = 1, p = (1/2, 1/2), q = (3/4, 1/4), x0 = 0."""
        solution = solve_lagrangian(SKEWED, DetExp(1.0))
        logging.info(f"Solution: {solution.to_dict()}")
        np.testing.assert_allclose(solution.xi, [-0.2746530721670274, 0.8239592165010822], atol=1e-10)
        assert abs(solution.residual) < 1e-10

    def test_power_two_states(self):
        """Test xi = (1/3, 3) for gamma = 1/2 and x0 = 1."""
        solution = solve_lagrangian(SKEWED.shifted(1.0), Power(0.5))
        np.testing.assert_allclose(solution.xi, [1 / 3, 3.0], rtol=1e-10)

    def test_log_is_budget_over_density(self):
        """Test xi_i = x0 / Y_i for log utility."""
        market = SKEWED.shifted(2.0)
        solution = solve_lagrangian(market, Log())
        np.testing.assert_allclose(solution.xi, 2.0 / market.density, rtol=1e-10)

    def test_uniform_market(self):
        """Test that p = q gives the riskless claim xi = x0."""
        market = FiniteMarket(p=(0.5, 0.5), q=(0.5, 0.5), x0=1.0)
        np.testing.assert_allclose(solve_lagrangian(market, DetExp(1.0)).xi, [1.0, 1.0], atol=1e-10)

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 3.0])
    def test_closed_form_matches(self, gamma):
        """Test the exponential closed form against the root-finder."""
        market = FiniteMarket(p=(0.1, 0.2, 0.3, 0.4), q=(0.25, 0.25, 0.25, 0.25), x0=0.5)
        np.testing.assert_allclose(solve_lagrangian(market, DetExp(gamma)).xi,
                                   closed_form_exponential(market, gamma), atol=1e-10)

    def test_per_state_risk_aversion(self):
        """Test the closed form with a risk aversion per state."""
        family = parse_oracle_utility("exponential", [1.0, 2.0])
        assert family == PerStateExp((1.0, 2.0))
        solution = solve_lagrangian(SKEWED, family)
        np.testing.assert_allclose(solution.xi, closed_form_exponential(SKEWED, [1.0, 2.0]), atol=1e-10)

    def test_budget_shift(self):
        """Test that adding c to the budget adds c to every state for exponential utility."""
        base = solve_lagrangian(SKEWED, DetExp(2.0)).xi
        shifted = solve_lagrangian(SKEWED.shifted(0.7), DetExp(2.0)).xi
        np.testing.assert_allclose(shifted - base, 0.7, atol=1e-10)

    def test_power_without_budget(self):
        """Test that power utility with x0 = 0 has no multiplier."""
        with pytest.raises(BracketingError):
            solve_lagrangian(SKEWED, Power(0.5))

    def test_unknown_utility(self):
        """Test that a utility without invertible marginal is refused."""
        with pytest.raises(NonInvertibleMarginalError):
            parse_oracle_utility("quadratic", 1.0)

    def test_power_needs_scalar_gamma(self):
        """Test that power utility takes a single gamma."""
        with pytest.raises(DomainError):
            parse_oracle_utility("power", [0.5, 0.5])


class TestBruteForce:
    """Test cases for the grid search cross-check."""

    def test_agrees_with_solver(self):
        """Test agreement to 1e-4 on the skewed two-state market."""
        result = brute_force(SKEWED, DetExp(1.0), workers=1)
        logging.info(f"Brute force: {result.to_dict()}")
        np.testing.assert_allclose(result.xi, solve_lagrangian(SKEWED, DetExp(1.0)).xi, atol=1e-4)
        assert result.step <= 1e-5

    def test_recentres_outside_window(self):
        """Test that an optimum beyond the initial window is still found."""
        market = FiniteMarket(p=(0.5, 0.5), q=(0.99, 0.01), x0=0.0)
        result = brute_force(market, DetExp(0.3), workers=1)
        np.testing.assert_allclose(result.xi, closed_form_exponential(market, 0.3), atol=1e-4)

    def test_worker_count_does_not_matter(self):
        """Test identical results with one and several workers."""
        market = FiniteMarket(p=(0.1, 0.2, 0.3, 0.4), q=(0.25, 0.25, 0.25, 0.25), x0=0.5)
        a = brute_force(market, DetExp(1.0), workers=1)
        b = brute_force(market, DetExp(1.0), workers=4)
        np.testing.assert_array_equal(a.xi, b.xi)

    def test_too_many_states(self):
        """Test that brute force is limited to six states."""
        market = FiniteMarket.random(np.random.default_rng(0), 7)
        with pytest.raises(DomainError):
            brute_force(market, DetExp(1.0))

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2 ** 32 - 1),
           x0=st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
    def test_random_four_state_markets(self, seed, x0):
        """Test solver, closed form and brute force on random four-state markets with gamma = 2."""
        market = FiniteMarket.random(np.random.default_rng(seed), 4, x0=x0)
        solution = solve_lagrangian(market, DetExp(2.0))
        np.testing.assert_allclose(solution.xi, closed_form_exponential(market, 2.0), atol=1e-10)
        result = brute_force(market, DetExp(2.0), workers=1)
        np.testing.assert_allclose(result.xi, solution.xi, atol=1e-4)
        assert uniqueness_check(market, DetExp(2.0), solution.xi)["strict"]


class TestReport:
    """Test cases for the combined oracle document."""

    def test_report_fields(self):
        """Test that the report carries solver, closed form, brute force and uniqueness."""
        report = oracle_report(SKEWED, DetExp(1.0))
        assert report["closed_form_delta"] < 1e-10
        assert report["brute_force_delta"] < 1e-4
        assert report["uniqueness"]["strict"]
        assert report["uniqueness"]["directions"] == 2

    def test_uniqueness_detects_non_optimum(self):
        """Test that a suboptimal claim is not a strict local maximum."""
        perturbed = uniqueness_check(SKEWED, DetExp(1.0), np.array([0.0, 0.0]))
        assert not perturbed["strict"]
