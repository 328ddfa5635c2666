"""Exception hierarchy for scenario, simulation, estimation and oracle failures."""

from typing import Optional


class ConsistencyError(Exception):
    """Base class for every error raised by the package."""


class ScenarioError(ConsistencyError, ValueError):
    """Invalid experiment configuration."""


class ScenarioParseError(ScenarioError):
    """Malformed scenario document; carries the offending key and line."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        location = []
        if key is not None:
            location.append(f"key '{key}'")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.key = key
        self.line = line


class DomainError(ScenarioError):
    """A value lies outside the range a formula or contract admits."""


class GridAlignmentError(ScenarioError):
    """A requested time does not fall on the simulation grid."""


class MissingChannelError(ConsistencyError, KeyError):
    """A path batch lacks a channel an operation needs."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "missing channel"


class NumericalAbort(ConsistencyError, ArithmeticError):
    """A non-finite value appeared; the whole batch is discarded."""

    def __init__(self, message: str, channel: str, path: int, step: int):
        super().__init__(f"{message}: channel '{channel}' at path {path}, step {step}")
        self.channel = channel
        self.path = path
        self.step = step


class SingularityError(NumericalAbort):
    """The forward-family denominator gamma*V + 1 came too close to zero."""


class AssumptionViolation(ConsistencyError, AssertionError):
    """A closed-form formula was invoked outside the regime it holds in."""


class EstimatorError(ConsistencyError):
    """Base class for Monte Carlo estimator failures."""


class DegenerateSampleError(EstimatorError):
    """Too few samples (or non-finite samples) to form an estimate."""


class WeightError(EstimatorError):
    """Density weights must be strictly positive."""


class StateInsufficiencyError(EstimatorError):
    """A nested target needs state that cannot be rebuilt at the split time."""


class RankDeficiencyError(EstimatorError):
    """The regression design matrix does not have full column rank."""


class OracleError(ConsistencyError):
    """Base class for finite-market oracle failures."""


class BracketingError(OracleError):
    """No sign change of the budget residual was found."""


class NonInvertibleMarginalError(OracleError):
    """The utility family has no closed-form inverse marginal."""
