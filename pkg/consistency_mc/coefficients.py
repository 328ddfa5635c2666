"""Coefficient processes: constants, functions of time, and bounded functions of (t, w).

Expressions use a small arithmetic grammar over the names ``t`` (time), ``w``
(current Brownian value) and, for risk-aversion and noise coefficients,
``theta`` (the derived market price of risk). Allowed operations are ``+``,
``-``, ``*``, ``/`` and the functions ``exp``, ``tanh``, ``sin``, ``min``,
``max`` and ``clamp(x, lo, hi)``. Evaluation is vectorised with numpy.
"""

from __future__ import annotations

import ast
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, Optional, Union

import numpy as np

from .exceptions import DomainError, ScenarioParseError


logger = logging.getLogger(__name__)

CONSTANT = "constant"
TIME_FN = "time_fn"
STATE_FN = "state_fn"

_FUNCTIONS: Dict[str, Callable[..., Any]] = {
    "exp": np.exp,
    "tanh": np.tanh,
    "sin": np.sin,
    "min": np.minimum,
    "max": np.maximum,
    "clamp": np.clip,
}
_ARITY = {"exp": 1, "tanh": 1, "sin": 1, "min": 2, "max": 2, "clamp": 3}
_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div)
_UNARYOPS = (ast.UAdd, ast.USub)


class Expression:
    """A validated, compiled expression in the coefficient grammar."""

    def __init__(self, source: str, allowed_names: FrozenSet[str], key: Optional[str] = None):
        self.source = source
        self.key = key
        try:
            tree = ast.parse(source.strip(), mode="eval")
        except SyntaxError as e:
            raise ScenarioParseError(f"Invalid expression '{source}': {e.msg}", key=key) from e
        names: set = set()
        self._validate(tree.body, allowed_names, names)
        self.symbols: FrozenSet[str] = frozenset(names)
        self._code = compile(tree, f"<coefficient {key or source}>", "eval")

    def _validate(self, node: ast.AST, allowed: FrozenSet[str], names: set) -> None:
        if isinstance(node, ast.BinOp) and isinstance(node.op, _BINOPS):
            self._validate(node.left, allowed, names)
            self._validate(node.right, allowed, names)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _UNARYOPS):
            self._validate(node.operand, allowed, names)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
                and not isinstance(node.value, bool):
            return
        elif isinstance(node, ast.Name):
            if node.id not in allowed:
                raise ScenarioParseError(
                    f"Unknown name '{node.id}' in expression '{self.source}'", key=self.key)
            names.add(node.id)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            fname = node.func.id
            if fname not in _FUNCTIONS:
                raise ScenarioParseError(
                    f"Unknown function '{fname}' in expression '{self.source}'", key=self.key)
            if node.keywords or len(node.args) != _ARITY[fname]:
                raise ScenarioParseError(
                    f"Function '{fname}' takes {_ARITY[fname]} positional argument(s)", key=self.key)
            for arg in node.args:
                self._validate(arg, allowed, names)
        else:
            raise ScenarioParseError(
                f"Unsupported construct '{type(node).__name__}' in expression '{self.source}'",
                key=self.key)

    def __call__(self, **env: Any) -> Any:
        scope = dict(_FUNCTIONS)
        scope.update(env)
        return eval(self._code, {"__builtins__": {}}, scope)

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


@dataclass(frozen=True)
class CoefficientFn:
    """A bounded coefficient process evaluated at (t, w).

    ``value`` is set for constants, ``expr`` for expressions. ``bound`` is the
    constant K with |coefficient| <= K on [0, T].
    """

    form: str
    bound: float
    value: Optional[float] = None
    expr: Optional[str] = None
    _compiled: Optional[Expression] = field(default=None, compare=False, repr=False)

    @classmethod
    def constant(cls, value: float, bound: Optional[float] = None) -> "CoefficientFn":
        value = float(value)
        if bound is None:
            bound = abs(value) if value != 0.0 else 1.0
        return cls(form=CONSTANT, bound=float(bound), value=value)

    @classmethod
    def expression(cls, source: str, bound: float, allow_theta: bool = False,
                   key: Optional[str] = None) -> "CoefficientFn":
        allowed = frozenset({"t", "w", "theta"} if allow_theta else {"t", "w"})
        compiled = Expression(source, allowed, key=key)
        form = TIME_FN if compiled.symbols <= {"t"} else STATE_FN
        coef = cls(form=form, bound=float(bound), expr=source, _compiled=compiled)
        if not np.isfinite(coef.bound) or coef.bound <= 0:
            raise DomainError(f"Coefficient bound must be positive and finite, got {bound} ({key})")
        return coef

    @property
    def uses_theta(self) -> bool:
        return self._compiled is not None and "theta" in self._compiled.symbols

    def evaluate(self, t: Union[float, np.ndarray], w: Union[float, np.ndarray],
                 theta: Optional[Union[float, np.ndarray]] = None) -> np.ndarray:
        """Evaluate on broadcast (t, w[, theta]) and return a float array."""
        t_arr = np.asarray(t, dtype=float)
        w_arr = np.asarray(w, dtype=float)
        shape = np.broadcast(t_arr, w_arr).shape
        if theta is not None:
            shape = np.broadcast_shapes(shape, np.shape(theta))
        if self.form == CONSTANT:
            return np.full(shape, self.value, dtype=float)
        if self.uses_theta and theta is None:
            raise DomainError(f"Coefficient '{self.expr}' references theta but none was supplied")
        env: Dict[str, Any] = {"t": t_arr, "w": w_arr}
        if theta is not None:
            env["theta"] = np.asarray(theta, dtype=float)
        with np.errstate(all="ignore"):
            result = self._compiled(**env)
        return np.array(np.broadcast_to(np.asarray(result, dtype=float), shape))

    def to_document(self) -> Union[float, Dict[str, Any]]:
        """Serialize back to the scenario document form."""
        if self.form == CONSTANT:
            default_bound = abs(self.value) if self.value != 0.0 else 1.0
            if self.bound == default_bound:
                return self.value
            return {"value": self.value, "bound": self.bound}
        return {"expr": self.expr, "bound": self.bound}


def parse_coefficient(raw: Any, key: str, allow_theta: bool = False) -> CoefficientFn:
    """Build a CoefficientFn from a document value (number or {expr, bound})."""
    if isinstance(raw, bool):
        raise ScenarioParseError("Coefficient must be a number or an expression object", key=key)
    if isinstance(raw, (int, float)):
        return CoefficientFn.constant(raw)
    if isinstance(raw, dict):
        if "value" in raw:
            return CoefficientFn.constant(raw["value"], raw.get("bound"))
        if "expr" not in raw:
            raise ScenarioParseError("Expression coefficient needs an 'expr' field", key=key)
        if "bound" not in raw:
            raise ScenarioParseError("Expression coefficient needs an explicit 'bound' field", key=key)
        bound = raw["bound"]
        if isinstance(bound, bool) or not isinstance(bound, (int, float)):
            raise ScenarioParseError("Coefficient 'bound' must be a number", key=key)
        return CoefficientFn.expression(str(raw["expr"]), float(bound), allow_theta=allow_theta, key=key)
    if isinstance(raw, str):
        raise ScenarioParseError(
            "String expressions must be given as {\"expr\": ..., \"bound\": ...}", key=key)
    raise ScenarioParseError(f"Unsupported coefficient value {raw!r}", key=key)
