"""Expression trees of the refinement language and their evaluator.

Values are 64-bit floats, booleans or strings. Integer message fields are
widened to floats before evaluation. Evaluation is strict and left to right;
``and``/``or`` short-circuit. Failures raise :class:`EvalError`, never a
Python arithmetic exception.
"""
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Union

Value = Union[float, bool, str]

ARITHMETIC_OPS = ("+", "-", "*", "/")
ORDERING_OPS = ("<", "<=", ">", ">=")
EQUALITY_OPS = ("==", "!=")
BOOLEAN_OPS = ("and", "or")

# state fields mirrored from telemetry rather than from accepted commands
TELEMETRY_FIELDS = ("armed", "flight_mode", "altitude_m", "climb_rate_mps")


class EvalError(ArithmeticError):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


def is_number(value) -> bool:
    return isinstance(value, float) and not isinstance(value, bool)


def type_name(value: Value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, str):
        return "str"
    return "num"


@dataclass
class Bindings:
    """Everything an expression may refer to while a message is attested."""

    fields: Mapping[str, Value] = field(default_factory=dict)
    binders: Mapping[str, Value] = field(default_factory=dict)
    consts: Mapping[str, float] = field(default_factory=dict)
    state: Optional[Callable[[str], Value]] = None
    iteration: Optional[Mapping[str, float]] = None
    modes: Mapping[str, int] = field(default_factory=dict)

    def lookup(self, scope: str, name: str) -> Value:
        if scope == "msg":
            table = self.fields
        elif scope == "name":
            if name in self.binders:
                return self.binders[name]
            table = self.consts
        elif scope == "state":
            if self.state is None:
                raise EvalError("unbound name", f"state.{name}")
            return self.state(name)
        elif scope == "iter":
            table = self.iteration or {}
        elif scope == "mode":
            if name not in self.modes:
                raise EvalError("unbound name", f"mode.{name}")
            return float(self.modes[name])
        else:
            raise EvalError("unbound name", f"{scope}.{name}")
        if name not in table:
            raise EvalError("unbound name", name if scope == "name" else f"{scope}.{name}")
        return table[name]


class Expr:
    def evaluate(self, env: Bindings) -> Value:
        raise NotImplementedError

    def references(self):
        """Yield every :class:`Ref` in the tree."""
        return iter(())


@dataclass(frozen=True)
class Literal(Expr):
    value: Value
    column: int = field(default=0, compare=False)

    def evaluate(self, env: Bindings) -> Value:
        return self.value


@dataclass(frozen=True)
class Ref(Expr):
    """``msg.FIELD``, ``state.NAME``, ``iter.NAME``, ``mode.NAME`` or a bare name."""

    scope: str
    name: str
    column: int = field(default=0, compare=False)

    def evaluate(self, env: Bindings) -> Value:
        return env.lookup(self.scope, self.name)

    def references(self):
        yield self

    @property
    def text(self) -> str:
        return self.name if self.scope == "name" else f"{self.scope}.{self.name}"


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr
    column: int = field(default=0, compare=False)

    def evaluate(self, env: Bindings) -> Value:
        value = self.operand.evaluate(env)
        if self.op == "-":
            if not is_number(value):
                raise EvalError("type mismatch", f"cannot negate {type_name(value)}")
            return -value
        if not isinstance(value, bool):
            raise EvalError("type mismatch", f"'not' needs bool, got {type_name(value)}")
        return not value

    def references(self):
        return self.operand.references()


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr
    column: int = field(default=0, compare=False)

    def evaluate(self, env: Bindings) -> Value:
        op = self.op
        if op in BOOLEAN_OPS:
            left = self.left.evaluate(env)
            if not isinstance(left, bool):
                raise EvalError("type mismatch", f"'{op}' needs bool, got {type_name(left)}")
            if (op == "and" and not left) or (op == "or" and left):
                return left
            right = self.right.evaluate(env)
            if not isinstance(right, bool):
                raise EvalError("type mismatch", f"'{op}' needs bool, got {type_name(right)}")
            return right

        left = self.left.evaluate(env)
        right = self.right.evaluate(env)
        if op in EQUALITY_OPS:
            if type_name(left) != type_name(right):
                raise EvalError("type mismatch", f"comparing {type_name(left)} to {type_name(right)}")
            return (left == right) if op == "==" else (left != right)
        if not (is_number(left) and is_number(right)):
            raise EvalError("type mismatch", f"'{op}' on {type_name(left)} and {type_name(right)}")
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        if op == "/":
            if right == 0.0:
                raise EvalError("division by zero")
            return left / right
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        if op == ">=":
            return left >= right
        raise EvalError("unknown operator", op)

    def references(self):
        yield from self.left.references()
        yield from self.right.references()


def eval_expr(
    expr: Expr,
    msg_bindings: Mapping[str, Value],
    state: Optional[Callable[[str], Value]] = None,
    iter_bindings: Optional[Mapping[str, float]] = None,
    consts: Optional[Mapping[str, float]] = None,
    binders: Optional[Mapping[str, Value]] = None,
    modes: Optional[Mapping[str, int]] = None,
) -> Value:
    env = Bindings(
        fields=msg_bindings,
        binders=binders or {},
        consts=consts or {},
        state=state,
        iteration=iter_bindings,
        modes=modes or {},
    )
    return expr.evaluate(env)


def uses_telemetry(expr: Expr) -> bool:
    return any(ref.scope == "state" and ref.name in TELEMETRY_FIELDS for ref in expr.references())


def format_number(value: float) -> str:
    if math.isfinite(value) and value == int(value) and abs(value) < 1e16:
        return f"{value:.1f}"
    return repr(value)


def format_expr(expr: Expr) -> str:
    """Render an expression in the surface syntax, parenthesising every binary node."""
    if isinstance(expr, Literal):
        if isinstance(expr.value, bool):
            return "true" if expr.value else "false"
        if isinstance(expr.value, str):
            return json.dumps(expr.value)
        return format_number(expr.value)
    if isinstance(expr, Ref):
        return expr.text
    if isinstance(expr, Unary):
        operand = format_expr(expr.operand)
        return f"-{operand}" if expr.op == "-" else f"(not {operand})"
    if isinstance(expr, Binary):
        return f"({format_expr(expr.left)} {expr.op} {format_expr(expr.right)})"
    raise TypeError(f"not an expression: {expr!r}")


def widen(value) -> Value:
    """Widen wire values to expression values (ints become floats)."""
    if isinstance(value, (bool, str)):
        return value
    return float(value)


def message_fields(msg) -> Dict[str, Value]:
    return {name: widen(getattr(msg, name)) for name in msg.field_names()}
