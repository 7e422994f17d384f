"""The protocol-refinement language: parser, static validator and printer.

A spec is line oriented::

    const m1 = 10
    param MC_PITCH_P default 6.5 min 0 max 12
    rule pitchrate: on PARAM_SET(param_id="MC_PITCHRATE_MAX", param_value->n)
        require n <= (m1 * state.MC_PITCH_P) else "pitch rate too high"
    rule parachute: on COMMAND_LONG(command=208, param1->action)
        when action == 2:
            require state.armed else "not armed"
        otherwise:
    iter mission: on MISSION_COUNT(count->N) expect MISSION_ITEM_INT(seq->i)
        require msg.frame != 2

Declarations start in column one; ``when``/``otherwise``/``require`` lines are
indented under the rule or iteration they belong to. Expressions and message
patterns are parsed with lark.
"""
import ast
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import lark
from pydantic import BaseModel, Field

from mavguard.expressions import (
    BOOLEAN_OPS,
    EQUALITY_OPS,
    ORDERING_OPS,
    Binary,
    Expr,
    Literal,
    Ref,
    Unary,
    Value,
    format_expr,
    format_number,
    uses_telemetry,
    widen,
)
from mavguard.messages import MESSAGES_BY_NAME, MavMessage
from mavguard.utils import get_flight_modes, resolve_spec_path

logger = logging.getLogger("mavguard")

GRAMMAR = r"""
?expr: or_test

?or_test: or_test "or" and_test -> or_
        | and_test

?and_test: and_test "and" not_test -> and_
         | not_test

?not_test: "not" not_test -> not_
         | comparison

?comparison: arith "<" arith -> lt
           | arith "<=" arith -> le
           | arith ">" arith -> gt
           | arith ">=" arith -> ge
           | arith "==" arith -> eq
           | arith "!=" arith -> ne
           | arith

?arith: arith "+" term -> add
      | arith "-" term -> sub
      | term

?term: term "*" factor -> mul
     | term "/" factor -> div
     | factor

?factor: "-" factor -> neg
       | atom

?atom: NUMBER -> number
     | ESCAPED_STRING -> string
     | "true" -> true
     | "false" -> false
     | REF -> ref
     | NAME -> name
     | "(" expr ")"

pattern: NAME "(" [field_pattern ("," field_pattern)*] ")"

?field_pattern: NAME "=" literal -> constrain
              | NAME "->" NAME -> bind

?literal: NUMBER -> number
        | "-" NUMBER -> negative_number
        | ESCAPED_STRING -> string
        | "true" -> true
        | "false" -> false

REF.2: /(msg|state|iter|mode)\.[A-Za-z_][A-Za-z0-9_]*/

%import common.NUMBER
%import common.ESCAPED_STRING
%import common.CNAME -> NAME
%import common.WS
%ignore WS
"""

ITER_FIELDS = ("index", "count", "received")
BUILTIN_STATE_TYPES = {"armed": "bool", "flight_mode": "num", "altitude_m": "num", "climb_rate_mps": "num"}


class Diagnostic(BaseModel):
    """A problem found while parsing or validating a spec."""

    line: int = Field(0, description="1-based line number, 0 if not tied to a line.")
    column: int = Field(0, description="1-based column, 0 if unknown.")
    message: str = Field(..., description="Human readable description.")
    severity: str = Field("error", description="Only errors are produced today.")

    def __str__(self) -> str:
        if self.line:
            return f"{self.line}:{self.column}: {self.message}"
        return self.message


class SpecError(ValueError):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class StateDecl:
    name: str
    default: float
    min: Optional[float] = None
    max: Optional[float] = None
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class MsgPattern:
    """A message type plus field equalities (``field=value``) and binders (``field->name``)."""

    message: str
    constraints: Tuple[Tuple[str, Value], ...] = ()
    binders: Tuple[Tuple[str, str], ...] = ()
    line: int = field(default=0, compare=False)
    column: int = field(default=0, compare=False)

    def match(self, msg: MavMessage) -> Optional[Dict[str, Value]]:
        """Return the binder values if ``msg`` matches, else ``None``."""
        if msg.NAME != self.message:
            return None
        for name, expected in self.constraints:
            if widen(getattr(msg, name)) != expected:
                return None
        return {binder: widen(getattr(msg, name)) for name, binder in self.binders}


@dataclass(frozen=True)
class Requirement:
    expr: Expr
    reason: Optional[str] = None
    line: int = field(default=0, compare=False)

    @property
    def uses_telemetry(self) -> bool:
        return uses_telemetry(self.expr)


@dataclass(frozen=True)
class Branch:
    """One arm of a constrained choice; ``guard`` of ``None`` always holds."""

    guard: Optional[Expr]
    requirements: Tuple[Requirement, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Rule:
    name: str
    trigger: MsgPattern
    branches: Tuple[Branch, ...]
    line: int = field(default=0, compare=False)

    @property
    def uses_telemetry(self) -> bool:
        """True if any guard or requirement reads telemetry-derived state."""
        for branch in self.branches:
            if branch.guard is not None and uses_telemetry(branch.guard):
                return True
            if any(r.uses_telemetry for r in branch.requirements):
                return True
        return False


@dataclass(frozen=True)
class IterationDecl:
    """A bounded iteration: the open message announces how many items follow.

    The first binder of ``open_pattern`` is the count; the first binder of
    ``item_pattern`` is the item index.
    """

    name: str
    open_pattern: MsgPattern
    item_pattern: MsgPattern
    item_requirements: Tuple[Requirement, ...] = ()
    line: int = field(default=0, compare=False)

    @property
    def count_field(self) -> str:
        return self.open_pattern.binders[0][0]

    @property
    def index_field(self) -> str:
        return self.item_pattern.binders[0][0]


@dataclass(frozen=True)
class ProtocolSpec:
    consts: Tuple[Tuple[str, float], ...] = ()
    state_decls: Tuple[StateDecl, ...] = ()
    rules: Tuple[Rule, ...] = ()
    iterations: Tuple[IterationDecl, ...] = ()

    @property
    def const_values(self) -> Dict[str, float]:
        return dict(self.consts)

    def rules_for(self, message: str) -> List[Rule]:
        return [r for r in self.rules if r.trigger.message == message]

    def state_decl(self, name: str) -> Optional[StateDecl]:
        for decl in self.state_decls:
            if decl.name == name:
                return decl
        return None


EMPTY_SPEC = ProtocolSpec()


@lark.v_args(inline=True)
class _ToAst(lark.Transformer):
    def __init__(self):
        super().__init__()
        self.offset = 0
        self.line = 0

    def _col(self, token) -> int:
        return self.offset + getattr(token, "column", 1)

    def number(self, tok):
        return Literal(_finite(str(tok), self.line, self._col(tok)), column=self._col(tok))

    def negative_number(self, tok):
        return Literal(-_finite(str(tok), self.line, self._col(tok)), column=self._col(tok))

    def string(self, tok):
        return Literal(ast.literal_eval(str(tok)), column=self._col(tok))

    def true(self):
        return Literal(True)

    def false(self):
        return Literal(False)

    def ref(self, tok):
        scope, name = str(tok).split(".", 1)
        return Ref(scope, name, column=self._col(tok))

    def name(self, tok):
        return Ref("name", str(tok), column=self._col(tok))

    def neg(self, operand):
        if isinstance(operand, Literal) and isinstance(operand.value, float):
            return Literal(-operand.value, column=operand.column)
        return Unary("-", operand, column=operand.column)

    def not_(self, operand):
        return Unary("not", operand, column=operand.column)

    def _binary(op):
        def build(self, left, right):
            return Binary(op, left, right, column=left.column)

        return build

    or_ = _binary("or")
    and_ = _binary("and")
    lt = _binary("<")
    le = _binary("<=")
    gt = _binary(">")
    ge = _binary(">=")
    eq = _binary("==")
    ne = _binary("!=")
    add = _binary("+")
    sub = _binary("-")
    mul = _binary("*")
    div = _binary("/")

    def constrain(self, name, literal):
        return ("=", str(name), literal.value)

    def bind(self, name, binder):
        return ("->", str(name), str(binder))

    def pattern(self, name, *fields):
        fields = [f for f in fields if f is not None]
        return MsgPattern(
            message=str(name),
            constraints=tuple((f[1], f[2]) for f in fields if f[0] == "="),
            binders=tuple((f[1], f[2]) for f in fields if f[0] == "->"),
            column=self._col(name),
        )


_parser = lark.Lark(GRAMMAR, start=["expr", "pattern"], parser="lalr")


def _parse_fragment(text: str, start: str, line: int, offset: int):
    """Parse an expression or pattern that begins at column ``offset + 1`` of ``line``."""
    try:
        tree = _parser.parse(text, start=start)
    except lark.exceptions.UnexpectedInput as e:
        column = offset + max(getattr(e, "column", 1) or 1, 1)
        if isinstance(e, lark.exceptions.UnexpectedEOF):
            column = offset + len(text) + 1
        raise SpecError([Diagnostic(line=line, column=column, message=f"syntax error in {start}: {_short(e)}")])
    transformer = _ToAst()
    transformer.offset = offset
    transformer.line = line
    try:
        return transformer.transform(tree)
    except lark.exceptions.VisitError as e:
        if isinstance(e.orig_exc, SpecError):
            raise e.orig_exc from None
        raise


def _finite(text: str, line: int, column: int) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise SpecError([Diagnostic(line=line, column=column, message=f"number out of range: {text}")])
    return value


def _short(error: Exception) -> str:
    return str(error).strip().splitlines()[0]


def parse_expr(text: str) -> Expr:
    return _parse_fragment(text, "expr", line=1, offset=0)


_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_PARAM_RE = re.compile(
    rf"^param\s+(?P<name>{_NAME})\s+default\s+(?P<default>{_NUM})"
    rf"(?:\s+min\s+(?P<min>{_NUM}))?(?:\s+max\s+(?P<max>{_NUM}))?\s*$"
)
_CONST_RE = re.compile(rf"^const\s+(?P<name>{_NAME})\s*=\s*(?P<value>{_NUM})\s*$")
_RULE_RE = re.compile(rf"^rule\s+(?P<name>{_NAME})\s*:\s*on\s+(?P<pattern>.+?)\s*$")
_ITER_RE = re.compile(rf"^iter\s+(?P<name>{_NAME})\s*:\s*on\s+(?P<open>.+?)\s+expect\s+(?P<item>.+?)\s*$")
_WHEN_RE = re.compile(r"^when\s+(?P<guard>.+?)\s*:\s*$")
_OTHERWISE_RE = re.compile(r"^otherwise\s*:\s*$")
_REQUIRE_RE = re.compile(r'^require\s+(?P<expr>.+?)(?:\s+else\s+(?P<reason>"(?:[^"\\]|\\.)*"))?\s*$')


def _strip_comment(line: str) -> str:
    in_string = False
    escaped = False
    for i, ch in enumerate(line):
        if escaped:
            escaped = False
        elif ch == "\\" and in_string:
            escaped = True
        elif ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return line[:i]
    return line


class _RuleBuilder:
    def __init__(self, name: str, trigger: MsgPattern, line: int):
        self.name = name
        self.trigger = trigger
        self.line = line
        self.unconditional: List[Requirement] = []
        self.branches: List[Tuple[Optional[Expr], List[Requirement], int]] = []

    def build(self) -> Rule:
        if self.branches:
            branches = tuple(Branch(g, tuple(reqs), line) for g, reqs, line in self.branches)
        else:
            branches = (Branch(None, tuple(self.unconditional), self.line),)
        return Rule(self.name, self.trigger, branches, self.line)


class _IterBuilder:
    def __init__(self, name: str, open_pattern: MsgPattern, item_pattern: MsgPattern, line: int):
        self.name = name
        self.open_pattern = open_pattern
        self.item_pattern = item_pattern
        self.line = line
        self.requirements: List[Requirement] = []

    def build(self) -> IterationDecl:
        return IterationDecl(self.name, self.open_pattern, self.item_pattern, tuple(self.requirements), self.line)


def _with_line(pattern: MsgPattern, line: int) -> MsgPattern:
    return MsgPattern(pattern.message, pattern.constraints, pattern.binders, line=line, column=pattern.column)


def parse_spec(text: str, defines: Optional[Mapping[str, float]] = None, validate: bool = True) -> ProtocolSpec:
    """Parse (and by default validate) a spec document.

    ``defines`` override or add ``const`` values. Raises :class:`SpecError`
    carrying every diagnostic found.
    """
    diagnostics: List[Diagnostic] = []
    consts: Dict[str, float] = {}
    state_decls: List[StateDecl] = []
    finished: List[object] = []
    current = None

    def close_current():
        nonlocal current
        if current is not None:
            finished.append(current.build())
        current = None

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).rstrip()
        if not line.strip():
            continue
        indented = line[0].isspace()
        body = line.strip()
        indent = len(line) - len(line.lstrip())
        try:
            if not indented:
                close_current()
                if body.startswith("param"):
                    m = _PARAM_RE.match(body)
                    if not m:
                        raise SpecError([Diagnostic(line=lineno, column=1, message="expected 'param NAME default NUM [min NUM] [max NUM]'")])
                    state_decls.append(
                        StateDecl(
                            name=m["name"],
                            default=_finite(m["default"], lineno, m.start("default") + 1),
                            min=_finite(m["min"], lineno, m.start("min") + 1) if m["min"] is not None else None,
                            max=_finite(m["max"], lineno, m.start("max") + 1) if m["max"] is not None else None,
                            line=lineno,
                        )
                    )
                elif body.startswith("const"):
                    m = _CONST_RE.match(body)
                    if not m:
                        raise SpecError([Diagnostic(line=lineno, column=1, message="expected 'const NAME = NUM'")])
                    if m["name"] in consts:
                        diagnostics.append(Diagnostic(line=lineno, column=7, message=f"duplicate const '{m['name']}'"))
                    consts[m["name"]] = _finite(m["value"], lineno, m.start("value") + 1)
                elif body.startswith("rule"):
                    m = _RULE_RE.match(body)
                    if not m:
                        raise SpecError([Diagnostic(line=lineno, column=1, message="expected 'rule NAME: on MSG(...)'")])
                    pattern = _parse_fragment(m["pattern"], "pattern", lineno, m.start("pattern"))
                    current = _RuleBuilder(m["name"], _with_line(pattern, lineno), lineno)
                elif body.startswith("iter"):
                    m = _ITER_RE.match(body)
                    if not m:
                        raise SpecError([Diagnostic(line=lineno, column=1, message="expected 'iter NAME: on MSG(...) expect MSG(...)'")])
                    open_pattern = _parse_fragment(m["open"], "pattern", lineno, m.start("open"))
                    item_pattern = _parse_fragment(m["item"], "pattern", lineno, m.start("item"))
                    current = _IterBuilder(m["name"], _with_line(open_pattern, lineno), _with_line(item_pattern, lineno), lineno)
                else:
                    word = body.split()[0]
                    raise SpecError([Diagnostic(line=lineno, column=1, message=f"unknown declaration '{word}'")])
                continue

            if current is None:
                raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="indented line outside a rule or iter")])
            if body.startswith("require"):
                m = _REQUIRE_RE.match(body)
                if not m:
                    raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="expected 'require EXPR [else \"reason\"]'")])
                expr = _parse_fragment(m["expr"], "expr", lineno, indent + m.start("expr"))
                reason = ast.literal_eval(m["reason"]) if m["reason"] else None
                requirement = Requirement(expr, reason, lineno)
                if isinstance(current, _IterBuilder):
                    current.requirements.append(requirement)
                elif current.branches:
                    current.branches[-1][1].append(requirement)
                else:
                    current.unconditional.append(requirement)
            elif body.startswith("when") or body.startswith("otherwise"):
                if isinstance(current, _IterBuilder):
                    raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="branches are not allowed in iter declarations")])
                if current.unconditional:
                    raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="'require' lines must follow a 'when' once a rule has branches")])
                if body.startswith("when"):
                    m = _WHEN_RE.match(body)
                    if not m:
                        raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="expected 'when EXPR:'")])
                    guard = _parse_fragment(m["guard"], "expr", lineno, indent + m.start("guard"))
                else:
                    if not _OTHERWISE_RE.match(body):
                        raise SpecError([Diagnostic(line=lineno, column=indent + 1, message="expected 'otherwise:'")])
                    guard = None
                current.branches.append((guard, [], lineno))
            else:
                raise SpecError([Diagnostic(line=lineno, column=indent + 1, message=f"unexpected '{body.split()[0]}'")])
        except SpecError as e:
            diagnostics.extend(e.diagnostics)
    close_current()

    for name, value in (defines or {}).items():
        if not math.isfinite(float(value)):
            diagnostics.append(Diagnostic(message=f"define {name}: number out of range: {value}"))
            continue
        consts[name] = float(value)

    spec = ProtocolSpec(
        consts=tuple(consts.items()),
        state_decls=tuple(state_decls),
        rules=tuple(d for d in finished if isinstance(d, Rule)),
        iterations=tuple(d for d in finished if isinstance(d, IterationDecl)),
    )
    if validate and not diagnostics:
        diagnostics.extend(validate_spec(spec))
    if diagnostics:
        raise SpecError(diagnostics)
    return spec


def load_spec(path: str, defines: Optional[Mapping[str, float]] = None) -> ProtocolSpec:
    """Read and validate a spec file; bare names fall back to the specs shipped with the package."""
    path = resolve_spec_path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    spec = parse_spec(text, defines)
    logger.info(
        "Loaded spec %s: %d params, %d rules, %d iterations",
        path,
        len(spec.state_decls),
        len(spec.rules),
        len(spec.iterations),
    )
    return spec


class _Scope:
    """Names visible to one expression, with their static types."""

    def __init__(self, spec: ProtocolSpec, message: Optional[str], binders: Mapping[str, str], in_iter: bool):
        self.spec = spec
        self.message = message
        self.binders = dict(binders)
        self.in_iter = in_iter
        self.params = {d.name for d in spec.state_decls}
        self.consts = spec.const_values
        self.modes = get_flight_modes()


def _field_type(message: str, name: str) -> str:
    return "str" if MESSAGES_BY_NAME[message].field_kind(name) == "str" else "num"


def _infer(expr: Expr, scope: _Scope, line: int, out: List[Diagnostic]) -> Optional[str]:
    """Return "num", "bool" or "str", appending diagnostics for anything unresolved."""
    if isinstance(expr, Literal):
        if isinstance(expr.value, bool):
            return "bool"
        return "str" if isinstance(expr.value, str) else "num"
    if isinstance(expr, Ref):
        if expr.scope == "msg":
            cls = MESSAGES_BY_NAME.get(scope.message or "")
            if cls is None or expr.name not in cls.field_names():
                out.append(Diagnostic(line=line, column=expr.column, message=f"unknown field msg.{expr.name} of {scope.message}"))
                return None
            return _field_type(scope.message, expr.name)
        if expr.scope == "state":
            if expr.name in BUILTIN_STATE_TYPES:
                return BUILTIN_STATE_TYPES[expr.name]
            if expr.name in scope.params:
                return "num"
            out.append(Diagnostic(line=line, column=expr.column, message=f"unresolved state reference state.{expr.name}"))
            return None
        if expr.scope == "iter":
            if not scope.in_iter:
                out.append(Diagnostic(line=line, column=expr.column, message=f"iter.{expr.name} used outside an iteration"))
                return None
            if expr.name not in ITER_FIELDS:
                out.append(Diagnostic(line=line, column=expr.column, message=f"unknown iteration field iter.{expr.name}"))
                return None
            return "num"
        if expr.scope == "mode":
            if expr.name not in scope.modes:
                out.append(Diagnostic(line=line, column=expr.column, message=f"unknown flight mode mode.{expr.name}"))
                return None
            return "num"
        if expr.name in scope.binders:
            return scope.binders[expr.name]
        if expr.name in scope.consts:
            return "num"
        out.append(Diagnostic(line=line, column=expr.column, message=f"unresolved name '{expr.name}'"))
        return None
    if isinstance(expr, Unary):
        inner = _infer(expr.operand, scope, line, out)
        wanted = "num" if expr.op == "-" else "bool"
        if inner is not None and inner != wanted:
            out.append(Diagnostic(line=line, column=expr.column, message=f"'{expr.op}' expects {wanted}, got {inner}"))
        return wanted
    if isinstance(expr, Binary):
        left = _infer(expr.left, scope, line, out)
        right = _infer(expr.right, scope, line, out)
        op = expr.op
        if op in BOOLEAN_OPS:
            for side in (left, right):
                if side is not None and side != "bool":
                    out.append(Diagnostic(line=line, column=expr.column, message=f"'{op}' expects bool operands, got {side}"))
            return "bool"
        if op in EQUALITY_OPS:
            if left is not None and right is not None and left != right:
                out.append(Diagnostic(line=line, column=expr.column, message=f"comparing {left} to {right}"))
            return "bool"
        for side in (left, right):
            if side is not None and side != "num":
                out.append(Diagnostic(line=line, column=expr.column, message=f"'{op}' expects numbers, got {side}"))
        return "bool" if op in ORDERING_OPS else "num"
    raise TypeError(f"not an expression: {expr!r}")


def _check_bool(expr: Expr, scope: _Scope, line: int, what: str, out: List[Diagnostic]) -> None:
    kind = _infer(expr, scope, line, out)
    if kind is not None and kind != "bool":
        out.append(Diagnostic(line=line, column=expr.column, message=f"{what} must be boolean, got {kind}"))


def _check_pattern(pattern: MsgPattern, out: List[Diagnostic]) -> Dict[str, str]:
    """Validate a pattern and return its binder types."""
    cls = MESSAGES_BY_NAME.get(pattern.message)
    if cls is None:
        out.append(Diagnostic(line=pattern.line, column=pattern.column, message=f"unknown message {pattern.message}"))
        return {}
    binders: Dict[str, str] = {}
    seen = set()
    for name, value in pattern.constraints:
        if name not in cls.field_names():
            out.append(Diagnostic(line=pattern.line, column=pattern.column, message=f"unknown field {name} of {pattern.message}"))
            continue
        expected = _field_type(pattern.message, name)
        actual = "str" if isinstance(value, str) else ("bool" if isinstance(value, bool) else "num")
        if expected != actual:
            out.append(Diagnostic(line=pattern.line, column=pattern.column, message=f"{pattern.message}.{name} is {expected}, pattern gives {actual}"))
        seen.add(name)
    for name, binder in pattern.binders:
        if name not in cls.field_names():
            out.append(Diagnostic(line=pattern.line, column=pattern.column, message=f"unknown field {name} of {pattern.message}"))
            continue
        if binder in binders:
            out.append(Diagnostic(line=pattern.line, column=pattern.column, message=f"binder '{binder}' bound twice"))
        binders[binder] = _field_type(pattern.message, name)
    return binders


def validate_spec(spec: ProtocolSpec) -> List[Diagnostic]:
    """Check every reference resolves and every guard/requirement is boolean."""
    out: List[Diagnostic] = []

    params = set()
    for decl in spec.state_decls:
        if decl.name in params:
            out.append(Diagnostic(line=decl.line, column=7, message=f"duplicate param '{decl.name}'"))
        params.add(decl.name)
        if decl.name in BUILTIN_STATE_TYPES:
            out.append(Diagnostic(line=decl.line, column=7, message=f"'{decl.name}' is a built-in state field"))
        if decl.min is not None and decl.default < decl.min:
            out.append(Diagnostic(line=decl.line, column=1, message=f"default {decl.default} below min {decl.min}"))
        if decl.max is not None and decl.default > decl.max:
            out.append(Diagnostic(line=decl.line, column=1, message=f"default {decl.default} above max {decl.max}"))

    names = set()
    for rule in spec.rules:
        if rule.name in names:
            out.append(Diagnostic(line=rule.line, column=6, message=f"duplicate rule name '{rule.name}'"))
        names.add(rule.name)
        binders = _check_pattern(rule.trigger, out)
        known_message = rule.trigger.message in MESSAGES_BY_NAME
        scope = _Scope(spec, rule.trigger.message if known_message else None, binders, in_iter=False)
        for branch in rule.branches:
            if branch.guard is not None:
                _check_bool(branch.guard, scope, branch.line, "branch guard", out)
            for req in branch.requirements:
                _check_bool(req.expr, scope, req.line, "requirement", out)

    openers = set()
    for it in spec.iterations:
        if it.name in names:
            out.append(Diagnostic(line=it.line, column=6, message=f"duplicate rule name '{it.name}'"))
        names.add(it.name)
        if it.open_pattern.message in openers:
            out.append(Diagnostic(line=it.line, column=1, message=f"more than one iteration opened by {it.open_pattern.message}"))
        openers.add(it.open_pattern.message)
        open_binders = _check_pattern(it.open_pattern, out)
        item_binders = _check_pattern(it.item_pattern, out)
        for pattern, role in ((it.open_pattern, "count"), (it.item_pattern, "index")):
            cls = MESSAGES_BY_NAME.get(pattern.message)
            if cls is None:
                continue
            if not pattern.binders:
                out.append(Diagnostic(line=it.line, column=pattern.column, message=f"{pattern.message} must bind the {role} field"))
                continue
            field_name = pattern.binders[0][0]
            if field_name in cls.field_names() and cls.field_code(field_name) != "H":
                out.append(
                    Diagnostic(
                        line=it.line,
                        column=pattern.column,
                        message=f"{role} binder must name a 16-bit unsigned field, {pattern.message}.{field_name} is {cls.field_kind(field_name)}",
                    )
                )
        known_item = it.item_pattern.message in MESSAGES_BY_NAME
        scope = _Scope(spec, it.item_pattern.message if known_item else None, {**open_binders, **item_binders}, in_iter=True)
        for req in it.item_requirements:
            _check_bool(req.expr, scope, req.line, "requirement", out)
    return out


def _format_literal(value: Value) -> str:
    return format_expr(Literal(value))


def _format_pattern(pattern: MsgPattern) -> str:
    parts = [f"{name}={_format_literal(value)}" for name, value in pattern.constraints]
    parts += [f"{name}->{binder}" for name, binder in pattern.binders]
    return f"{pattern.message}({', '.join(parts)})"


def _format_requirement(req: Requirement, indent: str) -> str:
    text = f"{indent}require {format_expr(req.expr)}"
    if req.reason is not None:
        text += f" else {_format_literal(req.reason)}"
    return text


def format_spec(spec: ProtocolSpec) -> str:
    """Print a spec in canonical form; parsing the output yields an equal spec."""
    lines: List[str] = []
    for name, value in spec.consts:
        lines.append(f"const {name} = {format_number(value)}")
    for decl in spec.state_decls:
        text = f"param {decl.name} default {format_number(decl.default)}"
        if decl.min is not None:
            text += f" min {format_number(decl.min)}"
        if decl.max is not None:
            text += f" max {format_number(decl.max)}"
        lines.append(text)
    for rule in spec.rules:
        lines.append(f"rule {rule.name}: on {_format_pattern(rule.trigger)}")
        if len(rule.branches) == 1 and rule.branches[0].guard is None:
            lines.extend(_format_requirement(r, "    ") for r in rule.branches[0].requirements)
            continue
        for branch in rule.branches:
            header = "otherwise:" if branch.guard is None else f"when {format_expr(branch.guard)}:"
            lines.append(f"    {header}")
            lines.extend(_format_requirement(r, "        ") for r in branch.requirements)
    for it in spec.iterations:
        lines.append(f"iter {it.name}: on {_format_pattern(it.open_pattern)} expect {_format_pattern(it.item_pattern)}")
        lines.extend(_format_requirement(r, "    ") for r in it.item_requirements)
    return "\n".join(lines) + ("\n" if lines else "")

