"""A small constraint language for inter-parameter rules.

Surface syntax: infix relational (`<  >  <=  >=  ==  !=`) and arithmetic
(`+  -  *  /`) operators, lowercase logical connectives (`and`, `or`, `not`),
and call-syntax dependency operators over parameter names or nested
predicates: ``AllOrNone(a, b)``, ``ZeroOrOne(a, b)``, ``OnlyOne(a, b)``,
``Or(a, b)``, ``Requires(condition, consequence)``.

Precedence, tightest first: arithmetic `* /`, then `+ -`, then relational,
then `not`, `and`, `or`. Expressions evaluate to a ternary verdict so rules
can be judged over partial request assignments.

Parameter names are identifiers with optional dotted segments
(``user.address.city``); values are decimal numbers, quoted strings, or
`true`/`false`.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass

logger = logging.getLogger(__name__)

RELATIONAL_OPS = ("<", ">", "<=", ">=", "==", "!=")
ARITHMETIC_OPS = ("+", "-", "*", "/")
DEPENDENCY_OPS = ("AllOrNone", "Or", "OnlyOne", "Requires", "ZeroOrOne")
LOGICAL_OPS = ("and", "or", "not")

_KEYWORDS = {"and", "or", "not", "true", "false"}


class DslError(Exception):
    """Base class for constraint-language failures."""


class DslSyntaxError(DslError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class Verdict(str, enum.Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    INAPPLICABLE = "inapplicable"


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expr:
    """Base class for constraint AST nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class ParamRef(Expr):
    name: str


@dataclass(frozen=True)
class NumberLit(Expr):
    value: int | float


@dataclass(frozen=True)
class TextLit(Expr):
    value: str


@dataclass(frozen=True)
class BoolLit(Expr):
    value: bool


@dataclass(frozen=True)
class Arithmetic(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    def __post_init__(self):
        if self.op not in ARITHMETIC_OPS:
            raise ValueError(f"unknown arithmetic operator {self.op!r}")
        if self.op == "/" and isinstance(self.rhs, NumberLit) and self.rhs.value == 0:
            raise ValueError("division by literal zero")


@dataclass(frozen=True)
class Relational(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    def __post_init__(self):
        if self.op not in RELATIONAL_OPS:
            raise ValueError(f"unknown relational operator {self.op!r}")


@dataclass(frozen=True)
class Dependency(Expr):
    op: str
    args: tuple[Expr, ...]

    def __post_init__(self):
        if self.op not in DEPENDENCY_OPS:
            raise ValueError(
                f"unknown dependency operator {self.op!r}; "
                f"expected one of {', '.join(DEPENDENCY_OPS)}")
        if self.op == "Requires":
            if len(self.args) != 2:
                raise ValueError("Requires takes exactly (condition, consequence)")
        elif len(self.args) < 2:
            raise ValueError(f"{self.op} takes at least 2 arguments")


@dataclass(frozen=True)
class Logical(Expr):
    op: str
    args: tuple[Expr, ...]

    def __post_init__(self):
        if self.op not in LOGICAL_OPS:
            raise ValueError(f"unknown logical operator {self.op!r}")
        if self.op == "not" and len(self.args) != 1:
            raise ValueError("not takes exactly one operand")
        if self.op in ("and", "or"):
            if len(self.args) < 2:
                raise ValueError(f"{self.op} takes at least 2 operands")
            # and/or are associative; keep the n-ary form flat so printing
            # and reparsing agree on one representation.
            flat: list[Expr] = []
            for arg in self.args:
                if isinstance(arg, Logical) and arg.op == self.op:
                    flat.extend(arg.args)
                else:
                    flat.append(arg)
            object.__setattr__(self, "args", tuple(flat))


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
    | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
    | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
    | (?P<op><=|>=|==|!=|[<>+\-*/(),])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", '"': '"', "'": "'", "\\": "\\"}


@dataclass(frozen=True)
class _Token:
    kind: str  # number | name | string | op | end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup or ""
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


def _unescape(raw: str) -> str:
    body = raw[1:-1]
    out: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            out.append(_ESCAPES.get(body[i + 1], body[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


# ---------------------------------------------------------------------------
# Parser (recursive descent, standard precedence)
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, tokens: list[_Token]):
        self._tokens = tokens
        self._i = 0

    def _peek(self) -> _Token:
        return self._tokens[self._i]

    def _next(self) -> _Token:
        tok = self._tokens[self._i]
        self._i += 1
        return tok

    def _expect_op(self, text: str) -> None:
        tok = self._next()
        if tok.kind != "op" or tok.text != text:
            raise DslSyntaxError(f"expected {text!r}, found {tok.text or 'end of input'!r}",
                                 tok.pos)

    def parse(self) -> Expr:
        expr = self.parse_or()
        tok = self._peek()
        if tok.kind != "end":
            raise DslSyntaxError(f"unexpected trailing input {tok.text!r}", tok.pos)
        return expr

    def parse_or(self) -> Expr:
        parts = [self.parse_and()]
        while self._peek().kind == "name" and self._peek().text == "or":
            self._next()
            parts.append(self.parse_and())
        return parts[0] if len(parts) == 1 else Logical("or", tuple(parts))

    def parse_and(self) -> Expr:
        parts = [self.parse_not()]
        while self._peek().kind == "name" and self._peek().text == "and":
            self._next()
            parts.append(self.parse_not())
        return parts[0] if len(parts) == 1 else Logical("and", tuple(parts))

    def parse_not(self) -> Expr:
        if self._peek().kind == "name" and self._peek().text == "not":
            self._next()
            return Logical("not", (self.parse_not(),))
        return self.parse_comparison()

    def parse_comparison(self) -> Expr:
        lhs = self.parse_sum()
        tok = self._peek()
        if tok.kind == "op" and tok.text in RELATIONAL_OPS:
            self._next()
            rhs = self.parse_sum()
            trailing = self._peek()
            if trailing.kind == "op" and trailing.text in RELATIONAL_OPS:
                raise DslSyntaxError("chained comparisons are not supported", trailing.pos)
            return Relational(tok.text, lhs, rhs)
        return lhs

    def parse_sum(self) -> Expr:
        lhs = self.parse_term()
        while True:
            tok = self._peek()
            if tok.kind == "op" and tok.text in ("+", "-"):
                self._next()
                lhs = Arithmetic(tok.text, lhs, self.parse_term())
            else:
                return lhs

    def parse_term(self) -> Expr:
        lhs = self.parse_atom()
        while True:
            tok = self._peek()
            if tok.kind == "op" and tok.text in ("*", "/"):
                self._next()
                rhs = self.parse_atom()
                try:
                    lhs = Arithmetic(tok.text, lhs, rhs)
                except ValueError as exc:
                    raise DslSyntaxError(str(exc), tok.pos) from exc
            else:
                return lhs

    def parse_atom(self) -> Expr:
        tok = self._next()
        if tok.kind == "number":
            return _number_from_text(tok.text)
        if tok.kind == "string":
            return TextLit(_unescape(tok.text))
        if tok.kind == "op" and tok.text == "(":
            inner = self.parse_or()
            self._expect_op(")")
            return inner
        if tok.kind == "op" and tok.text == "-":
            operand = self._next()
            if operand.kind != "number":
                raise DslSyntaxError("'-' here must prefix a number", tok.pos)
            lit = _number_from_text(operand.text)
            return NumberLit(-lit.value)
        if tok.kind == "name":
            if tok.text == "true":
                return BoolLit(True)
            if tok.text == "false":
                return BoolLit(False)
            if tok.text in ("and", "or", "not"):
                raise DslSyntaxError(f"unexpected keyword {tok.text!r}", tok.pos)
            if self._peek().kind == "op" and self._peek().text == "(":
                return self._parse_call(tok)
            return ParamRef(tok.text)
        raise DslSyntaxError(
            f"unexpected {tok.text or 'end of input'!r}", tok.pos)

    def _parse_call(self, name_tok: _Token) -> Expr:
        if name_tok.text not in DEPENDENCY_OPS:
            raise DslSyntaxError(
                f"unknown operator {name_tok.text!r}; accepted operators are "
                f"{', '.join(DEPENDENCY_OPS)}", name_tok.pos)
        self._expect_op("(")
        args = [self.parse_or()]
        while self._peek().kind == "op" and self._peek().text == ",":
            self._next()
            args.append(self.parse_or())
        self._expect_op(")")
        try:
            return Dependency(name_tok.text, tuple(args))
        except ValueError as exc:
            raise DslSyntaxError(str(exc), name_tok.pos) from exc


def _number_from_text(text: str) -> NumberLit:
    if re.fullmatch(r"\d+", text):
        return NumberLit(int(text))
    return NumberLit(float(text))


def parse_constraint(text: str) -> Expr:
    """Parse DSL text into an AST; raises DslSyntaxError with a position."""
    if not text or not text.strip():
        raise DslSyntaxError("empty expression", 0)
    return _Parser(_tokenize(text)).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_PREC_OR = 1
_PREC_AND = 2
_PREC_NOT = 3
_PREC_REL = 4
_PREC_SUM = 5
_PREC_TERM = 6
_PREC_ATOM = 7


def _precedence(expr: Expr) -> int:
    if isinstance(expr, Logical):
        return {"or": _PREC_OR, "and": _PREC_AND, "not": _PREC_NOT}[expr.op]
    if isinstance(expr, Relational):
        return _PREC_REL
    if isinstance(expr, Arithmetic):
        return _PREC_SUM if expr.op in ("+", "-") else _PREC_TERM
    return _PREC_ATOM


def _quote(value: str) -> str:
    out = value.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")
    return f'"{out}"'


def _render(expr: Expr, parent_prec: int, right_side: bool = False) -> str:
    prec = _precedence(expr)
    text = _render_bare(expr)
    if prec < parent_prec or (right_side and prec == parent_prec):
        return f"({text})"
    return text


def _render_bare(expr: Expr) -> str:
    if isinstance(expr, ParamRef):
        return expr.name
    if isinstance(expr, NumberLit):
        return repr(expr.value)
    if isinstance(expr, TextLit):
        return _quote(expr.value)
    if isinstance(expr, BoolLit):
        return "true" if expr.value else "false"
    if isinstance(expr, Arithmetic):
        prec = _precedence(expr)
        return f"{_render(expr.lhs, prec)} {expr.op} {_render(expr.rhs, prec, right_side=True)}"
    if isinstance(expr, Relational):
        # Comparisons do not chain, so relational operands need parentheses.
        return (f"{_render(expr.lhs, _PREC_REL + 1)} {expr.op} "
                f"{_render(expr.rhs, _PREC_REL + 1)}")
    if isinstance(expr, Dependency):
        inner = ", ".join(to_text(a) for a in expr.args)
        return f"{expr.op}({inner})"
    if isinstance(expr, Logical):
        if expr.op == "not":
            return f"not {_render(expr.args[0], _PREC_NOT)}"
        joiner = f" {expr.op} "
        prec = _precedence(expr)
        return joiner.join(_render(a, prec, right_side=(i > 0))
                           for i, a in enumerate(expr.args))
    raise TypeError(f"not an Expr: {expr!r}")


def to_text(expr: Expr) -> str:
    """Render an AST to DSL text; `parse_constraint(to_text(e)) == e`."""
    return _render_bare(expr)


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

_FLIP = {">": "<", ">=": "<="}
_COMMUTATIVE_REL = ("==", "!=")
_COMMUTATIVE_ARITH = ("+", "*")


def canonicalize(expr: Expr) -> Expr:
    """Normalize an AST so semantically-equal rules compare equal.

    Commutative operands (`==`, `!=`, `+`, `*`) and the argument lists of the
    order-insensitive dependency operators are sorted by their rendered text;
    `>`/`>=` are flipped to `<`/`<=`; double negation is removed. `Requires`
    arguments keep their order (condition vs consequence is not symmetric).
    Idempotent and verdict-preserving.
    """
    if isinstance(expr, Arithmetic):
        lhs = canonicalize(expr.lhs)
        rhs = canonicalize(expr.rhs)
        if expr.op in _COMMUTATIVE_ARITH:
            lhs, rhs = sorted((lhs, rhs), key=to_text)
        return Arithmetic(expr.op, lhs, rhs)
    if isinstance(expr, Relational):
        lhs = canonicalize(expr.lhs)
        rhs = canonicalize(expr.rhs)
        if expr.op in _FLIP:
            return Relational(_FLIP[expr.op], rhs, lhs)
        if expr.op in _COMMUTATIVE_REL:
            lhs, rhs = sorted((lhs, rhs), key=to_text)
        return Relational(expr.op, lhs, rhs)
    if isinstance(expr, Dependency):
        args = tuple(canonicalize(a) for a in expr.args)
        if expr.op != "Requires":
            args = tuple(sorted(args, key=to_text))
        return Dependency(expr.op, args)
    if isinstance(expr, Logical):
        args = tuple(canonicalize(a) for a in expr.args)
        if expr.op == "not" and isinstance(args[0], Logical) and args[0].op == "not":
            return args[0].args[0]
        return Logical(expr.op, args)
    return expr


def canonical_text(expr: Expr) -> str:
    return to_text(canonicalize(expr))


# ---------------------------------------------------------------------------
# Evaluation (ternary)
# ---------------------------------------------------------------------------

class _Mismatch(Exception):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def _type_group(value) -> str:
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, (int, float)):
        return "number"
    if isinstance(value, str):
        return "text"
    return type(value).__name__


def _present(name: str, assignment) -> bool:
    return name in assignment and assignment[name] is not None


# Operand evaluation uses tagged results ("value" | "missing" | "mismatch")
# combined symmetrically, so reordering commutative operands cannot change
# which verdict wins: a type mismatch anywhere beats an absent parameter.
_MISSING = ("missing", None)


def _eval_operand(expr: Expr, assignment) -> tuple[str, object]:
    if isinstance(expr, ParamRef):
        if not _present(expr.name, assignment):
            return _MISSING
        return ("value", assignment[expr.name])
    if isinstance(expr, (NumberLit, TextLit, BoolLit)):
        return ("value", expr.value)
    if isinstance(expr, Arithmetic):
        lhs = _eval_operand(expr.lhs, assignment)
        rhs = _eval_operand(expr.rhs, assignment)
        for kind, value in (lhs, rhs):
            if kind == "value" and _type_group(value) != "number":
                return ("mismatch",
                        f"arithmetic {expr.op!r} needs numbers, got {_type_group(value)}")
        for side in (lhs, rhs):
            if side[0] == "mismatch":
                return side
        if lhs[0] == "missing" or rhs[0] == "missing":
            return _MISSING
        left, right = lhs[1], rhs[1]
        if expr.op == "+":
            return ("value", left + right)
        if expr.op == "-":
            return ("value", left - right)
        if expr.op == "*":
            return ("value", left * right)
        if right == 0:
            return ("mismatch", "division by zero")
        return ("value", left / right)
    return ("mismatch", f"{type(expr).__name__} is not a value")


def _compare(op: str, lhs, rhs) -> bool:
    lg, rg = _type_group(lhs), _type_group(rhs)
    if lg != rg:
        raise _Mismatch(f"cannot compare {lg} with {rg}")
    if op == "==":
        return lhs == rhs
    if op == "!=":
        return lhs != rhs
    if lg == "boolean":
        raise _Mismatch("ordering is not defined for booleans")
    if op == "<":
        return lhs < rhs
    if op == ">":
        return lhs > rhs
    if op == "<=":
        return lhs <= rhs
    return lhs >= rhs


def _arg_truth(arg: Expr, assignment) -> bool:
    """Presence/satisfaction of one dependency-operator argument."""
    if isinstance(arg, ParamRef):
        return _present(arg.name, assignment)
    if isinstance(arg, BoolLit):
        return arg.value
    if isinstance(arg, (Relational, Dependency, Logical)):
        return evaluate_constraint(arg, assignment) is Verdict.SATISFIED
    logger.debug("dependency argument %r is not a predicate; treated as false",
                 to_text(arg))
    return False


def evaluate_constraint(expr: Expr, assignment) -> Verdict:
    """Judge an expression over a (possibly partial) parameter assignment.

    Absent parameters under relational/arithmetic operators yield
    INAPPLICABLE; type mismatches yield VIOLATED (with a debug diagnostic),
    never an exception. Dependency operators judge presence: a parameter-name
    argument counts as true when the parameter is present, a nested predicate
    when it is satisfied.
    """
    if isinstance(expr, Relational):
        lhs = _eval_operand(expr.lhs, assignment)
        rhs = _eval_operand(expr.rhs, assignment)
        for kind, detail in (lhs, rhs):
            if kind == "mismatch":
                logger.debug("constraint %r violated: %s", to_text(expr), detail)
                return Verdict.VIOLATED
        if lhs[0] == "missing" or rhs[0] == "missing":
            return Verdict.INAPPLICABLE
        try:
            return Verdict.SATISFIED if _compare(expr.op, lhs[1], rhs[1]) \
                else Verdict.VIOLATED
        except _Mismatch as exc:
            logger.debug("constraint %r violated: %s", to_text(expr), exc.reason)
            return Verdict.VIOLATED
    if isinstance(expr, Dependency):
        truths = [_arg_truth(a, assignment) for a in expr.args]
        if expr.op == "AllOrNone":
            ok = all(truths) or not any(truths)
        elif expr.op == "ZeroOrOne":
            ok = sum(truths) <= 1
        elif expr.op == "OnlyOne":
            ok = sum(truths) == 1
        elif expr.op == "Or":
            ok = any(truths)
        else:  # Requires
            ok = (not truths[0]) or truths[1]
        return Verdict.SATISFIED if ok else Verdict.VIOLATED
    if isinstance(expr, Logical):
        verdicts = [evaluate_constraint(a, assignment) for a in expr.args]
        if expr.op == "not":
            inner = verdicts[0]
            if inner is Verdict.INAPPLICABLE:
                return inner
            return Verdict.VIOLATED if inner is Verdict.SATISFIED else Verdict.SATISFIED
        if expr.op == "and":
            if Verdict.VIOLATED in verdicts:
                return Verdict.VIOLATED
            if Verdict.INAPPLICABLE in verdicts:
                return Verdict.INAPPLICABLE
            return Verdict.SATISFIED
        if Verdict.SATISFIED in verdicts:
            return Verdict.SATISFIED
        if Verdict.INAPPLICABLE in verdicts:
            return Verdict.INAPPLICABLE
        return Verdict.VIOLATED
    if isinstance(expr, BoolLit):
        return Verdict.SATISFIED if expr.value else Verdict.VIOLATED
    if isinstance(expr, ParamRef):
        # A bare parameter at predicate position is a presence test.
        return Verdict.SATISFIED if _present(expr.name, assignment) else Verdict.VIOLATED
    logger.debug("expression %r is not a predicate; verdict violated", to_text(expr))
    return Verdict.VIOLATED


# ---------------------------------------------------------------------------
# Stable JSON form (used by ground-truth files)
# ---------------------------------------------------------------------------

def expr_to_json(expr: Expr) -> dict:
    if isinstance(expr, ParamRef):
        return {"node": "param", "name": expr.name}
    if isinstance(expr, NumberLit):
        return {"node": "number", "value": expr.value}
    if isinstance(expr, TextLit):
        return {"node": "text", "value": expr.value}
    if isinstance(expr, BoolLit):
        return {"node": "bool", "value": expr.value}
    if isinstance(expr, Arithmetic):
        return {"node": "arithmetic", "op": expr.op,
                "lhs": expr_to_json(expr.lhs), "rhs": expr_to_json(expr.rhs)}
    if isinstance(expr, Relational):
        return {"node": "relational", "op": expr.op,
                "lhs": expr_to_json(expr.lhs), "rhs": expr_to_json(expr.rhs)}
    if isinstance(expr, Dependency):
        return {"node": "dependency", "op": expr.op,
                "args": [expr_to_json(a) for a in expr.args]}
    if isinstance(expr, Logical):
        return {"node": "logical", "op": expr.op,
                "args": [expr_to_json(a) for a in expr.args]}
    raise TypeError(f"not an Expr: {expr!r}")


def expr_from_json(data: dict) -> Expr:
    node = data.get("node")
    if node == "param":
        return ParamRef(data["name"])
    if node == "number":
        value = data["value"]
        return NumberLit(value if isinstance(value, (int, float)) else float(value))
    if node == "text":
        return TextLit(data["value"])
    if node == "bool":
        return BoolLit(bool(data["value"]))
    if node == "arithmetic":
        return Arithmetic(data["op"], expr_from_json(data["lhs"]), expr_from_json(data["rhs"]))
    if node == "relational":
        return Relational(data["op"], expr_from_json(data["lhs"]), expr_from_json(data["rhs"]))
    if node == "dependency":
        return Dependency(data["op"], tuple(expr_from_json(a) for a in data["args"]))
    if node == "logical":
        return Logical(data["op"], tuple(expr_from_json(a) for a in data["args"]))
    raise ValueError(f"unknown AST node kind {node!r}")


def expr_json_text(expr: Expr) -> str:
    """Deterministic one-line JSON encoding of an AST."""
    return json.dumps(expr_to_json(expr), sort_keys=True, separators=(",", ":"))
