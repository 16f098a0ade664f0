"""Small expression language for kernels, forcing terms, and derivatives.

Grammar (EBNF), tight to loose precedence: ^ then unary minus then * /
then + -, with ^ right-associative and the rest left-associative:

    expr   := term { ("+" | "-") term }
    term   := factor { ("*" | "/") factor }
    factor := "-" factor | power
    power  := atom [ "^" factor ]
    atom   := NUMBER | VARIABLE | FUNCTION "(" expr ")" | "(" expr ")"

Variables: t, u, and the indexed pairs s1..sn / x1..xn up to the declared
arity n.  Functions: exp, log, sin, cos, sqrt, abs.  Evaluation reports
math faults (division by zero, log of a nonpositive value, overflow) as
DomainError instead of letting non-finite values escape.
"""

from __future__ import annotations

import math
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

from .core import Kernel, KernelBounds, SeparableForm
from .errors import DomainError, ParseError

__all__ = [
    "Num",
    "Var",
    "Unary",
    "Binary",
    "Call",
    "FUNCTIONS",
    "parse",
    "eval_expr",
    "format_expr",
    "free_variables",
    "expr_arity",
    "bind_kernel",
    "bind_scalar",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs")


# --- abstract syntax ---------------------------------------------------
# Source positions ride along for error messages but are excluded from
# equality so structural comparison ignores layout.


@dataclass(frozen=True)
class Num:
    value: float
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Var:
    name: str
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"
    line: int = field(compare=False, default=0)
    col: int = field(compare=False, default=0)


Expr = Num | Var | Unary | Binary | Call


# --- tokenizer ---------------------------------------------------------

_NUMBER = re.compile(r"(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_IDENT = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_INDEXED = re.compile(r"([sx])([0-9]+)$")


@dataclass(frozen=True)
class _Token:
    kind: str  # "num" | "ident" | one of "+-*/^()" | "end"
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(src):
        ch = src[pos]
        if ch == "\n":
            line += 1
            col = 1
            pos += 1
            continue
        if ch.isspace():
            col += 1
            pos += 1
            continue
        if ch in "+-*/^()":
            tokens.append(_Token(ch, ch, line, col))
            col += 1
            pos += 1
            continue
        m = _NUMBER.match(src, pos)
        if m:
            tokens.append(_Token("num", m.group(), line, col))
            col += len(m.group())
            pos = m.end()
            continue
        m = _IDENT.match(src, pos)
        if m:
            tokens.append(_Token("ident", m.group(), line, col))
            col += len(m.group())
            pos = m.end()
            continue
        raise ParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


# --- parser ------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[_Token], arity: int):
        self.tokens = tokens
        self.pos = 0
        self.arity = arity

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            shown = tok.text or "end of input"
            raise ParseError(f"expected {kind!r}, found {shown!r}", tok.line, tok.col)
        return self.advance()

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek().kind in ("+", "-"):
            op = self.advance()
            right = self.parse_term()
            node = Binary(op.kind, node, right, op.line, op.col)
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek().kind in ("*", "/"):
            op = self.advance()
            right = self.parse_factor()
            node = Binary(op.kind, node, right, op.line, op.col)
        return node

    def parse_factor(self) -> Expr:
        tok = self.peek()
        if tok.kind == "-":
            self.advance()
            return Unary("-", self.parse_factor(), tok.line, tok.col)
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        tok = self.peek()
        if tok.kind == "^":
            self.advance()
            # right-associative; the exponent may itself carry a unary minus
            exponent = self.parse_factor()
            return Binary("^", base, exponent, tok.line, tok.col)
        return base

    def parse_atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.advance()
            value = float(tok.text)
            if not math.isfinite(value):
                raise ParseError(f"numeric literal {tok.text!r} overflows", tok.line, tok.col)
            return Num(value, tok.line, tok.col)
        if tok.kind == "(":
            self.advance()
            node = self.parse_expr()
            self.expect(")")
            return node
        if tok.kind == "ident":
            self.advance()
            if self.peek().kind == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(f"unknown function {tok.text!r}", tok.line, tok.col)
                self.advance()
                arg = self.parse_expr()
                self.expect(")")
                return Call(tok.text, arg, tok.line, tok.col)
            return self._variable(tok)
        shown = tok.text or "end of input"
        raise ParseError(f"unexpected {shown!r}", tok.line, tok.col)

    def _variable(self, tok: _Token) -> Var:
        name = tok.text
        if name in ("t", "u"):
            return Var(name, tok.line, tok.col)
        m = _INDEXED.match(name)
        if m:
            index = int(m.group(2))
            if not 1 <= index <= self.arity:
                raise ParseError(
                    f"variable {name!r} exceeds the declared order {self.arity}",
                    tok.line,
                    tok.col,
                )
            return Var(name, tok.line, tok.col)
        raise ParseError(f"unknown identifier {name!r}", tok.line, tok.col)


def parse(src: str, arity: int = 0) -> Expr:
    """Parse an expression that may reference s1..s<arity> and x1..x<arity>."""
    if not src or not src.strip():
        raise ParseError("empty expression", 1, 1)
    if arity < 0:
        raise ValueError(f"arity must be nonnegative, got {arity!r}")
    parser = _Parser(_tokenize(src), arity)
    node = parser.parse_expr()
    end = parser.peek()
    if end.kind != "end":
        raise ParseError(f"trailing input starting at {end.text!r}", end.line, end.col)
    return node


# --- evaluation --------------------------------------------------------


def _checked(value: float, what: str, line: int, col: int) -> float:
    if not math.isfinite(value):
        raise DomainError(f"{what} produced a non-finite value (line {line}, column {col})")
    return value


def eval_expr(expr: Expr, env: Mapping[str, float]) -> float:
    """Evaluate with every free variable bound in `env`."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return float(env[expr.name])
        except KeyError:
            raise ValueError(f"unbound variable {expr.name!r}") from None
    if isinstance(expr, Unary):
        return -eval_expr(expr.operand, env)
    if isinstance(expr, Binary):
        a = eval_expr(expr.left, env)
        b = eval_expr(expr.right, env)
        op = expr.op
        if op == "+":
            return _checked(a + b, "addition", expr.line, expr.col)
        if op == "-":
            return _checked(a - b, "subtraction", expr.line, expr.col)
        if op == "*":
            return _checked(a * b, "multiplication", expr.line, expr.col)
        if op == "/":
            if b == 0.0:
                raise DomainError(
                    f"division by zero (line {expr.line}, column {expr.col})"
                )
            return _checked(a / b, "division", expr.line, expr.col)
        if op == "^":
            try:
                value = math.pow(a, b)
            except (ValueError, OverflowError):
                raise DomainError(
                    f"{a!r} ^ {b!r} is undefined over the reals "
                    f"(line {expr.line}, column {expr.col})"
                ) from None
            return _checked(value, "power", expr.line, expr.col)
        raise ValueError(f"unknown operator {op!r}")
    if isinstance(expr, Call):
        arg = eval_expr(expr.arg, env)
        func = expr.func
        try:
            if func == "exp":
                value = math.exp(arg)
            elif func == "log":
                value = math.log(arg)
            elif func == "sin":
                value = math.sin(arg)
            elif func == "cos":
                value = math.cos(arg)
            elif func == "sqrt":
                value = math.sqrt(arg)
            elif func == "abs":
                value = abs(arg)
            else:
                raise ValueError(f"unknown function {func!r}")
        except (ValueError, OverflowError):
            raise DomainError(
                f"{func}({arg!r}) is undefined (line {expr.line}, column {expr.col})"
            ) from None
        return _checked(value, func, expr.line, expr.col)
    raise TypeError(f"not an expression node: {expr!r}")


# --- printing ----------------------------------------------------------

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "unary": 3, "^": 4}


def _prec(expr: Expr) -> int:
    if isinstance(expr, Binary):
        return _PRECEDENCE[expr.op]
    if isinstance(expr, Unary):
        return _PRECEDENCE["unary"]
    return 9


def format_expr(expr: Expr) -> str:
    """Render back to source; reparsing yields a structurally equal tree."""
    if isinstance(expr, Num):
        return repr(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Call):
        return f"{expr.func}({format_expr(expr.arg)})"
    if isinstance(expr, Unary):
        inner = format_expr(expr.operand)
        if _prec(expr.operand) < _PRECEDENCE["unary"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(expr, Binary):
        left = format_expr(expr.left)
        right = format_expr(expr.right)
        p = _PRECEDENCE[expr.op]
        if expr.op == "^":
            # right-associative: parenthesize the left side on ties
            if _prec(expr.left) <= p:
                left = f"({left})"
            if _prec(expr.right) < p:
                right = f"({right})"
        else:
            if _prec(expr.left) < p:
                left = f"({left})"
            if _prec(expr.right) <= p:
                right = f"({right})"
        return f"{left} {expr.op} {right}"
    raise TypeError(f"not an expression node: {expr!r}")


# --- analysis ----------------------------------------------------------


def free_variables(expr: Expr) -> frozenset[str]:
    if isinstance(expr, Num):
        return frozenset()
    if isinstance(expr, Var):
        return frozenset((expr.name,))
    if isinstance(expr, Unary):
        return free_variables(expr.operand)
    if isinstance(expr, Binary):
        return free_variables(expr.left) | free_variables(expr.right)
    if isinstance(expr, Call):
        return free_variables(expr.arg)
    raise TypeError(f"not an expression node: {expr!r}")


def expr_arity(expr: Expr) -> int:
    """Largest index referenced through s<k> or x<k> (0 when none)."""
    top = 0
    for name in free_variables(expr):
        m = _INDEXED.match(name)
        if m:
            top = max(top, int(m.group(2)))
    return top


def is_zero_literal(expr: Expr) -> bool:
    return isinstance(expr, Num) and expr.value == 0.0


# --- binding into kernels ----------------------------------------------


def bind_scalar(expr: Expr, *names: str) -> Callable[..., float]:
    """Close an expression over positional arguments bound to `names`."""
    unknown = free_variables(expr) - set(names)
    if unknown:
        raise ValueError(f"expression uses unbound variables {sorted(unknown)}")

    def fn(*args: float) -> float:
        return eval_expr(expr, dict(zip(names, args)))

    return fn


def _flatten_product(expr: Expr, out: list[tuple[Expr, bool]], inverted: bool) -> None:
    if isinstance(expr, Binary) and expr.op == "*":
        _flatten_product(expr.left, out, inverted)
        _flatten_product(expr.right, out, inverted)
    elif isinstance(expr, Binary) and expr.op == "/":
        _flatten_product(expr.left, out, inverted)
        _flatten_product(expr.right, out, not inverted)
    elif isinstance(expr, Unary) and expr.op == "-":
        out.append((Num(-1.0), False))
        _flatten_product(expr.operand, out, inverted)
    else:
        out.append((expr, inverted))


def _rename_index(expr: Expr, index: int) -> Expr:
    """Rewrite s<index>/x<index> to s1/x1."""
    if isinstance(expr, Var):
        m = _INDEXED.match(expr.name)
        if m and int(m.group(2)) == index:
            return Var(m.group(1) + "1", expr.line, expr.col)
        return expr
    if isinstance(expr, Num):
        return expr
    if isinstance(expr, Unary):
        return Unary(expr.op, _rename_index(expr.operand, index), expr.line, expr.col)
    if isinstance(expr, Binary):
        return Binary(
            expr.op,
            _rename_index(expr.left, index),
            _rename_index(expr.right, index),
            expr.line,
            expr.col,
        )
    if isinstance(expr, Call):
        return Call(expr.func, _rename_index(expr.arg, index), expr.line, expr.col)
    raise TypeError(f"not an expression node: {expr!r}")


def _product_of(factors: Sequence[Expr]) -> Expr:
    node = factors[0]
    for f in factors[1:]:
        node = Binary("*", node, f)
    return node


def _detect_separable(expr: Expr, order: int) -> SeparableForm | None:
    """Syntactic detection of a(t) * prod_k phi(t, s_k, x_k).

    Conservative: only multiplicative chains whose index-bearing factors
    split cleanly by index and agree after renaming qualify; anything else
    (sums, index-bearing divisors, cross-index factors) returns None, which
    costs fast-path performance but never correctness.
    """
    factors: list[tuple[Expr, bool]] = []
    _flatten_product(expr, factors, False)
    prefactor_parts: list[tuple[Expr, bool]] = []
    groups: dict[int, list[Expr]] = {k: [] for k in range(1, order + 1)}
    for f, inverted in factors:
        indices = {
            int(m.group(2))
            for name in free_variables(f)
            if (m := _INDEXED.match(name))
        }
        if not indices:
            prefactor_parts.append((f, inverted))
        elif len(indices) == 1 and not inverted:
            groups[indices.pop()].append(f)
        else:
            return None
    if any(not g for g in groups.values()):
        return None
    canonical = [
        _rename_index(_product_of(groups[k]), k) for k in range(1, order + 1)
    ]
    if any(c != canonical[0] for c in canonical[1:]):
        return None
    phi_expr = canonical[0]

    def phi(t: float, s: float, x: float) -> float:
        return eval_expr(phi_expr, {"t": t, "s1": s, "x1": x})

    if prefactor_parts:

        def prefactor(t: float) -> float:
            out = 1.0
            env = {"t": t}
            for part, inverted in prefactor_parts:
                v = eval_expr(part, env)
                if inverted:
                    if v == 0.0:
                        raise DomainError("division by zero in kernel prefactor")
                    out /= v
                else:
                    out *= v
            return out

    else:

        def prefactor(t: float) -> float:
            return 1.0

    return SeparableForm(
        prefactor=prefactor,
        factor=phi,
        factor_depends_on_t="t" in free_variables(phi_expr),
    )


def bind_kernel(expr: Expr, order: int, bounds: KernelBounds | None = None) -> Kernel:
    """Turn an expression into an order-n kernel contract.

    A SeparableForm is attached when the expression factors syntactically
    as a t-only prefactor times renamed copies of one per-index factor.
    """
    if order < 1:
        raise ValueError(f"kernel order must be >= 1, got {order!r}")
    used = expr_arity(expr)
    if used > order:
        raise ValueError(
            f"expression references index {used} but the kernel order is {order}"
        )
    if "u" in free_variables(expr):
        raise ValueError("kernel expressions cannot reference the control variable u")

    names = ["t"]
    for k in range(1, order + 1):
        names.append(f"s{k}")
    for k in range(1, order + 1):
        names.append(f"x{k}")

    def fn(t: float, s: Sequence[float], x: Sequence[float]) -> float:
        env = dict(zip(names, (t, *s, *x)))
        return eval_expr(expr, env)

    return Kernel(order=order, fn=fn, separable=_detect_separable(expr, order), bounds=bounds)
