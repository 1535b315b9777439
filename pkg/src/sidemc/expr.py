"""Arithmetic expression language for coefficient fields.

Grammar (lowest to highest precedence)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | "+" unary | power
    power  := atom ("^" unary)?          # right associative
    atom   := number | name | name "(" expr ("," expr)* ")" | "(" expr ")"

Names are ``t``, ``z``, ``x1``, ``x2``, ... and the constant ``pi``.
Functions: sin, cos, exp, tanh, abs, sqrt (one argument) and min, max
(two or more arguments). Evaluation is vectorised over numpy arrays.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError

UNARY_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh, "abs": np.abs, "sqrt": np.sqrt}
VARIADIC_FUNCS = {"min": np.minimum, "max": np.maximum}
CONSTANTS = {"pi": math.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)
_VAR = re.compile(r"^(t|z|x[1-9][0-9]*)$")


class ExpressionSyntaxError(ValueError):
    """Syntax error with a 0-based character offset into the source."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.message = message
        self.position = position


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


# ---------------------------------------------------------------- parsing


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionSyntaxError(f"unexpected character {text[bad]!r}", bad)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, value, pos = self.take()
        if kind != "op" or value != op:
            found = "end of input" if kind == "end" else repr(value)
            raise ExpressionSyntaxError(f"expected {op!r}, found {found}", pos)

    def parse(self):
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {value!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and value == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return Num(float(value))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(value, pos)
            if value in CONSTANTS:
                return Var(value)
            if not _VAR.match(value):
                raise ExpressionSyntaxError(f"unknown variable {value!r}", pos)
            return Var(value)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "end":
            prev = self.tokens[self.i - 2] if self.i >= 2 else None
            if prev is not None and prev[0] == "op" and prev[1] != ")":
                raise ExpressionSyntaxError(f"dangling operator {prev[1]!r}", prev[2])
            raise ExpressionSyntaxError("unexpected end of input", pos)
        raise ExpressionSyntaxError(f"unexpected {value!r}", pos)

    def call(self, name, pos):
        if name not in UNARY_FUNCS and name not in VARIADIC_FUNCS:
            raise ExpressionSyntaxError(f"unknown function {name!r}", pos)
        self.expect_op("(")
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect_op(")")
        if name in UNARY_FUNCS and len(args) != 1:
            raise ExpressionSyntaxError(f"{name} takes one argument, got {len(args)}", pos)
        if name in VARIADIC_FUNCS and len(args) < 2:
            raise ExpressionSyntaxError(f"{name} takes at least two arguments", pos)
        return Call(name, tuple(args))


def parse_expression(text: str):
    """Parse ``text`` into an AST; raises :class:`ExpressionSyntaxError`."""
    return _Parser(text).parse()


# --------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node) -> int:
    if isinstance(node, BinOp):
        return 4 if node.op == "^" else _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    return 5


def to_source(node) -> str:
    """Print an AST so that parsing the result gives the same AST back."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({', '.join(to_source(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = to_source(node.operand)
        return f"-({inner})" if _prec(node.operand) < 3 else f"-{inner}"
    p = _prec(node)
    left, right = to_source(node.left), to_source(node.right)
    if node.op == "^":
        if _prec(node.left) <= 4:
            left = f"({left})"
        if _prec(node.right) < 3:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left}{node.op}{right}"


# ------------------------------------------------------------- evaluation


def variables(node) -> set:
    if isinstance(node, Var):
        return set() if node.name in CONSTANTS else {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, Neg):
        return variables(node.operand)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    return set().union(*(variables(a) for a in node.args))


def _codegen(node) -> str:
    if isinstance(node, Num):
        return f"_F({node.value!r})"
    if isinstance(node, Var):
        if node.name in CONSTANTS:
            return f"_F({CONSTANTS[node.name]!r})"
        if node.name.startswith("x"):
            return f"X[..., {int(node.name[1:]) - 1}]"
        return node.name
    if isinstance(node, Neg):
        return f"(-{_codegen(node.operand)})"
    if isinstance(node, Call):
        args = [_codegen(a) for a in node.args]
        if node.func in UNARY_FUNCS:
            return f"_{node.func}({args[0]})"
        out = args[0]
        for a in args[1:]:
            out = f"_{node.func}({out}, {a})"
        return out
    if node.op == "^":
        return f"_power({_codegen(node.left)}, {_codegen(node.right)})"
    return f"({_codegen(node.left)} {node.op} {_codegen(node.right)})"


_NAMESPACE = {f"_{k}": v for k, v in {**UNARY_FUNCS, **VARIADIC_FUNCS}.items()}
_NAMESPACE["_power"] = np.power
_NAMESPACE["_F"] = np.float64


class Expression:
    """A parsed, compiled expression.

    ``expr(t, X, z)`` evaluates with ``X`` of shape ``(..., d1)``; the result
    broadcasts against ``X.shape[:-1]``.
    """

    def __init__(self, source: str):
        self.source = source
        self.ast = parse_expression(source)
        self.names = variables(self.ast)
        code = _codegen(self.ast)
        self._fn = eval(f"lambda t, X, z: {code}", dict(_NAMESPACE))  # noqa: S307 - generated from a validated AST
        self.constant_value = None
        if not self.names:
            self.constant_value = float(self.evaluate({}))

    @property
    def max_x_index(self) -> int:
        idx = [int(n[1:]) for n in self.names if n.startswith("x")]
        return max(idx, default=0)

    def __repr__(self):
        return f"Expression({self.source!r})"

    def __call__(self, t, X, z=None):
        with np.errstate(all="ignore"):
            return self._fn(np.float64(t) if np.isscalar(t) else t, X, z)

    def evaluate(self, env: dict):
        """Evaluate with a mapping of variable names to floats or arrays."""
        xs = sorted((int(k[1:]), v) for k, v in env.items() if k.startswith("x"))
        X = None
        if xs:
            width = max(i for i, _ in xs)
            cols = dict(xs)
            arrays = np.broadcast_arrays(*[np.asarray(cols.get(i, 0.0), dtype=float) for i in range(1, width + 1)])
            X = np.stack(arrays, axis=-1)
        missing = self.names - set(env)
        if missing:
            raise EvaluationError(f"{self.source!r}: no value for {sorted(missing)}")
        with np.errstate(all="ignore"):
            z = env.get("z")
            value = np.asarray(self._fn(np.asarray(env.get("t", 0.0), float), X, None if z is None else np.asarray(z, float)), dtype=float)
        if not np.all(np.isfinite(value)):
            raise EvaluationError(f"{self.source!r} is not finite at {env}")
        return value if value.ndim else float(value)
