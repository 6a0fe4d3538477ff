"""Expression language for dynamics and costs, with exact forward-mode derivatives.

Grammar (highest precedence first):

    atom    := NUMBER | 'pi' | variable | func '(' expr ')' | '(' expr ')'
    power   := atom ('^' INTEGER)*          # exponents are integer literals >= 0
    unary   := '-' unary | power
    term    := unary (('*' | '/') unary)*
    expr    := term (('+' | '-') term)*

Variables are ``x1..xn`` (state), ``u1..um`` (control) and ``wK_L`` (component L
of the stage-K noise, visible only at stages >= K). Functions: sin, cos, exp.
Evaluation broadcasts over numpy arrays, so one parsed expression can be
evaluated for a whole stage of tree nodes at once.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import (
    DivisionByZero,
    ExprSyntaxError,
    FutureNoiseReference,
    NonIntegerExponent,
    NumericalOverflow,
    UnboundVariable,
    UnknownIdentifier,
)

_FUNCS = ("sin", "cos", "exp")


# --- AST --------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Num:
    value: float


@dataclass(frozen=True, slots=True)
class Pi:
    pass


@dataclass(frozen=True, slots=True)
class StateVar:
    index: int  # 1-based


@dataclass(frozen=True, slots=True)
class ControlVar:
    index: int  # 1-based


@dataclass(frozen=True, slots=True)
class NoiseVar:
    stage: int      # 1-based noise stage K in wK_L
    component: int  # 1-based component L


@dataclass(frozen=True, slots=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True, slots=True)
class Func:
    name: str
    arg: "Expr"


@dataclass(frozen=True, slots=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class Pow:
    base: "Expr"
    exponent: int  # integer literal >= 0


Expr = Union[Num, Pi, StateVar, ControlVar, NoiseVar, Neg, Func, BinOp, Pow]


@dataclass(frozen=True)
class Env:
    """Variable bindings; entries may be scalars or broadcastable numpy arrays.

    ``x`` and ``u`` index their last axis by component; ``w[k]`` binds the
    stage-k noise vector, last axis indexed by component.
    """

    x: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    w: Mapping[int, np.ndarray] = field(default_factory=dict)


# --- tokenizer / parser -------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        tokens.append((m.lastgroup, m.group(m.lastgroup), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


_VAR_X = re.compile(r"^x(\d+)$")
_VAR_U = re.compile(r"^u(\d+)$")
_VAR_W = re.compile(r"^w(\d+)_(\d+)$")


class _Parser:
    def __init__(self, text, dims):
        self.text = text
        self.n, self.m, self.d, self.stage = dims
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ExprSyntaxError(f"expected {op!r}", pos)
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.advance()
                node = BinOp(val, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.advance()
                node = BinOp(val, node, self.unary())
            else:
                return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self):
        node = self.atom()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "^":
                self.advance()
                node = Pow(node, self.exponent_literal())
            else:
                return node

    def exponent_literal(self):
        kind, val, pos = self.peek()
        if kind != "num":
            raise NonIntegerExponent(
                f"power exponent must be an integer literal >= 0 (at position {pos})"
            )
        self.advance()
        as_float = float(val)
        if as_float != int(as_float) or int(as_float) < 0:
            raise NonIntegerExponent(
                f"power exponent must be an integer literal >= 0, got {val!r}"
            )
        return int(as_float)

    def atom(self):
        kind, val, pos = self.advance()
        if kind == "num":
            return Num(float(val))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "name":
            return self.name_atom(val, pos)
        raise ExprSyntaxError(f"unexpected token {val!r}", pos)

    def name_atom(self, name, pos):
        if name == "pi":
            return Pi()
        if name in _FUNCS:
            self.expect_op("(")
            arg = self.expr()
            self.expect_op(")")
            return Func(name, arg)
        m = _VAR_X.match(name)
        if m:
            i = int(m.group(1))
            if not 1 <= i <= self.n:
                raise UnknownIdentifier(f"{name!r}: state index out of range 1..{self.n}")
            return StateVar(i)
        m = _VAR_U.match(name)
        if m:
            j = int(m.group(1))
            if not 1 <= j <= self.m:
                raise UnknownIdentifier(f"{name!r}: control index out of range 1..{self.m}")
            return ControlVar(j)
        m = _VAR_W.match(name)
        if m:
            k, l = int(m.group(1)), int(m.group(2))
            if not 1 <= l <= self.d:
                raise UnknownIdentifier(f"{name!r}: noise component out of range 1..{self.d}")
            if k < 1:
                raise UnknownIdentifier(f"{name!r}: noise stage must be >= 1")
            if k > self.stage:
                raise FutureNoiseReference(
                    f"{name!r} references stage-{k} noise at stage {self.stage}"
                )
            return NoiseVar(k, l)
        raise UnknownIdentifier(f"unknown identifier {name!r}")


def parse(text, dims):
    """Parse ``text`` against ``dims = (n, m, d, stage)`` and return the AST."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text, dims).parse()


# --- canonical printer --------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "pow": 4, "atom": 5}


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    if isinstance(node, Pow):
        return _PREC["pow"]
    return _PREC["atom"]


def _num_str(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def print_expr(node):
    """Canonical text form; parse(print_expr(e)) reproduces e structurally."""
    if isinstance(node, Num):
        return _num_str(node.value)
    if isinstance(node, Pi):
        return "pi"
    if isinstance(node, StateVar):
        return f"x{node.index}"
    if isinstance(node, ControlVar):
        return f"u{node.index}"
    if isinstance(node, NoiseVar):
        return f"w{node.stage}_{node.component}"
    if isinstance(node, Neg):
        inner = print_expr(node.arg)
        if _prec(node.arg) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Func):
        return f"{node.name}({print_expr(node.arg)})"
    if isinstance(node, Pow):
        base = print_expr(node.base)
        if _prec(node.base) < _PREC["atom"]:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, BinOp):
        lp, rp = _prec(node.left), _prec(node.right)
        mine = _PREC[node.op]
        left = print_expr(node.left)
        right = print_expr(node.right)
        if lp < mine:
            left = f"({left})"
        # - and / are left-associative: parenthesize same-precedence right operands
        if rp < mine or (rp == mine and node.op in ("-", "/")):
            right = f"({right})"
        # negative literals on the right of binary ops need parens to reparse
        if node.op in ("*", "/", "+", "-") and right.startswith("-"):
            right = f"({right})"
        return f"{left} {node.op} {right}"
    raise TypeError(f"not an Expr node: {node!r}")


# --- evaluation ----------------------------------------------------------------


def _lookup(node, env):
    if isinstance(node, StateVar):
        if env.x is None:
            raise UnboundVariable(f"x{node.index}")
        arr = np.asarray(env.x, dtype=float)
        if arr.shape[-1] < node.index:
            raise UnboundVariable(f"x{node.index}")
        return arr[..., node.index - 1]
    if isinstance(node, ControlVar):
        if env.u is None:
            raise UnboundVariable(f"u{node.index}")
        arr = np.asarray(env.u, dtype=float)
        if arr.shape[-1] < node.index:
            raise UnboundVariable(f"u{node.index}")
        return arr[..., node.index - 1]
    if isinstance(node, NoiseVar):
        if node.stage not in env.w:
            raise UnboundVariable(f"w{node.stage}_{node.component}")
        arr = np.asarray(env.w[node.stage], dtype=float)
        if arr.shape[-1] < node.component:
            raise UnboundVariable(f"w{node.stage}_{node.component}")
        return arr[..., node.component - 1]
    raise TypeError


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Pi):
        return math.pi
    if isinstance(node, (StateVar, ControlVar, NoiseVar)):
        return _lookup(node, env)
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, Func):
        v = _eval(node.arg, env)
        if node.name == "sin":
            return np.sin(v)
        if node.name == "cos":
            return np.cos(v)
        return np.exp(v)
    if isinstance(node, Pow):
        v = _eval(node.base, env)
        return v ** node.exponent
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(np.asarray(b) == 0.0):
            raise DivisionByZero(f"division by zero in {print_expr(node)!r}")
        return a / b
    raise TypeError(f"not an Expr node: {node!r}")


def evaluate(expr, env):
    """Evaluate ``expr`` under ``env``; NaN/Inf results raise NumericalOverflow."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _eval(expr, env)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflow(f"non-finite value from {print_expr(expr)!r}")
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


# --- forward-mode derivatives ---------------------------------------------------


def _wrt_key(spec):
    """Normalize a with-respect-to entry: 'x1' / ('x', 1) / ('w', 2, 1)."""
    if isinstance(spec, str):
        m = _VAR_X.match(spec)
        if m:
            return ("x", int(m.group(1)))
        m = _VAR_U.match(spec)
        if m:
            return ("u", int(m.group(1)))
        m = _VAR_W.match(spec)
        if m:
            return ("w", int(m.group(1)), int(m.group(2)))
        raise UnknownIdentifier(f"cannot differentiate with respect to {spec!r}")
    return tuple(spec)


def _var_key(node):
    if isinstance(node, StateVar):
        return ("x", node.index)
    if isinstance(node, ControlVar):
        return ("u", node.index)
    if isinstance(node, NoiseVar):
        return ("w", node.stage, node.component)
    return None


def _last(x):
    """Append a broadcast axis so values can scale tangent-last arrays."""
    return np.asarray(x, dtype=float)[..., None]


def _eval_dual(node, env, slots, nwrt):
    """Return (value, tangent); tangent carries the derivative axis LAST."""
    if isinstance(node, Num):
        return node.value, np.zeros(nwrt)
    if isinstance(node, Pi):
        return math.pi, np.zeros(nwrt)
    key = _var_key(node)
    if key is not None:
        v = np.asarray(_lookup(node, env), dtype=float)
        tan = np.zeros(v.shape + (nwrt,))
        if key in slots:
            tan[..., slots[key]] = 1.0
        return v, tan
    if isinstance(node, Neg):
        v, t = _eval_dual(node.arg, env, slots, nwrt)
        return -v, -t
    if isinstance(node, Func):
        v, t = _eval_dual(node.arg, env, slots, nwrt)
        if node.name == "sin":
            return np.sin(v), _last(np.cos(v)) * t
        if node.name == "cos":
            return np.cos(v), -_last(np.sin(v)) * t
        ev = np.exp(v)
        return ev, _last(ev) * t
    if isinstance(node, Pow):
        v, t = _eval_dual(node.base, env, slots, nwrt)
        k = node.exponent
        if k == 0:
            return np.ones_like(np.asarray(v, dtype=float)), np.zeros_like(t)
        return v ** k, _last(k * v ** (k - 1)) * t
    if isinstance(node, BinOp):
        a, ta = _eval_dual(node.left, env, slots, nwrt)
        b, tb = _eval_dual(node.right, env, slots, nwrt)
        if node.op == "+":
            return a + b, ta + tb
        if node.op == "-":
            return a - b, ta - tb
        if node.op == "*":
            return a * b, ta * _last(b) + tb * _last(a)
        if np.any(np.asarray(b) == 0.0):
            raise DivisionByZero(f"division by zero in {print_expr(node)!r}")
        return a / b, (ta * _last(b) - tb * _last(a)) / _last(b * b)
    raise TypeError(f"not an Expr node: {node!r}")


def eval_with_partials(expr, env, wrt):
    """Evaluate ``expr`` and its exact partials with respect to ``wrt``.

    ``wrt`` is a sequence of variable names or keys; the returned partials
    array is shaped (len(wrt),) + value.shape (a plain vector for scalar envs).
    """
    keys = [_wrt_key(s) for s in wrt]
    slots = {k: i for i, k in enumerate(keys)}
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        v, t = _eval_dual(expr, env, slots, len(keys))
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
        raise NumericalOverflow(f"non-finite value from {print_expr(expr)!r}")
    t = np.broadcast_to(t, np.shape(np.asarray(v)) + (len(keys),))
    if np.ndim(v) == 0:
        return float(v), np.array(t, dtype=float).reshape(len(keys))
    return np.asarray(v, dtype=float), np.moveaxis(np.array(t, dtype=float), -1, 0)


def free_variables(expr):
    """Set of variable keys appearing in the expression."""
    out = set()

    def walk(node):
        key = _var_key(node)
        if key is not None:
            out.add(key)
        elif isinstance(node, (Neg, Func)):
            walk(node.arg)
        elif isinstance(node, Pow):
            walk(node.base)
        elif isinstance(node, BinOp):
            walk(node.left)
            walk(node.right)

    walk(expr)
    return out
