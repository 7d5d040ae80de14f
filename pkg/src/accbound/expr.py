"""Vector fields from a small expression language, evaluated on truncated Taylor jets.

Expressions are built from real constants, variables x1..xn, + - * / ^k
(integer k >= 0), unary minus, and sin/cos/exp/sqrt.  A jet stores all
partial Taylor coefficients of total degree <= order around a base point,
so one evaluation supplies every derivative needed for Lie brackets and
second variations.  Coefficient arrays carry arbitrary leading batch
dimensions: evaluating a field along a whole sampled trajectory is a
single vectorized call.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

# Relative threshold under which a jet/plain division is rejected.
DIV_TOL = 1e-12

_FUNCTIONS = ("sin", "cos", "exp", "sqrt")


class ExprError(ValueError):
    """Parse or evaluation failure; carries the source offset when known."""

    def __init__(self, message, pos=None):
        self.pos = pos
        if pos is not None:
            message = f"{message} (offset {pos})"
        super().__init__(message)


class JetEvalError(ArithmeticError):
    """Raised when jet evaluation hits a near-zero divisor or domain error."""


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ExprError(f"unexpected character {stripped[0]!r}", at)
        if m.lastgroup == "num":
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive descent over: expr := term (+|- term)*, term := factor (*|/ factor)*,
    factor := -* power, power := atom (^ nonneg-int)?, atom := num | xK | fun(expr) | (expr)."""

    def __init__(self, text, dim):
        self.text = text
        self.dim = dim
        self.tokens = _tokenize(text)
        self.k = 0

    def peek(self):
        return self.tokens[self.k]

    def next(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ExprError(f"expected {op!r}", pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprError(f"trailing input {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                node = ("add" if val == "+" else "sub", node, rhs)
            else:
                return node

    def term(self):
        node = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.factor()
                node = ("mul" if val == "*" else "div", node, rhs)
            else:
                return node

    def factor(self):
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return ("neg", self.factor())
        return self.power()

    def power(self):
        node = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.next()
            kind, val, pos = self.next()
            if kind != "num" or val != int(val) or val < 0:
                raise ExprError("exponent must be a nonnegative integer", pos)
            node = ("pow", node, int(val))
        return node

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return ("const", val)
        if kind == "name":
            if val in _FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return ("fun", val, arg)
            m = re.fullmatch(r"x(\d+)", val)
            if m is None:
                raise ExprError(f"unknown identifier {val!r}", pos)
            idx = int(m.group(1))
            if not 1 <= idx <= self.dim:
                raise ExprError(f"variable {val} exceeds dimension {self.dim}", pos)
            return ("var", idx)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ExprError("expected a number, variable or '('", pos)


def parse_expr(text: str, dim: int):
    """Parse one expression in variables x1..x<dim> into a node tree."""
    return _Parser(text, dim).parse()


def pretty(node) -> str:
    """Render a tree back to source; parse(pretty(e)) is structurally equal to e."""
    return _pretty(node, 0)


_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4,
         "const": 5, "var": 5, "fun": 5}


def _pretty(node, parent_prec):
    op = node[0]
    prec = _PREC[op]
    if op == "const":
        v = node[1]
        s = repr(v) if v != int(v) else str(int(v))
    elif op == "var":
        s = f"x{node[1]}"
    elif op == "fun":
        s = f"{node[1]}({_pretty(node[2], 0)})"
    elif op == "neg":
        s = "-" + _pretty(node[1], prec)
    elif op == "pow":
        s = _pretty(node[1], prec + 1) + f"^{node[2]}"
    else:
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[op]
        # right operand of - and / needs a bump to preserve left associativity
        s = _pretty(node[1], prec) + sym + _pretty(node[2], prec + 1)
    if prec < parent_prec:
        s = "(" + s + ")"
    return s


# ---------------------------------------------------------------------------
# jets
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def jet_context(n: int, order: int) -> "JetContext":
    return JetContext(n, order)


class JetContext:
    """Multi-index bookkeeping for jets of a fixed dimension and truncation order.

    Multi-indices are sorted by total degree then lexicographically, so the
    coefficients of any lower order form a prefix of the array.
    """

    def __init__(self, n, order):
        if n < 1 or order < 0:
            raise ValueError("need n >= 1 and order >= 0")
        self.n = n
        self.order = order
        idx = [(0,) * n]
        for deg in range(1, order + 1):
            block = set()
            for combo in combinations_with_replacement(range(n), deg):
                alpha = [0] * n
                for i in combo:
                    alpha[i] += 1
                block.add(tuple(alpha))
            idx.extend(sorted(block))
        self.indices = idx
        self.size = len(idx)
        self.position = {alpha: k for k, alpha in enumerate(idx)}
        self.degree = np.array([sum(a) for a in idx])
        self._pairs = None
        self._deriv = {}
        self._size_by_order = [
            sum(1 for a in idx if sum(a) <= m) for m in range(order + 1)
        ]

    def size_at(self, order):
        return self._size_by_order[order]

    def product_pairs(self):
        """Index triples (i, j, k) with alpha_i + alpha_j = alpha_k, |alpha_k| <= order."""
        if self._pairs is None:
            ii, jj, kk = [], [], []
            for i, a in enumerate(self.indices):
                da = sum(a)
                for j, b in enumerate(self.indices):
                    if da + sum(b) > self.order:
                        continue
                    c = tuple(x + y for x, y in zip(a, b))
                    ii.append(i)
                    jj.append(j)
                    kk.append(self.position[c])
            self._pairs = (np.array(ii), np.array(jj), np.array(kk))
        return self._pairs

    def deriv_map(self, j):
        """Source indices and factors realizing d/dx_j into the (order-1) context."""
        if j not in self._deriv:
            sub = jet_context(self.n, self.order - 1)
            src, fac = [], []
            for beta in sub.indices:
                alpha = list(beta)
                alpha[j] += 1
                src.append(self.position[tuple(alpha)])
                fac.append(beta[j] + 1)
            self._deriv[j] = (np.array(src), np.array(fac, dtype=float), sub)
        return self._deriv[j]


class Jet:
    """Truncated Taylor expansion around a (batched) base point.

    coeffs has shape batch_shape + (ctx.size,); entry for multi-index alpha is
    the Taylor coefficient f^(alpha)(p)/alpha!, so the degree-0 entry is the
    plain value and degree-1 entries are the gradient.
    """

    __slots__ = ("ctx", "coeffs")

    def __init__(self, ctx, coeffs):
        self.ctx = ctx
        self.coeffs = coeffs

    @classmethod
    def constant(cls, ctx, value, batch_shape=()):
        c = np.zeros(batch_shape + (ctx.size,))
        c[..., 0] = value
        return cls(ctx, c)

    @classmethod
    def variable(cls, ctx, i, base_value):
        """Jet of the coordinate function x_i (1-based) at base_value."""
        base_value = np.asarray(base_value, dtype=float)
        c = np.zeros(base_value.shape + (ctx.size,))
        c[..., 0] = base_value
        if ctx.order >= 1:
            unit = tuple(1 if k == i - 1 else 0 for k in range(ctx.n))
            c[..., ctx.position[unit]] = 1.0
        return cls(ctx, c)

    @property
    def order(self):
        return self.ctx.order

    def value(self):
        return self.coeffs[..., 0]

    def coeff(self, alpha):
        return self.coeffs[..., self.ctx.position[tuple(alpha)]]

    def truncated(self, order):
        if order == self.ctx.order:
            return self
        if order > self.ctx.order:
            raise ValueError("cannot raise jet order")
        sub = jet_context(self.ctx.n, order)
        return Jet(sub, self.coeffs[..., : sub.size])

    def _coerce(self, other):
        if isinstance(other, Jet):
            m = min(self.order, other.order)
            return self.truncated(m), other.truncated(m)
        return self, Jet.constant(self.ctx, other)

    def __add__(self, other):
        a, b = self._coerce(other)
        return Jet(a.ctx, a.coeffs + b.coeffs)

    def __sub__(self, other):
        a, b = self._coerce(other)
        return Jet(a.ctx, a.coeffs - b.coeffs)

    def __neg__(self):
        return Jet(self.ctx, -self.coeffs)

    def scaled(self, s):
        return Jet(self.ctx, self.coeffs * s)

    def __mul__(self, other):
        a, b = self._coerce(other)
        ii, jj, kk = a.ctx.product_pairs()
        out = np.zeros_like(a.coeffs)
        np.add.at(out, (..., kk), a.coeffs[..., ii] * b.coeffs[..., jj])
        return Jet(a.ctx, out)

    def powi(self, k):
        if k == 0:
            return Jet.constant(self.ctx, 1.0, self.coeffs.shape[:-1])
        out = self
        for _ in range(k - 1):
            out = out * self
        return out

    def _nilpotent(self):
        tail = self.coeffs.copy()
        head = tail[..., 0].copy()
        tail[..., 0] = 0.0
        return head, Jet(self.ctx, tail)

    def reciprocal(self, num_scale=1.0, node=None):
        head, w = self._nilpotent()
        bad = np.abs(head) < DIV_TOL * max(float(num_scale), 1.0)
        if np.any(bad):
            where = np.argwhere(bad)
            raise JetEvalError(
                f"near-zero divisor in {pretty(node) if node else 'division'} "
                f"at batch entry {where[0].tolist()}"
            )
        wn = w.scaled(-1.0 / head[..., None])
        acc = Jet.constant(self.ctx, 1.0, self.coeffs.shape[:-1])
        term = acc
        for _ in range(self.ctx.order):
            term = term * wn
            acc = acc + term
        return acc.scaled(1.0 / head[..., None])

    def compose_series(self, derivs):
        """Sum_k derivs[k]/k! * (self - value)^k; derivs[k] has the batch shape."""
        head, w = self._nilpotent()
        acc = Jet.constant(self.ctx, derivs[0], self.coeffs.shape[:-1])
        term = Jet.constant(self.ctx, 1.0, self.coeffs.shape[:-1])
        fact = 1.0
        for k in range(1, self.ctx.order + 1):
            term = term * w
            fact *= k
            acc = acc + term.scaled((derivs[k] / fact)[..., None])
        return acc

    def deriv(self, j):
        """Jet of the partial derivative in x_{j+1}, one order lower."""
        src, fac, sub = self.ctx.deriv_map(j)
        return Jet(sub, self.coeffs[..., src] * fac)


def _jet_apply_fun(name, arg):
    h = arg.value()
    m = arg.ctx.order
    if name == "exp":
        e = np.exp(h)
        return arg.compose_series([e] * (m + 1))
    if name == "sin":
        return arg.compose_series([np.sin(h + k * math.pi / 2) for k in range(m + 1)])
    if name == "cos":
        return arg.compose_series([np.cos(h + k * math.pi / 2) for k in range(m + 1)])
    if name == "sqrt":
        if np.any(h <= 0):
            raise JetEvalError("sqrt of a nonpositive jet head")
        # f^(k) = (1/2)(1/2-1)...(1/2-k+1) h^(1/2-k)
        derivs = [np.sqrt(h)]
        run = np.sqrt(h)
        for k in range(1, m + 1):
            run = run * (0.5 - (k - 1)) / h
            derivs.append(run)
        return arg.compose_series(derivs)
    raise ExprError(f"unknown function {name!r}")


def _eval_jet_node(node, var_jets, num_scale):
    op = node[0]
    if op == "const":
        ctx = var_jets[0].ctx
        return Jet.constant(ctx, node[1], var_jets[0].coeffs.shape[:-1])
    if op == "var":
        return var_jets[node[1] - 1]
    if op == "neg":
        return -_eval_jet_node(node[1], var_jets, num_scale)
    if op == "fun":
        return _jet_apply_fun(node[1], _eval_jet_node(node[2], var_jets, num_scale))
    if op == "pow":
        return _eval_jet_node(node[1], var_jets, num_scale).powi(node[2])
    a = _eval_jet_node(node[1], var_jets, num_scale)
    b = _eval_jet_node(node[2], var_jets, num_scale)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        scale = float(np.max(np.abs(a.coeffs), initial=0.0))
        return a * b.reciprocal(max(scale, num_scale), node=node[2])
    raise ExprError(f"bad node {op!r}")


def eval_expr_jet(node, point, order: int) -> Jet:
    """Jet of a single expression at `point` (batched: shape (..., n))."""
    point = np.asarray(point, dtype=float)
    n = point.shape[-1]
    ctx = jet_context(n, order)
    var_jets = [Jet.variable(ctx, i, point[..., i - 1]) for i in range(1, n + 1)]
    return _eval_jet_node(node, var_jets, 1.0)


# ---------------------------------------------------------------------------
# plain (order-0) evaluation
# ---------------------------------------------------------------------------

def compile_expr(node):
    """Compile a tree to a numpy closure points(..., n) -> values(...)."""
    op = node[0]
    if op == "const":
        c = node[1]
        return lambda x: np.full(x.shape[:-1], c)
    if op == "var":
        i = node[1] - 1
        return lambda x: x[..., i]
    if op == "neg":
        f = compile_expr(node[1])
        return lambda x: -f(x)
    if op == "fun":
        f = compile_expr(node[2])
        g = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "sqrt": np.sqrt}[node[1]]
        return lambda x: g(f(x))
    if op == "pow":
        f = compile_expr(node[1])
        k = node[2]
        return lambda x: f(x) ** k
    fa, fb = compile_expr(node[1]), compile_expr(node[2])
    if op == "add":
        return lambda x: fa(x) + fb(x)
    if op == "sub":
        return lambda x: fa(x) - fb(x)
    if op == "mul":
        return lambda x: fa(x) * fb(x)
    if op == "div":
        def divide(x):
            num, den = fa(x), fb(x)
            scale = float(np.max(np.abs(num), initial=0.0))
            if np.any(np.abs(den) < DIV_TOL * max(scale, 1.0)):
                raise JetEvalError(f"near-zero divisor in {pretty(node[2])}")
            return num / den
        return divide
    raise ExprError(f"bad node {op!r}")


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VectorFieldExpr:
    """n expression trees making up one vector field."""

    dim: int
    components: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.components) != self.dim:
            raise ExprError(
                f"{self.name or 'field'}: {len(self.components)} components for dimension {self.dim}"
            )

    def pretty(self):
        return [pretty(c) for c in self.components]

    def compiled(self):
        fns = [compile_expr(c) for c in self.components]

        def field(x):
            x = np.asarray(x, dtype=float)
            return np.stack([f(x) for f in fns], axis=-1)

        return field

    def __call__(self, point):
        return self.compiled()(point)


def parse_field(texts, n: int, name: str = "") -> VectorFieldExpr:
    """Parse n expression strings into a vector field."""
    if len(texts) != n:
        raise ExprError(f"{name or 'field'}: expected {n} component expressions, got {len(texts)}")
    comps = tuple(parse_expr(t, n) for t in texts)
    return VectorFieldExpr(n, comps, name)


def eval_jet(field: VectorFieldExpr, point, order: int):
    """Jets of all components of `field` at `point` (batched).

    Order 0 falls back to the compiled plain evaluator so that degree-0
    output is bit-for-bit the direct evaluation.
    """
    point = np.asarray(point, dtype=float)
    if point.shape[-1] != field.dim:
        raise ExprError(f"point dimension {point.shape[-1]} != field dimension {field.dim}")
    if order == 0:
        ctx = jet_context(field.dim, 0)
        vals = field.compiled()(point)
        return [Jet(ctx, vals[..., i:i + 1]) for i in range(field.dim)]
    ctx = jet_context(field.dim, order)
    var_jets = [Jet.variable(ctx, i, point[..., i - 1]) for i in range(1, field.dim + 1)]
    return [_eval_jet_node(c, var_jets, 1.0) for c in field.components]
