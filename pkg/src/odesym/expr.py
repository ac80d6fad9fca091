"""Expression DAGs: parsing, evaluation, differentiation, canonicalization.

Expressions are immutable directed acyclic graphs over the operator
vocabulary below.  They represent the right-hand side f of an ODE system,
symmetry generator components, and coordinate transforms.  Nodes are stored
in a flat, topologically ordered array (children always precede parents),
and identical subexpressions are shared.

The module provides four views of an expression:

* text:        ``parse`` / ``to_str`` (grammar documented in ``parse``),
* numeric:     ``evaluate`` / ``evaluate_batch`` with strict domain guards,
* derivative:  ``gradient`` (forward-mode, exact to rounding) and
               ``diff_symbolic`` (expression-level),
* canonical:   ``normal_forms`` / ``simplify`` / ``is_zero``, a
               sum-of-products normal form over exact rationals, strong
               enough to certify that symmetry residuals are identically
               zero without a general-purpose CAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

UNARY_OPS = ("neg", "inv", "exp", "log", "sin", "cos", "tan", "sqrt", "square")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
FUNC_NAMES = ("exp", "log", "sin", "cos", "tan", "sqrt")

# pow exponents are restricted to the closure needed by the benchmark systems
ALLOWED_EXPONENTS = tuple(
    Fraction(v) for v in (-3, -2, -1, Fraction(-1, 2), Fraction(1, 2), 2, 3, 4)
)

# |denominator| below this raises a domain error; residuals get squared later,
# so infinities must never leak into a loss
DIV_GUARD = 1e-12


class ExprError(ValueError):
    """Base class for expression-layer errors."""


class ParseError(ExprError):
    """Syntax or vocabulary error, with the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class DomainError(ExprError):
    """Evaluation left the expression's domain (log/sqrt of a negative,
    division by ~0, overflow to a non-finite value)."""


# node classes are frozen dataclasses, not tuples: equality must be
# type-aware so the hash-consing memo never conflates y2 with the constant 2
@dataclass(frozen=True, slots=True)
class Variable:
    index: int  # 0 is t, k >= 1 is y_k


@dataclass(frozen=True, slots=True)
class Constant:
    value: Fraction


@dataclass(frozen=True, slots=True)
class Unary:
    op: str
    child: int


@dataclass(frozen=True, slots=True)
class Binary:
    op: str
    left: int
    right: int


Node = Union[Variable, Constant, Unary, Binary]


class EvalPoint(NamedTuple):
    t: float
    y: tuple


@dataclass(frozen=True)
class Dual:
    """Forward-mode pair: value and the d+1 partials (d/dt, d/dy1..d/dyd)."""

    value: float
    partials: np.ndarray


@dataclass(frozen=True, eq=True)
class Expression:
    """Immutable DAG with one root per output dimension.

    Node indices are topological: every child index is strictly smaller
    than its parent's.  Instances built through :class:`DagBuilder` (or
    ``parse``) store nodes in a canonical order, so structurally equal
    DAGs compare equal.
    """

    nodes: tuple
    roots: tuple

    def __post_init__(self):
        for i, node in enumerate(self.nodes):
            if isinstance(node, Unary):
                if not 0 <= node.child < i:
                    raise ExprError(f"node {i} violates topological order")
            elif isinstance(node, Binary):
                if not (0 <= node.left < i and 0 <= node.right < i):
                    raise ExprError(f"node {i} violates topological order")
                if node.op == "pow" and not isinstance(self.nodes[node.right], Constant):
                    raise ExprError("pow exponent must be a constant node")
        for r in self.roots:
            if not 0 <= r < len(self.nodes):
                raise ExprError("root index out of range")

    @property
    def n_outputs(self) -> int:
        return len(self.roots)

    def max_variable(self) -> int:
        """Largest variable index used (0 if only t or no variables)."""
        return max((n.index for n in self.nodes if isinstance(n, Variable)), default=0)

    def __str__(self) -> str:
        return to_str(self)

    def __hash__(self):
        return hash((self.nodes, self.roots))


def count_ops(e: Expression) -> int:
    """Number of operator (unary/binary) nodes in the DAG."""
    return sum(isinstance(n, (Unary, Binary)) for n in e.nodes)


# ---------------------------------------------------------------------------
# construction


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ExprError("constant must be finite")
        return Fraction(value)  # exact binary expansion
    raise ExprError(f"unsupported constant type {type(value).__name__}")


class DagBuilder:
    """Hash-consing constructor for expression DAGs.

    Identical nodes are interned, so shared subexpressions collapse to a
    single node.  ``build`` prunes to the nodes reachable from the given
    roots and renumbers them in a canonical (post-order) topological order.
    """

    def __init__(self):
        self._nodes: list = []
        self._memo: dict = {}

    def _add(self, node: Node) -> int:
        idx = self._memo.get(node)
        if idx is None:
            idx = len(self._nodes)
            self._nodes.append(node)
            self._memo[node] = idx
        return idx

    def node(self, idx: int) -> Node:
        return self._nodes[idx]

    def var(self, index: int) -> int:
        if index < 0:
            raise ExprError("variable index must be >= 0")
        return self._add(Variable(index))

    def const(self, value) -> int:
        return self._add(Constant(_as_fraction(value)))

    def unary(self, op: str, child: int) -> int:
        if op not in UNARY_OPS:
            raise ExprError(f"unknown unary op {op!r}")
        self._check(child)
        return self._add(Unary(op, child))

    def binary(self, op: str, left: int, right: int) -> int:
        if op not in BINARY_OPS:
            raise ExprError(f"unknown binary op {op!r}")
        self._check(left)
        self._check(right)
        if op == "pow":
            node = self._nodes[right]
            if not isinstance(node, Constant):
                raise ExprError("pow exponent must be a constant node")
            if node.value not in ALLOWED_EXPONENTS:
                raise ExprError(f"unsupported pow exponent {node.value}")
        return self._add(Binary(op, left, right))

    def _check(self, idx: int):
        if not 0 <= idx < len(self._nodes):
            raise ExprError("child index out of range")

    # folding constructors: keep derivative/simplify outputs small without
    # changing values on the common domain
    def _const_of(self, idx: int):
        node = self._nodes[idx]
        return node.value if isinstance(node, Constant) else None

    def neg(self, child: int) -> int:
        node = self._nodes[child]
        if isinstance(node, Constant):
            return self.const(-node.value)
        if isinstance(node, Unary) and node.op == "neg":
            return node.child
        return self.unary("neg", child)

    def add(self, left: int, right: int) -> int:
        lc, rc = self._const_of(left), self._const_of(right)
        if lc == 0:
            return right
        if rc == 0:
            return left
        if lc is not None and rc is not None:
            return self.const(lc + rc)
        return self.binary("add", left, right)

    def sub(self, left: int, right: int) -> int:
        lc, rc = self._const_of(left), self._const_of(right)
        if rc == 0:
            return left
        if lc is not None and rc is not None:
            return self.const(lc - rc)
        if left == right:
            return self.const(0)
        if lc == 0:
            return self.neg(right)
        return self.binary("sub", left, right)

    def mul(self, left: int, right: int) -> int:
        lc, rc = self._const_of(left), self._const_of(right)
        if lc == 0 or rc == 0:
            return self.const(0)
        if lc == 1:
            return right
        if rc == 1:
            return left
        if lc is not None and rc is not None:
            return self.const(lc * rc)
        return self.binary("mul", left, right)

    def div(self, left: int, right: int) -> int:
        lc, rc = self._const_of(left), self._const_of(right)
        if rc == 1:
            return left
        if lc is not None and rc is not None and rc != 0:
            return self.const(lc / rc)
        if lc == 0:
            return self.const(0)
        return self.binary("div", left, right)

    def import_roots(self, e: Expression) -> list:
        """Intern all of ``e``'s nodes; returns the mapped root indices."""
        mapping = []
        for node in e.nodes:
            if isinstance(node, Unary):
                node = Unary(node.op, mapping[node.child])
            elif isinstance(node, Binary):
                node = Binary(node.op, mapping[node.left], mapping[node.right])
            mapping.append(self._add(node))
        return [mapping[r] for r in e.roots]

    def build(self, roots: Sequence[int]) -> Expression:
        """Prune to reachable nodes and renumber canonically."""
        for r in roots:
            self._check(r)
        order: list = []
        number: dict = {}
        for root in roots:
            stack = [(root, False)]
            while stack:
                idx, expanded = stack.pop()
                if idx in number:
                    continue
                node = self._nodes[idx]
                if expanded or isinstance(node, (Variable, Constant)):
                    if idx not in number:
                        number[idx] = len(order)
                        order.append(idx)
                    continue
                stack.append((idx, True))
                if isinstance(node, Unary):
                    stack.append((node.child, False))
                else:
                    stack.append((node.right, False))
                    stack.append((node.left, False))
        out = []
        for idx in order:
            node = self._nodes[idx]
            if isinstance(node, Unary):
                node = Unary(node.op, number[node.child])
            elif isinstance(node, Binary):
                node = Binary(node.op, number[node.left], number[node.right])
            out.append(node)
        return Expression(tuple(out), tuple(number[r] for r in roots))


# ---------------------------------------------------------------------------
# parsing


_SYMBOLS = "+-*/^()"


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in _SYMBOLS:
            tokens.append((ch, ch, i))
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
            word = text[i:j]
            try:
                value = Fraction(word)
            except ValueError:
                raise ParseError(f"malformed number {word!r}", i) from None
            tokens.append(("num", value, i))
            i = j
            continue
        if ch.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("ident", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, tokens, dimension: int, builder: DagBuilder):
        self.tokens = tokens
        self.pos = 0
        self.dim = dimension
        self.b = builder

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str):
        tok = self.take()
        if tok[0] != kind:
            raise ParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        return tok

    def expr(self) -> int:
        kind = self.peek()[0]
        negate = False
        if kind in "+-":
            negate = self.take()[0] == "-"
        node = self.term()
        if negate:
            node = self.b.unary("neg", node)
        while self.peek()[0] in "+-":
            op = self.take()[0]
            rhs = self.term()
            node = self.b.binary("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self) -> int:
        node = self.factor()
        while self.peek()[0] in "*/":
            op = self.take()[0]
            rhs = self.factor()
            node = self.b.binary("mul" if op == "*" else "div", node, rhs)
        return node

    def factor(self) -> int:
        node = self.base()
        if self.peek()[0] == "^":
            self.take()
            sign = 1
            if self.peek()[0] == "-":
                self.take()
                sign = -1
            tok = self.expect("num")
            exponent = sign * tok[1]
            if exponent not in ALLOWED_EXPONENTS:
                raise ParseError(f"unsupported exponent {exponent}", tok[2])
            node = self.b.binary("pow", node, self.b.const(exponent))
        return node

    def base(self) -> int:
        tok = self.take()
        kind, value, pos = tok
        if kind == "num":
            return self.b.const(value)
        if kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            if value == "t":
                return self.b.var(0)
            if value in FUNC_NAMES:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return self.b.unary(value, arg)
            if len(value) == 2 and value[0] == "y" and value[1].isdigit():
                k = int(value[1])
                if 1 <= k <= self.dim:
                    return self.b.var(k)
                raise ParseError(
                    f"identifier {value!r} exceeds dimension {self.dim}", pos
                )
            raise ParseError(f"unknown identifier {value!r}", pos)
        raise ParseError(f"unexpected token {value!r}", pos)


def parse(text: str, dimension: int, builder: DagBuilder = None) -> Expression:
    """Parse ``text`` into a canonical (hash-consed) Expression.

    Grammar::

        expr   := ['+'|'-'] term (('+'|'-') term)*
        term   := factor (('*'|'/') factor)*
        factor := base ('^' ['-'] number)?
        base   := number | ident | '(' expr ')' | func '(' expr ')'
        func   := exp | log | sin | cos | tan | sqrt
        ident  := t | y1 .. y9

    Whitespace is insignificant.  ``y_k`` is valid for 1 <= k <= dimension.
    Exponents are restricted to ``ALLOWED_EXPONENTS``.
    """
    if not 1 <= dimension <= 9:
        raise ExprError("dimension must be between 1 and 9")
    b = builder if builder is not None else DagBuilder()
    p = _Parser(_tokenize(text), dimension, b)
    root = p.expr()
    tok = p.peek()
    if tok[0] != "end":
        raise ParseError(f"unexpected trailing input {tok[1]!r}", tok[2])
    return b.build([root])


def parse_system(components: Iterable[str], dimension: int) -> Expression:
    """Parse several component strings into one shared-DAG Expression."""
    b = DagBuilder()
    roots = []
    for text in components:
        p = _Parser(_tokenize(text), dimension, b)
        roots.append(p.expr())
        tok = p.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected trailing input {tok[1]!r}", tok[2])
    return b.build(roots)


# ---------------------------------------------------------------------------
# printing


def _fraction_str(fr: Fraction) -> str:
    if fr.denominator == 1:
        return str(fr.numerator)
    den = fr.denominator
    twos = fives = 0
    while den % 2 == 0:
        den //= 2
        twos += 1
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den == 1 and max(twos, fives) <= 30:
        shift = max(twos, fives)
        scaled = abs(fr.numerator) * 10**shift // fr.denominator
        digits = str(scaled).rjust(shift + 1, "0")
        sign = "-" if fr.numerator < 0 else ""
        return f"{sign}{digits[:-shift]}.{digits[-shift:]}"
    return f"({fr.numerator}/{fr.denominator})"


_PREC = {"add": 10, "sub": 10, "mul": 20, "div": 20, "pow": 30}


def _render(nodes, idx: int, ctx: int) -> str:
    node = nodes[idx]
    if isinstance(node, Variable):
        return "t" if node.index == 0 else f"y{node.index}"
    if isinstance(node, Constant):
        text = _fraction_str(node.value)
        if node.value < 0 and not text.startswith("("):
            prec = 4
        else:
            prec = 100
        return f"({text})" if prec < ctx else text
    if isinstance(node, Unary):
        if node.op == "neg":
            inner = _render(nodes, node.child, 20)
            text = f"-{inner}"
            return f"({text})" if ctx > 4 else text
        if node.op == "inv":
            inner = _render(nodes, node.child, 21)
            text = f"1/{inner}"
            return f"({text})" if ctx > 20 else text
        if node.op == "square":
            inner = _render(nodes, node.child, 31)
            text = f"{inner}^2"
            return f"({text})" if ctx > 30 else text
        return f"{node.op}({_render(nodes, node.child, 0)})"
    op = node.op
    if op == "pow":
        base = _render(nodes, node.left, 31)
        exponent = _fraction_str(nodes[node.right].value)
        text = f"{base}^{exponent}"
        return f"({text})" if ctx > 30 else text
    sym = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[op]
    prec = _PREC[op]
    left = _render(nodes, node.left, prec)
    right = _render(nodes, node.right, prec + 1)
    text = f"{left}{sym}{right}"
    return f"({text})" if ctx > prec else text


def component_strs(e: Expression) -> list:
    """Grammar text for each root."""
    return [_render(e.nodes, r, 0) for r in e.roots]


def to_str(e: Expression) -> str:
    """Grammar text; multi-output expressions render as ``[c1, c2, ...]``."""
    parts = component_strs(e)
    if len(parts) == 1:
        return parts[0]
    return "[" + ", ".join(parts) + "]"


# ---------------------------------------------------------------------------
# numeric evaluation


def _eval_unary(op: str, x: float) -> float:
    if op == "neg":
        return -x
    if op == "inv":
        if abs(x) < DIV_GUARD:
            raise DomainError("division by ~0")
        return 1.0 / x
    if op == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            raise DomainError("exp overflow") from None
    if op == "log":
        if x <= 0.0:
            raise DomainError("log of non-positive value")
        return math.log(x)
    if op == "sin":
        return math.sin(x)
    if op == "cos":
        return math.cos(x)
    if op == "tan":
        return math.tan(x)
    if op == "sqrt":
        if x < 0.0:
            raise DomainError("sqrt of negative value")
        return math.sqrt(x)
    if op == "square":
        return x * x
    raise ExprError(f"unknown unary op {op!r}")


def _eval_pow(x: float, q: Fraction) -> float:
    if q < 0:
        if abs(x) < DIV_GUARD:
            raise DomainError("division by ~0")
        if q == -1:
            return 1.0 / x
        if q == -2:
            return 1.0 / (x * x)
        if q == -3:
            return 1.0 / (x * x * x)
        if x < 0.0:
            raise DomainError("sqrt of negative value")
        return 1.0 / math.sqrt(x)  # q == -1/2
    if q == 2:
        return x * x
    if q == 3:
        return x * x * x
    if q == 4:
        xx = x * x
        return xx * xx
    if x < 0.0:
        raise DomainError("sqrt of negative value")
    return math.sqrt(x)  # q == 1/2


def evaluate(e: Expression, p: EvalPoint) -> np.ndarray:
    """Evaluate every root at ``p``; raises :class:`DomainError` if the
    point leaves the expression's domain or any node overflows."""
    t = float(p.t)
    y = p.y
    vals = [0.0] * len(e.nodes)
    for i, node in enumerate(e.nodes):
        if isinstance(node, Variable):
            if node.index == 0:
                v = t
            else:
                if node.index > len(y):
                    raise ExprError(
                        f"variable y{node.index} exceeds point dimension {len(y)}"
                    )
                v = float(y[node.index - 1])
        elif isinstance(node, Constant):
            v = float(node.value)
        elif isinstance(node, Unary):
            v = _eval_unary(node.op, vals[node.child])
        else:
            a, op = vals[node.left], node.op
            if op == "pow":
                v = _eval_pow(a, e.nodes[node.right].value)
            else:
                b = vals[node.right]
                if op == "add":
                    v = a + b
                elif op == "sub":
                    v = a - b
                elif op == "mul":
                    v = a * b
                else:  # div
                    if abs(b) < DIV_GUARD:
                        raise DomainError("division by ~0")
                    v = a / b
        if not math.isfinite(v):
            raise DomainError("non-finite intermediate value")
        vals[i] = v
    return np.array([vals[r] for r in e.roots], dtype=float)


def gradient(e: Expression, p: EvalPoint) -> np.ndarray:
    """Forward-mode derivative matrix, one row per root, columns
    (d/dt, d/dy1, ..., d/dyd) with d = len(p.y)."""
    t = float(p.t)
    y = p.y
    width = len(y) + 1
    duals: list = [None] * len(e.nodes)

    def make(v: float, g: np.ndarray) -> Dual:
        if not (math.isfinite(v) and np.isfinite(g).all()):
            raise DomainError("non-finite intermediate value")
        return Dual(v, g)

    for i, node in enumerate(e.nodes):
        if isinstance(node, Variable):
            g = np.zeros(width)
            if node.index == 0:
                v = t
            else:
                if node.index > len(y):
                    raise ExprError(
                        f"variable y{node.index} exceeds point dimension {len(y)}"
                    )
                v = float(y[node.index - 1])
            g[node.index] = 1.0
            duals[i] = Dual(v, g)
            continue
        if isinstance(node, Constant):
            duals[i] = Dual(float(node.value), np.zeros(width))
            continue
        if isinstance(node, Unary):
            u = duals[node.child]
            v = _eval_unary(node.op, u.value)
            op = node.op
            if op == "neg":
                g = -u.partials
            elif op == "inv":
                g = -u.partials * (v * v)
            elif op == "exp":
                g = u.partials * v
            elif op == "log":
                g = u.partials / u.value
            elif op == "sin":
                g = u.partials * math.cos(u.value)
            elif op == "cos":
                g = -u.partials * math.sin(u.value)
            elif op == "tan":
                g = u.partials * (1.0 + v * v)
            elif op == "sqrt":
                if 2.0 * v < DIV_GUARD:
                    raise DomainError("sqrt derivative at ~0")
                g = u.partials / (2.0 * v)
            else:  # square
                g = u.partials * (2.0 * u.value)
            duals[i] = make(v, g)
            continue
        a = duals[node.left]
        op = node.op
        if op == "pow":
            q = e.nodes[node.right].value
            v = _eval_pow(a.value, q)
            x = a.value
            if q == 2:
                slope = 2.0 * x
            elif q == 3:
                slope = 3.0 * x * x
            elif q == 4:
                slope = 4.0 * x * x * x
            elif q == -1:
                slope = -v * v
            elif q == -2:
                slope = -2.0 / (x * x * x)
            elif q == -3:
                xx = x * x
                slope = -3.0 / (xx * xx)
            else:  # +-1/2
                if abs(x) < DIV_GUARD:
                    raise DomainError("pow derivative at ~0")
                slope = float(q) * v / x
            duals[i] = make(v, a.partials * slope)
            continue
        b = duals[node.right]
        if op == "add":
            duals[i] = make(a.value + b.value, a.partials + b.partials)
        elif op == "sub":
            duals[i] = make(a.value - b.value, a.partials - b.partials)
        elif op == "mul":
            duals[i] = make(
                a.value * b.value, a.partials * b.value + b.partials * a.value
            )
        else:  # div
            if abs(b.value) < DIV_GUARD:
                raise DomainError("division by ~0")
            v = a.value / b.value
            duals[i] = make(v, (a.partials - v * b.partials) / b.value)
    return np.stack([duals[r].partials for r in e.roots])


# ---------------------------------------------------------------------------
# tape compilation (shared with the scoring kernels and the integrator)

OP_CONST = 0
OP_VAR = 1
OP_NEG = 2
OP_INV = 3
OP_EXP = 4
OP_LOG = 5
OP_SIN = 6
OP_COS = 7
OP_TAN = 8
OP_SQRT = 9
OP_SQUARE = 10
OP_ADD = 11
OP_SUB = 12
OP_MUL = 13
OP_DIV = 14
OP_POW = 15

OPCODES = {
    "neg": OP_NEG,
    "inv": OP_INV,
    "exp": OP_EXP,
    "log": OP_LOG,
    "sin": OP_SIN,
    "cos": OP_COS,
    "tan": OP_TAN,
    "sqrt": OP_SQRT,
    "square": OP_SQUARE,
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "pow": OP_POW,
}


class Tape(NamedTuple):
    """Flat instruction encoding of an Expression.

    ``code[i]`` is the opcode; ``a1``/``a2`` are child indices (``a1`` holds
    the variable index for OP_VAR); ``cval[i]`` holds the constant value for
    OP_CONST nodes and the exponent for OP_POW nodes.
    """

    code: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    cval: np.ndarray
    roots: np.ndarray


def compile_tape(e: Expression) -> Tape:
    n = len(e.nodes)
    code = np.zeros(n, dtype=np.int32)
    a1 = np.zeros(n, dtype=np.int32)
    a2 = np.zeros(n, dtype=np.int32)
    cval = np.zeros(n, dtype=np.float64)
    for i, node in enumerate(e.nodes):
        if isinstance(node, Variable):
            code[i] = OP_VAR
            a1[i] = node.index
        elif isinstance(node, Constant):
            code[i] = OP_CONST
            cval[i] = float(node.value)
        elif isinstance(node, Unary):
            code[i] = OPCODES[node.op]
            a1[i] = node.child
        else:
            code[i] = OPCODES[node.op]
            a1[i] = node.left
            a2[i] = node.right
            if node.op == "pow":
                cval[i] = float(e.nodes[node.right].value)
    return Tape(code, a1, a2, cval, np.array(e.roots, dtype=np.int32))


def evaluate_batch(e: Expression, ts: np.ndarray, ys: np.ndarray):
    """Evaluate all roots at many points at once.

    Returns ``(values, err)`` where ``values`` has shape (n, n_outputs) and
    ``err`` is a boolean mask of points where evaluation hit a domain error.
    Values at flagged points are placeholders, not results.
    """
    vals, _, err = _batch_eval(e, ts, ys, with_grad=False)
    return vals, err


def gradient_batch(e: Expression, ts: np.ndarray, ys: np.ndarray):
    """Batch version of ``evaluate`` + ``gradient``.

    Returns ``(values, grads, err)`` with shapes (n, r), (n, r, d+1), (n,)
    where d = ys.shape[1].
    """
    return _batch_eval(e, ts, ys, with_grad=True)


def _batch_eval(e: Expression, ts, ys, with_grad: bool):
    ts = np.asarray(ts, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = ts.shape[0]
    dim = ys.shape[1] if ys.ndim == 2 else 0
    width = dim + 1
    err = np.zeros(n, dtype=bool)
    vals: list = [None] * len(e.nodes)
    grads: list = [None] * len(e.nodes) if with_grad else None

    def guard(v):
        bad = ~np.isfinite(v)
        if bad.any():
            err[bad] = True
            v = np.where(bad, 1.0, v)
        return v

    with np.errstate(all="ignore"):
        for i, node in enumerate(e.nodes):
            if isinstance(node, Variable):
                if node.index == 0:
                    v = ts.copy()
                else:
                    if node.index > dim:
                        raise ExprError(
                            f"variable y{node.index} exceeds data dimension {dim}"
                        )
                    v = ys[:, node.index - 1].copy()
                vals[i] = v
                if with_grad:
                    g = np.zeros((n, width))
                    g[:, node.index] = 1.0
                    grads[i] = g
                continue
            if isinstance(node, Constant):
                vals[i] = np.full(n, float(node.value))
                if with_grad:
                    grads[i] = np.zeros((n, width))
                continue
            if isinstance(node, Unary):
                x = vals[node.child]
                op = node.op
                if op == "neg":
                    v = -x
                    if with_grad:
                        g = -grads[node.child]
                elif op == "inv":
                    bad = np.abs(x) < DIV_GUARD
                    err[bad] = True
                    xs = np.where(bad, 1.0, x)
                    v = 1.0 / xs
                    if with_grad:
                        g = grads[node.child] * (-(v * v))[:, None]
                elif op == "exp":
                    v = guard(np.exp(x))
                    if with_grad:
                        g = grads[node.child] * v[:, None]
                elif op == "log":
                    bad = x <= 0.0
                    err[bad] = True
                    xs = np.where(bad, 1.0, x)
                    v = np.log(xs)
                    if with_grad:
                        g = grads[node.child] / xs[:, None]
                elif op == "sin":
                    v = np.sin(x)
                    if with_grad:
                        g = grads[node.child] * np.cos(x)[:, None]
                elif op == "cos":
                    v = np.cos(x)
                    if with_grad:
                        g = grads[node.child] * (-np.sin(x))[:, None]
                elif op == "tan":
                    v = guard(np.tan(x))
                    if with_grad:
                        g = grads[node.child] * (1.0 + v * v)[:, None]
                elif op == "sqrt":
                    bad = x < 0.0
                    err[bad] = True
                    xs = np.where(bad, 1.0, x)
                    v = np.sqrt(xs)
                    if with_grad:
                        den = 2.0 * v
                        badd = den < DIV_GUARD
                        err[badd] = True
                        g = grads[node.child] / np.where(badd, 1.0, den)[:, None]
                else:  # square
                    v = guard(x * x)
                    if with_grad:
                        g = grads[node.child] * (2.0 * x)[:, None]
                vals[i] = v
                if with_grad:
                    grads[i] = _guard_grad(g, err)
                continue
            a = vals[node.left]
            op = node.op
            if op == "pow":
                q = e.nodes[node.right].value
                qf = float(q)
                if q < 0:
                    bad = np.abs(a) < DIV_GUARD
                    if q == Fraction(-1, 2):
                        bad = bad | (a < 0.0)
                    err[bad] = True
                    xs = np.where(bad, 1.0, a)
                    if q == -1:
                        v = 1.0 / xs
                    elif q == -2:
                        v = 1.0 / (xs * xs)
                    elif q == -3:
                        v = 1.0 / (xs * xs * xs)
                    else:
                        v = 1.0 / np.sqrt(xs)
                elif q == Fraction(1, 2):
                    bad = a < 0.0
                    err[bad] = True
                    xs = np.where(bad, 1.0, a)
                    v = np.sqrt(xs)
                elif q == 2:
                    xs = a
                    v = a * a
                elif q == 3:
                    xs = a
                    v = a * a * a
                else:  # q == 4
                    xs = a
                    xx = a * a
                    v = xx * xx
                v = guard(v)
                if with_grad:
                    if q == 2:
                        slope = 2.0 * xs
                    elif q == 3:
                        slope = 3.0 * xs * xs
                    elif q == 4:
                        slope = 4.0 * xs * xs * xs
                    else:
                        if q > 0:  # 1/2: derivative blows up at 0
                            badd = np.abs(xs) < DIV_GUARD
                            err[badd] = True
                            xs = np.where(badd, 1.0, xs)
                            v = np.where(badd, 1.0, v)
                        slope = qf * v / xs
                    g = grads[node.left] * slope[:, None]
                vals[i] = v
                if with_grad:
                    grads[i] = _guard_grad(g, err)
                continue
            b = vals[node.right]
            if op == "add":
                v = guard(a + b)
                if with_grad:
                    g = grads[node.left] + grads[node.right]
            elif op == "sub":
                v = guard(a - b)
                if with_grad:
                    g = grads[node.left] - grads[node.right]
            elif op == "mul":
                v = guard(a * b)
                if with_grad:
                    g = grads[node.left] * b[:, None] + grads[node.right] * a[:, None]
            else:  # div
                bad = np.abs(b) < DIV_GUARD
                err[bad] = True
                bs = np.where(bad, 1.0, b)
                v = guard(a / bs)
                if with_grad:
                    g = (grads[node.left] - grads[node.right] * v[:, None]) / bs[:, None]
            vals[i] = v
            if with_grad:
                grads[i] = _guard_grad(g, err)

    out_vals = np.stack([vals[r] for r in e.roots], axis=1)
    out_grads = None
    if with_grad:
        out_grads = np.stack([grads[r] for r in e.roots], axis=1)
    return out_vals, out_grads, err


def _guard_grad(g: np.ndarray, err: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(g).all(axis=1)
    if bad.any():
        err[bad] = True
        g = np.where(bad[:, None], 0.0, g)
    return g


# ---------------------------------------------------------------------------
# symbolic differentiation


def diff_symbolic(e: Expression, var: int) -> Expression:
    """Symbolic derivative of every root with respect to variable ``var``
    (0 = t, k = y_k)."""
    b = DagBuilder()
    mapping = []
    for node in e.nodes:
        if isinstance(node, Unary):
            mapping.append(b.unary(node.op, mapping[node.child]))
        elif isinstance(node, Binary):
            mapping.append(b.binary(node.op, mapping[node.left], mapping[node.right]))
        elif isinstance(node, Variable):
            mapping.append(b.var(node.index))
        else:
            mapping.append(b.const(node.value))
    deriv: list = [None] * len(e.nodes)
    for i, node in enumerate(e.nodes):
        if isinstance(node, Variable):
            deriv[i] = b.const(1 if node.index == var else 0)
        elif isinstance(node, Constant):
            deriv[i] = b.const(0)
        elif isinstance(node, Unary):
            u, du = mapping[node.child], deriv[node.child]
            op = node.op
            if op == "neg":
                d = b.neg(du)
            elif op == "inv":
                d = b.neg(b.div(du, b.unary("square", u)))
            elif op == "exp":
                d = b.mul(b.unary("exp", u), du)
            elif op == "log":
                d = b.div(du, u)
            elif op == "sin":
                d = b.mul(b.unary("cos", u), du)
            elif op == "cos":
                d = b.neg(b.mul(b.unary("sin", u), du))
            elif op == "tan":
                d = b.div(du, b.unary("square", b.unary("cos", u)))
            elif op == "sqrt":
                d = b.div(du, b.mul(b.const(2), b.unary("sqrt", u)))
            else:  # square
                d = b.mul(b.const(2), b.mul(u, du))
            deriv[i] = d
        else:
            op = node.op
            l, r = mapping[node.left], mapping[node.right]
            dl, dr = deriv[node.left], deriv[node.right]
            if op == "add":
                d = b.add(dl, dr)
            elif op == "sub":
                d = b.sub(dl, dr)
            elif op == "mul":
                d = b.add(b.mul(dl, r), b.mul(l, dr))
            elif op == "div":
                num = b.sub(b.mul(dl, r), b.mul(l, dr))
                d = b.div(num, b.unary("square", r))
            else:  # pow with constant exponent: c * x^(c-1) * dx, kept
                # inside the restricted exponent set case by case
                q = e.nodes[node.right].value
                if q == 2:
                    body = b.mul(b.const(2), l)
                elif q == 3:
                    body = b.mul(b.const(3), b.unary("square", l))
                elif q == 4:
                    body = b.mul(b.const(4), b.binary("pow", l, b.const(3)))
                elif q == -1:
                    body = b.neg(b.binary("pow", l, b.const(-2)))
                elif q == -2:
                    body = b.mul(b.const(-2), b.binary("pow", l, b.const(-3)))
                elif q == -3:
                    body = b.mul(
                        b.const(-3), b.div(b.binary("pow", l, b.const(-3)), l)
                    )
                elif q == Fraction(1, 2):
                    body = b.div(
                        b.const(Fraction(1, 2)),
                        b.binary("pow", l, b.const(Fraction(1, 2))),
                    )
                else:  # -1/2
                    body = b.mul(
                        b.const(Fraction(-1, 2)),
                        b.div(b.binary("pow", l, b.const(Fraction(-1, 2))), l),
                    )
                d = b.mul(body, dl)
            deriv[i] = d
    return b.build([deriv[r] for r in e.roots])


# ---------------------------------------------------------------------------
# normal form: sum of products over exact rationals
#
# An NF is a dict {monomial: Fraction}.  A monomial is a sorted tuple of
# (atom, exponent) pairs with Fraction exponents.  Atoms:
#   ('v', k)            variable
#   ('f', op, argkey)   exp/log/sin/cos applied to a frozen NF
#   ('p', basekey)      a compound base (multi-term sum or an unresolvable
#                       power) raised to a non-unit exponent
# The empty monomial () is the constant term; the empty dict is zero.
# Every rewrite below is an identity on the evaluation domain of the input
# expression, so an empty NF certifies the expression is identically zero
# wherever it is defined.


def _order_key(obj):
    if isinstance(obj, tuple):
        return (2, tuple(_order_key(x) for x in obj))
    if isinstance(obj, str):
        return (1, obj)
    return (0, Fraction(obj))


def _freeze(nf: dict) -> tuple:
    return tuple(sorted(nf.items(), key=lambda kv: _order_key(kv[0])))


def _unfreeze(key: tuple) -> dict:
    return dict(key)


def nf_zero() -> dict:
    return {}


def nf_const(c) -> dict:
    c = Fraction(c)
    return {} if c == 0 else {(): c}


def nf_var(index: int) -> dict:
    return {((("v", index), Fraction(1)),): Fraction(1)}


def nf_add(a: dict, b: dict) -> dict:
    out = dict(a)
    for mono, c in b.items():
        s = out.get(mono, Fraction(0)) + c
        if s == 0:
            out.pop(mono, None)
        else:
            out[mono] = s
    return out


def nf_scale(a: dict, c) -> dict:
    c = Fraction(c)
    if c == 0:
        return {}
    return {mono: coeff * c for mono, coeff in a.items()}


def _mono_mul(m1: tuple, m2: tuple) -> tuple:
    exps = dict(m1)
    for atom, e in m2:
        s = exps.get(atom, Fraction(0)) + e
        if s == 0:
            exps.pop(atom, None)
        else:
            exps[atom] = s
    return tuple(sorted(exps.items(), key=lambda kv: _order_key(kv[0])))


def nf_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for m1, c1 in a.items():
        for m2, c2 in b.items():
            mono = _mono_mul(m1, m2)
            s = out.get(mono, Fraction(0)) + c1 * c2
            if s == 0:
                out.pop(mono, None)
            else:
                out[mono] = s
    return out


def _frac_gcd(a: Fraction, b: Fraction) -> Fraction:
    return Fraction(
        math.gcd(a.numerator, b.numerator), math.lcm(a.denominator, b.denominator)
    )


def _content_split(a: dict):
    """Write ``a = mult * base`` with base of content 1 and a positive
    leading coefficient (in canonical monomial order)."""
    items = sorted(a.items(), key=lambda kv: _order_key(kv[0]))
    content = Fraction(0)
    for _, c in items:
        content = _frac_gcd(content, abs(c))
    mult = content if items[0][1] > 0 else -content
    base = {mono: c / mult for mono, c in items}
    return base, mult


def _exact_root(c: Fraction, m: int):
    """Exact m-th root of a positive rational, or None."""
    def iroot(n: int):
        if n == 0:
            return 0
        r = round(n ** (1.0 / m))
        for cand in (r - 1, r, r + 1):
            if cand >= 0 and cand**m == n:
                return cand
        return None

    pn = iroot(c.numerator)
    pd = iroot(c.denominator)
    if pn is None or pd is None:
        return None
    return Fraction(pn, pd)


def _pow_atom(a: dict, q: Fraction) -> dict:
    atom = ("p", _freeze(a))
    return {((atom, q),): Fraction(1)}


def nf_pow(a: dict, q: Fraction) -> dict:
    q = Fraction(q)
    if q == 1:
        return dict(a)
    if q == 0:
        return nf_const(1)
    if not a:
        if q > 0:
            return {}
        return _pow_atom(a, q)  # inverse of zero: degenerate, never evaluable
    if q.denominator == 1:
        n = q.numerator
        if len(a) == 1:
            [(mono, c)] = a.items()
            new_mono = tuple(
                (atom, e * n) for atom, e in mono if e * n != 0
            )
            new_mono = tuple(sorted(new_mono, key=lambda kv: _order_key(kv[0])))
            return {new_mono: c**n}
        base, mult = _content_split(a)
        return nf_scale(_pow_atom(base, q), mult**n)
    # fractional exponent (denominator is a power of two by construction)
    if len(a) == 1:
        [(mono, c)] = a.items()
        if c > 0:
            # (x^e)^q -> x^(e*q) is unsound exactly when e is an even
            # integer and e*q is not (sqrt(x^2) = |x|, not x)
            def unsafe(e: Fraction) -> bool:
                eq = e * q
                even_in = e.denominator == 1 and e.numerator % 2 == 0
                even_out = eq.denominator == 1 and eq.numerator % 2 == 0
                return even_in and not even_out

            root = _exact_root(c, q.denominator)
            if root is not None and not any(unsafe(e) for _, e in mono):
                coeff = root**q.numerator
                new_mono = tuple(
                    sorted(
                        ((atom, e * q) for atom, e in mono),
                        key=lambda kv: _order_key(kv[0]),
                    )
                )
                return {new_mono: coeff}
        return _pow_atom(a, q)
    base, mult = _content_split(a)
    if mult > 0:
        root = _exact_root(mult, q.denominator)
        if root is not None:
            return nf_scale(_pow_atom(base, q), root**q.numerator)
    return _pow_atom(a, q)


def _nf_fn(op: str, a: dict) -> dict:
    one = Fraction(1)
    if op == "exp":
        if not a:
            return nf_const(1)
        out = nf_const(1)
        for mono, c in a.items():
            if len(mono) == 1 and mono[0][1] == 1:
                atom = mono[0][0]
                if atom[0] == "f" and atom[1] == "log":
                    # exp(c*log(u)) = u^c on log's domain (u > 0)
                    out = nf_mul(out, nf_pow(_unfreeze(atom[2]), c))
                    continue
            atom = ("f", "exp", _freeze({mono: one}))
            out = nf_mul(out, {((atom, c),): one})
        return out
    if op == "log":
        if len(a) == 1:
            [(mono, c)] = a.items()
            if c == 1:
                if mono == ():
                    return {}  # log(1) = 0
                if len(mono) == 1 and mono[0][0][0] == "f" and mono[0][0][1] == "exp":
                    # log(exp(m)^e) = e*m; exp(..) > 0 keeps this sound
                    atom, e = mono[0]
                    return nf_scale(_unfreeze(atom[2]), e)
        return {((("f", "log", _freeze(a)), one),): one}
    # sin / cos with odd/even sign normalization
    if not a:
        return {} if op == "sin" else nf_const(1)
    items = sorted(a.items(), key=lambda kv: _order_key(kv[0]))
    sign = 1 if items[0][1] > 0 else -1
    arg = a if sign > 0 else nf_scale(a, -1)
    atom = ("f", op, _freeze(arg))
    coeff = one if (op == "cos" or sign > 0) else -one
    return {((atom, one),): coeff}


def normal_forms(e: Expression) -> list:
    """Normal form of every root (list of NF dicts)."""
    memo: list = [None] * len(e.nodes)
    for i, node in enumerate(e.nodes):
        if isinstance(node, Variable):
            memo[i] = nf_var(node.index)
        elif isinstance(node, Constant):
            memo[i] = nf_const(node.value)
        elif isinstance(node, Unary):
            x = memo[node.child]
            op = node.op
            if op == "neg":
                memo[i] = nf_scale(x, -1)
            elif op == "inv":
                memo[i] = nf_pow(x, Fraction(-1))
            elif op == "square":
                memo[i] = nf_pow(x, Fraction(2))
            elif op == "sqrt":
                memo[i] = nf_pow(x, Fraction(1, 2))
            elif op == "tan":
                memo[i] = nf_mul(_nf_fn("sin", x), nf_pow(_nf_fn("cos", x), Fraction(-1)))
            else:
                memo[i] = _nf_fn(op, x)
        else:
            op = node.op
            x = memo[node.left]
            if op == "pow":
                memo[i] = nf_pow(x, e.nodes[node.right].value)
            else:
                z = memo[node.right]
                if op == "add":
                    memo[i] = nf_add(x, z)
                elif op == "sub":
                    memo[i] = nf_add(x, nf_scale(z, -1))
                elif op == "mul":
                    memo[i] = nf_mul(x, z)
                else:  # div
                    memo[i] = nf_mul(x, nf_pow(z, Fraction(-1)))
    return [memo[r] for r in e.roots]


def nf_is_zero(nf: dict) -> bool:
    return not nf


def _int_pow_build(b: DagBuilder, base: int, n: int) -> int:
    if n < 0:
        return b.unary("inv", _int_pow_build(b, base, -n))
    if n == 1:
        return base
    if n <= 4:
        return b.binary("pow", base, b.const(n))
    if n % 2 == 0:
        return b.binary("pow", _int_pow_build(b, base, n // 2), b.const(2))
    return b.mul(_int_pow_build(b, base, n - 1), base)


def _pow_build(b: DagBuilder, base: int, e: Fraction) -> int:
    if e == 1:
        return base
    den = e.denominator
    if den == 1:
        return _int_pow_build(b, base, e.numerator)
    k = den.bit_length() - 1
    if den == 1 << k:
        node = base
        for _ in range(k):
            node = b.unary("sqrt", node)
        return _int_pow_build(b, node, e.numerator)
    # non-dyadic exponent: only expressible through exp/log
    return b.unary("exp", b.mul(b.const(e), b.unary("log", base)))


def _atom_build(b: DagBuilder, atom: tuple, e: Fraction) -> int:
    kind = atom[0]
    if kind == "v":
        return _pow_build(b, b.var(atom[1]), e)
    if kind == "p":
        return _pow_build(b, nf_build(b, _unfreeze(atom[1])), e)
    op, argkey = atom[1], atom[2]
    if op == "exp":
        # exp(m)^e folds into the argument exactly
        return b.unary("exp", nf_build(b, nf_scale(_unfreeze(argkey), e)))
    return _pow_build(b, b.unary(op, nf_build(b, _unfreeze(argkey))), e)


def _term_build(b: DagBuilder, mono: tuple, coeff: Fraction) -> int:
    if mono == ():
        return b.const(coeff)
    num, den = [], []
    for atom, e in mono:
        (num if e > 0 else den).append((atom, e))
    if coeff != 1 or not num:
        node = b.const(coeff)
        for atom, e in num:
            node = b.mul(node, _atom_build(b, atom, e))
    else:
        node = _atom_build(b, num[0][0], num[0][1])
        for atom, e in num[1:]:
            node = b.mul(node, _atom_build(b, atom, e))
    for atom, e in den:
        node = b.div(node, _atom_build(b, atom, -e))
    return node


def nf_build(b: DagBuilder, nf: dict) -> int:
    """Rebuild an NF into the builder; returns the root node index."""
    if not nf:
        return b.const(0)
    items = sorted(nf.items(), key=lambda kv: _order_key(kv[0]))
    node = None
    for mono, coeff in items:
        negative = coeff < 0
        part = _term_build(b, mono, -coeff if negative else coeff)
        if node is None:
            node = b.neg(part) if negative else part
        elif negative:
            node = b.sub(node, part)
        else:
            node = b.add(node, part)
    return node


def simplify(e: Expression) -> Expression:
    """Canonicalize through the rational normal form.

    Subsumes constant folding, identity elimination (x+0, x*1, x*0, x-x,
    x/x), and sign flattening; expressions that are identically zero on
    their domain fold to the constant 0.
    """
    b = DagBuilder()
    return b.build([nf_build(b, nf) for nf in normal_forms(e)])


def is_zero(e: Expression) -> bool:
    """True iff every root folds to the constant 0 in normal form."""
    return all(nf_is_zero(nf) for nf in normal_forms(e))
