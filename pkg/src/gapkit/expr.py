"""Arithmetic expressions in the state variables x1..xk.

The driving nonlinearity is supplied by the user as an infix expression
(e.g. ``"200*x1 + sin(x2)"``).  This module parses it into a small AST,
evaluates it together with exact first partial derivatives (forward-mode
dual numbers, vectorized over sample batches), and samples derivative
bounds over a box.  Bounds are sampled, not rigorous enclosures.

Grammar: ``+ - * /`` with the usual precedence, ``^`` is right-associative
and restricted to integer exponents, unary minus, parentheses, and the
function calls ``sin cos tanh exp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

import numpy as np


class ExpressionError(ValueError):
    """Base class for expression parsing/evaluation failures."""


class ParseError(ExpressionError):
    """Malformed expression text; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvalDomainError(ExpressionError):
    """Evaluation left the domain of some node (e.g. division by zero)."""


FUNCTIONS = ("sin", "cos", "tanh", "exp")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Bin:
    op: str  # one of + - * / ^
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Const, Var, Bin, Neg, Call]
ExprAST = Node


# ---------------------------------------------------------------------------
# parsing


@dataclass
class _Token:
    kind: str  # num | name | op | lparen | rparen | end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            seen_e = False
            while j < n and (text[j].isdigit() or text[j] == "."
                             or text[j] in "eE"
                             or (seen_e and text[j] in "+-" and text[j - 1] in "eE")):
                if text[j] in "eE":
                    seen_e = True
                j += 1
            tokens.append(_Token("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("name", text[i:j], i))
            i = j
            continue
        if c in "+-*/^":
            tokens.append(_Token("op", c, i))
            i += 1
            continue
        if c == "(":
            tokens.append(_Token("lparen", c, i))
            i += 1
            continue
        if c == ")":
            tokens.append(_Token("rparen", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    """Pratt parser; `^` binds tightest and associates to the right."""

    def __init__(self, text: str, k: int):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.k = k

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.expression(0)
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected {tok.text!r}", tok.pos)
        return node

    def expression(self, min_bp: int) -> Node:
        node = self.atom()
        while True:
            tok = self.peek()
            if tok.kind != "op":
                break
            lbp = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30}[tok.text]
            if lbp < min_bp:
                break
            self.advance()
            # right-associative: do not raise the binding power for ^
            rbp = lbp if tok.text == "^" else lbp + 1
            right = self.expression(rbp)
            if tok.text == "^":
                right = self._require_int_exponent(right, tok.pos)
            node = Bin(tok.text, node, right)
        return node

    def atom(self) -> Node:
        tok = self.advance()
        if tok.kind == "num":
            try:
                return Const(float(tok.text))
            except ValueError:
                raise ParseError(f"bad number literal {tok.text!r}", tok.pos) from None
        if tok.kind == "op" and tok.text == "-":
            return Neg(self.expression(25))
        if tok.kind == "op" and tok.text == "+":
            return self.expression(25)
        if tok.kind == "lparen":
            node = self.expression(0)
            closing = self.advance()
            if closing.kind != "rparen":
                raise ParseError("unbalanced parenthesis", closing.pos)
            return node
        if tok.kind == "name":
            name = tok.text
            if name in FUNCTIONS:
                opening = self.advance()
                if opening.kind != "lparen":
                    raise ParseError(f"{name} requires parentheses", opening.pos)
                arg = self.expression(0)
                closing = self.advance()
                if closing.kind != "rparen":
                    raise ParseError("unbalanced parenthesis", closing.pos)
                return Call(name, arg)
            if name[0] == "x" and name[1:].isdigit():
                index = int(name[1:])
                if not 1 <= index <= self.k:
                    raise ParseError(
                        f"variable {name} out of range for k={self.k}", tok.pos)
                return Var(index)
            raise ParseError(f"unknown identifier {name!r}", tok.pos)
        raise ParseError(f"unexpected {tok.text or 'end of input'!r}", tok.pos)

    @staticmethod
    def _require_int_exponent(node: Node, pos: int) -> Node:
        inner = node.arg if isinstance(node, Neg) else node
        if not (isinstance(inner, Const) and float(inner.value).is_integer()):
            raise ParseError("exponent of ^ must be an integer literal", pos)
        return node


def parse_expression(text: str, k: int) -> Node:
    """Parse ``text`` as an expression in x1..xk.

    Raises :class:`ParseError` (with position) on malformed input, unknown
    identifiers, or variable indices exceeding ``k``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return _Parser(text, k).parse()


def max_var_index(node: Node) -> int:
    if isinstance(node, Var):
        return node.index
    if isinstance(node, Const):
        return 0
    if isinstance(node, Neg):
        return max_var_index(node.arg)
    if isinstance(node, Call):
        return max_var_index(node.arg)
    return max(max_var_index(node.left), max_var_index(node.right))


def to_text(node: Node) -> str:
    """Render the AST back to parseable infix text (fully parenthesized)."""
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({to_text(node.arg)})"
    if node.op == "^":
        return f"({to_text(node.left)})^{to_text(node.right)}"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


# ---------------------------------------------------------------------------
# evaluation


def _exponent_value(node: Node) -> int:
    if isinstance(node, Neg):
        return -_exponent_value(node.arg)
    assert isinstance(node, Const)
    return int(node.value)


def _dual(node: Node, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate value and gradient at points ``x`` of shape (N, k)."""
    n, k = x.shape
    if isinstance(node, Const):
        return np.full(n, node.value), np.zeros((n, k))
    if isinstance(node, Var):
        grad = np.zeros((n, k))
        grad[:, node.index - 1] = 1.0
        return x[:, node.index - 1].copy(), grad
    if isinstance(node, Neg):
        v, g = _dual(node.arg, x)
        return -v, -g
    if isinstance(node, Call):
        v, g = _dual(node.arg, x)
        if node.func == "sin":
            return np.sin(v), np.cos(v)[:, None] * g
        if node.func == "cos":
            return np.cos(v), -np.sin(v)[:, None] * g
        if node.func == "tanh":
            t = np.tanh(v)
            return t, (1.0 - t * t)[:, None] * g
        if node.func == "exp":
            e = np.exp(v)
            return e, e[:, None] * g
        raise EvalDomainError(f"unknown function {node.func}")
    lv, lg = _dual(node.left, x)
    if node.op == "^":
        p = _exponent_value(node.right)
        if p == 0:
            return np.ones(n), np.zeros((n, k))
        return lv ** p, (p * lv ** (p - 1))[:, None] * lg
    rv, rg = _dual(node.right, x)
    if node.op == "+":
        return lv + rv, lg + rg
    if node.op == "-":
        return lv - rv, lg - rg
    if node.op == "*":
        return lv * rv, rv[:, None] * lg + lv[:, None] * rg
    if node.op == "/":
        inv = 1.0 / rv
        val = lv * inv
        return val, (lg - val[:, None] * rg) * inv[:, None]
    raise EvalDomainError(f"unknown operator {node.op}")


def dual_batch(node: Node, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and gradients at ``points`` (N, k); exact up to rounding."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must have shape (N, k)")
    with np.errstate(all="ignore"):
        val, grad = _dual(node, pts)
    if not (np.isfinite(val).all() and np.isfinite(grad).all()):
        raise EvalDomainError("expression evaluation left its domain")
    return val, grad


def evaluate_with_gradient(node: Node, point: Sequence[float]) -> tuple[float, np.ndarray]:
    """Value and exact gradient at one point (dual numbers, no differencing)."""
    pt = np.atleast_2d(np.asarray(point, dtype=float))
    val, grad = dual_batch(node, pt)
    return float(val[0]), grad[0]


def evaluate(node: Node, point: Sequence[float]) -> float:
    pt = np.atleast_2d(np.asarray(point, dtype=float))
    with np.errstate(all="ignore"):
        val, _ = _dual(node, pt)
    if not np.isfinite(val[0]):
        raise EvalDomainError("expression evaluation left its domain")
    return float(val[0])


# ---------------------------------------------------------------------------
# compiled evaluators (hot paths: simulation steps, vectorized sweeps)


def _codegen(node: Node, prefix: str) -> str:
    if isinstance(node, Const):
        return repr(node.value)
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Neg):
        return f"(-{_codegen(node.arg, prefix)})"
    if isinstance(node, Call):
        return f"{prefix}{node.func}({_codegen(node.arg, prefix)})"
    if node.op == "^":
        return f"({_codegen(node.left, prefix)})**({_exponent_value(node.right)})"
    return f"({_codegen(node.left, prefix)} {node.op} {_codegen(node.right, prefix)})"


def compile_scalar(node: Node, k: int) -> Callable[..., float]:
    """Compile to a fast scalar callable ``f(x1, ..., xk) -> float``."""
    args = ", ".join(f"x{i}" for i in range(1, k + 1))
    src = f"lambda {args}: {_codegen(node, 'm.')}"
    return eval(src, {"m": math})  # generated from the validated AST only


def compile_batch(node: Node, k: int) -> Callable[[np.ndarray], np.ndarray]:
    """Compile to a vectorized callable on points of shape (..., k)."""
    args = ", ".join(f"x{i}" for i in range(1, k + 1))
    src = f"lambda {args}: {_codegen(node, 'np.')}"
    fn = eval(src, {"np": np})

    def batch(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        cols = tuple(pts[..., i] for i in range(k))
        with np.errstate(all="ignore"):
            out = np.asarray(fn(*cols), dtype=float)
        if out.shape != pts.shape[:-1]:
            out = np.broadcast_to(out, pts.shape[:-1]).copy()
        return out

    return batch


# ---------------------------------------------------------------------------
# sampled derivative bounds


@dataclass(frozen=True)
class DerivativeBounds:
    """Sampled extrema of the expression and its derivatives over a box.

    ``grad_sq_min/max`` hold per-axis extrema of the squared partials;
    ``grad_norm_max`` is the largest Euclidean gradient norm seen;
    ``hess_norm_max`` the largest Hessian spectral norm;
    ``grad1_hess_norm_max`` the largest norm of the gradient of the first
    partial.  All extrema are over the closed sample grid, so they are inner
    approximations of the true suprema/infima.
    """

    grad_sq_min: np.ndarray
    grad_sq_max: np.ndarray
    grad_norm_max: float
    hess_norm_max: float
    grad1_hess_norm_max: float
    phi_min: float
    phi_max: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.grad_norm_max, self.hess_norm_max,
                self.grad1_hess_norm_max, self.phi_min, self.phi_max]
        if not (np.isfinite(self.grad_sq_min).all()
                and np.isfinite(self.grad_sq_max).all()
                and all(math.isfinite(v) for v in vals)):
            raise EvalDomainError("non-finite derivative bound")
        if (self.grad_sq_min > self.grad_sq_max + 1e-15).any() or self.phi_min > self.phi_max:
            raise ValueError("bound minimum exceeds maximum")


def _grid_nodes(box: Sequence[tuple[float, float]], res: Sequence[int]) -> np.ndarray:
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(box, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def sampled_derivative_bounds(
    node: Node,
    box: Sequence[tuple[float, float]],
    resolution: Union[int, Sequence[int]] = 33,
    chunk: int = 1 << 17,
) -> DerivativeBounds:
    """Sample value/derivative extrema on a closed tensor grid over ``box``.

    Grid nodes include the box endpoints, so boundary extrema of monotone
    derivatives are captured.  Second derivatives come from central
    differences of the exact dual-number gradients with per-axis step
    ``width / (10 * resolution)``; the choice is recorded in ``metadata``.
    """
    k = len(box)
    if max_var_index(node) > k:
        raise ValueError("expression references a variable beyond the box dimension")
    res = [resolution] * k if isinstance(resolution, int) else list(resolution)
    if len(res) != k or any(r < 2 for r in res):
        raise ValueError("resolution must be >= 2 per axis")
    steps = np.array([(hi - lo) / (10.0 * r) for (lo, hi), r in zip(box, res)])

    nodes = _grid_nodes(box, res)
    grad_sq_min = np.full(k, np.inf)
    grad_sq_max = np.full(k, -np.inf)
    phi_min, phi_max = np.inf, -np.inf
    grad_norm_max = 0.0
    hess_norm_max = 0.0
    grad1_hess_norm_max = 0.0

    for start in range(0, nodes.shape[0], chunk):
        pts = nodes[start:start + chunk]
        val, grad = dual_batch(node, pts)
        phi_min = min(phi_min, val.min())
        phi_max = max(phi_max, val.max())
        gsq = grad * grad
        grad_sq_min = np.minimum(grad_sq_min, gsq.min(axis=0))
        grad_sq_max = np.maximum(grad_sq_max, gsq.max(axis=0))
        grad_norm_max = max(grad_norm_max, float(np.sqrt(gsq.sum(axis=1).max())))

        hess = np.empty((pts.shape[0], k, k))
        for i in range(k):
            shift = np.zeros(k)
            shift[i] = steps[i]
            _, gp = dual_batch(node, pts + shift)
            _, gm = dual_batch(node, pts - shift)
            hess[:, :, i] = (gp - gm) / (2.0 * steps[i])
        hess_sym = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        spec = np.abs(np.linalg.eigvalsh(hess_sym)).max(axis=1)
        hess_norm_max = max(hess_norm_max, float(spec.max()))
        row1 = np.sqrt((hess[:, 0, :] ** 2).sum(axis=1))
        grad1_hess_norm_max = max(grad1_hess_norm_max, float(row1.max()))

    return DerivativeBounds(
        grad_sq_min=grad_sq_min,
        grad_sq_max=grad_sq_max,
        grad_norm_max=grad_norm_max,
        hess_norm_max=hess_norm_max,
        grad1_hess_norm_max=grad1_hess_norm_max,
        phi_min=float(phi_min),
        phi_max=float(phi_max),
        metadata={
            "resolution": res,
            "hessian_method": "central-differences-of-forward-gradients",
            "fd_steps": steps.tolist(),
            "note": "sampled extrema on a closed grid; not rigorous enclosures",
        },
    )
