"""Expression DAG nodes, exact differentiation and numpy code generation.

Nodes are immutable and carry a precomputed structural hash, so identical
subexpressions compare and hash cheaply. That lets the code generator share
common subexpressions, which matters for the residual trees produced by
repeated differentiation.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

UNARY_OPS = frozenset(
    {"sin", "cos", "exp", "log", "sqrt", "square", "neg", "abs", "relu", "step", "sign"}
)
BINARY_OPS = frozenset({"add", "sub", "mul", "div", "max"})
COMMUTATIVE_OPS = frozenset({"add", "mul", "max"})

DIV_GUARD = 1e-12


class UnsupportedOperatorError(ValueError):
    """Raised when an operator has no derivative or evaluation rule."""


class Node:
    __slots__ = ("op", "args", "value", "_hash")

    def __init__(self, op: str, args: tuple = (), value=None):
        self.op = op
        self.args = args
        self.value = value
        self._hash = hash((op, value, args))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Node) or self._hash != other._hash:
            return False
        return self.op == other.op and self.value == other.value and self.args == other.args

    def __repr__(self):
        if self.op == "num":
            return repr(self.value)
        if self.op == "var":
            return self.value
        return f"{self.op}({', '.join(map(repr, self.args))})"

    @property
    def is_num(self) -> bool:
        return self.op == "num"


def num(value: float) -> Node:
    value = float(value)
    if value == 0.0:
        value = 0.0  # drop the sign of -0.0
    return Node("num", (), value)


def var(name: str) -> Node:
    return Node("var", (), name)


ZERO = num(0.0)
ONE = num(1.0)


def _is(node: Node, value: float) -> bool:
    return node.op == "num" and node.value == value


def _fold(value: float) -> Node | None:
    return num(value) if math.isfinite(value) else None


def add(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if a.is_num and b.is_num:
        return _fold(a.value + b.value) or Node("add", (a, b))
    return Node("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    if a == b:
        return ZERO
    if a.is_num and b.is_num:
        return _fold(a.value - b.value) or Node("sub", (a, b))
    return Node("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    if a.is_num and b.is_num:
        return _fold(a.value * b.value) or Node("mul", (a, b))
    return Node("mul", (a, b))


def div(a: Node, b: Node) -> Node:
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    if a.is_num and b.is_num and abs(b.value) >= DIV_GUARD:
        return _fold(a.value / b.value) or Node("div", (a, b))
    return Node("div", (a, b))


def neg(a: Node) -> Node:
    if a.is_num:
        return num(-a.value)
    if a.op == "neg":
        return a.args[0]
    return Node("neg", (a,))


def maximum(a: Node, b: Node) -> Node:
    if a.is_num and b.is_num:
        return num(max(a.value, b.value))
    return Node("max", (a, b))


_SCALAR_UNARY: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "square": lambda v: v * v,
    "abs": abs,
    "relu": lambda v: max(v, 0.0),
    "step": lambda v: 1.0 if v > 0 else 0.0,
    "sign": lambda v: float(np.sign(v)),
}


def unary(op: str, a: Node) -> Node:
    if op == "neg":
        return neg(a)
    if op not in UNARY_OPS:
        raise UnsupportedOperatorError(f"unknown unary operator {op!r}")
    if a.is_num:
        try:
            return _fold(_SCALAR_UNARY[op](a.value)) or Node(op, (a,))
        except (ValueError, OverflowError):
            return Node(op, (a,))
    return Node(op, (a,))


_BINARY_BUILDERS = {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}


def apply(op: str, *args: Node) -> Node:
    """Build ``op(*args)`` with light algebraic simplification."""
    if op in _BINARY_BUILDERS:
        return _BINARY_BUILDERS[op](*args)
    return unary(op, *args)


def free_vars(node: Node) -> set[str]:
    out: set[str] = set()
    seen: set[int] = set()
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op == "var":
            out.add(n.value)
        stack.extend(n.args)
    return out


def substitute(node: Node, mapping: Mapping[str, Node], memo: dict | None = None) -> Node:
    """Replace variables by expressions, rebuilding with simplification."""
    if memo is None:
        memo = {}
    hit = memo.get(node)
    if hit is not None:
        return hit
    if node.op == "var":
        out = mapping.get(node.value, node)
    elif node.op == "num":
        out = node
    else:
        out = apply(node.op, *(substitute(a, mapping, memo) for a in node.args))
    memo[node] = out
    return out


def differentiate(node: Node, wrt: str, memo: dict | None = None) -> Node:
    """Exact derivative of ``node`` with respect to the variable ``wrt``.

    Kink conventions: abs'(0) = relu'(0) = 0, and the derivative of max picks
    neither branch on ties.
    """
    if memo is None:
        memo = {}
    hit = memo.get(node)
    if hit is not None:
        return hit
    op = node.op
    if op == "num":
        out = ZERO
    elif op == "var":
        out = ONE if node.value == wrt else ZERO
    elif op in ("step", "sign"):
        out = ZERO
    else:
        args = node.args
        d = [differentiate(a, wrt, memo) for a in args]
        if all(_is(x, 0.0) for x in d):
            out = ZERO
        elif op == "add":
            out = add(d[0], d[1])
        elif op == "sub":
            out = sub(d[0], d[1])
        elif op == "mul":
            out = add(mul(d[0], args[1]), mul(args[0], d[1]))
        elif op == "div":
            a, b = args
            out = sub(div(d[0], b), div(mul(a, d[1]), mul(b, b)))
        elif op == "max":
            a, b = args
            out = add(
                mul(unary("step", sub(a, b)), d[0]),
                mul(unary("step", sub(b, a)), d[1]),
            )
        else:
            a, da = args[0], d[0]
            if op == "sin":
                inner = unary("cos", a)
            elif op == "cos":
                inner = neg(unary("sin", a))
            elif op == "exp":
                inner = node
            elif op == "log":
                out = div(da, a)
                memo[node] = out
                return out
            elif op == "sqrt":
                out = div(da, mul(num(2.0), node))
                memo[node] = out
                return out
            elif op == "square":
                inner = mul(num(2.0), a)
            elif op == "neg":
                inner = num(-1.0)
            elif op == "abs":
                inner = unary("sign", a)
            elif op == "relu":
                inner = unary("step", a)
            else:
                raise UnsupportedOperatorError(f"no derivative rule for {op!r}")
            out = mul(inner, da)
    memo[node] = out
    return out


# ---------------------------------------------------------------------------
# numpy code generation


def _div_guarded(a, b):
    out = np.divide(a, b)
    return np.where(np.abs(b) < DIV_GUARD, np.nan, out)


_TEMPLATES = {
    "add": "{0} + {1}",
    "sub": "{0} - {1}",
    "mul": "{0} * {1}",
    "div": "_div({0}, {1})",
    "max": "_np.maximum({0}, {1})",
    "sin": "_np.sin({0})",
    "cos": "_np.cos({0})",
    "exp": "_np.exp({0})",
    "log": "_np.log({0})",
    "sqrt": "_np.sqrt({0})",
    "square": "{0} * {0}",
    "neg": "-{0}",
    "abs": "_np.abs({0})",
    "relu": "_np.maximum({0}, 0.0)",
    "step": "_np.where({0} > 0.0, 1.0, 0.0)",
    "sign": "_np.sign({0})",
}


@lru_cache(maxsize=8192)
def compile_nodes(nodes: tuple[Node, ...]) -> Callable[[Mapping[str, object]], list]:
    """Compile several expressions into one function sharing subexpressions.

    The returned function takes a mapping of variable name to scalar/array and
    returns a list of results, one per input node. Floating point warnings are
    suppressed; non-finite values propagate as nan/inf.
    """
    names: dict[Node, str] = {}
    lines: list[str] = []

    def visit(n: Node) -> str:
        name = names.get(n)
        if name is not None:
            return name
        if n.op == "num":
            names[n] = repr(n.value)
            return names[n]
        if n.op == "var":
            expr = f"env[{n.value!r}]"
        else:
            template = _TEMPLATES.get(n.op)
            if template is None:
                raise UnsupportedOperatorError(f"cannot evaluate operator {n.op!r}")
            expr = template.format(*(visit(a) for a in n.args))
        name = f"v{len(lines)}"
        lines.append(f"    {name} = {expr}")
        names[n] = name
        return name

    outs = [visit(n) for n in nodes]
    src = "def _f(env):\n" + "\n".join(lines) + f"\n    return [{', '.join(outs)}]\n"
    scope = {"_np": np, "_div": _div_guarded}
    exec(compile(src, "<symplex-expr>", "exec"), scope)
    fn = scope["_f"]

    def run(env):
        with np.errstate(all="ignore"):
            return fn(env)

    run.source = src
    return run


def evaluate_nodes(nodes: Sequence[Node], env: Mapping[str, object]) -> list:
    return compile_nodes(tuple(nodes))(env)


def iter_nodes(node: Node) -> Iterable[Node]:
    """Pre-order traversal (tree semantics; shared nodes visited repeatedly)."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.args))
