"""Sum-of-monomials normal form used for skeleton comparison.

This is deliberately small: polynomial expansion, like-term collection,
exponential merging, odd/even sign normalisation for sin/cos/abs, and
snapping of coefficients to nearby simple rationals. It is enough to tell
whether two expressions share a skeleton once constants are abstracted.
"""

from __future__ import annotations

import math
from fractions import Fraction

from .symbolic import Node

SNAP_TOL = 1e-6
MAX_DENOMINATOR = 12
MAX_TERMS = 4000

# A polynomial maps monomials to coefficients. A monomial is a sorted tuple
# of (atom, power) pairs. Atoms are ("var", name), ("nan",) or
# (function, frozen-argument) where frozen polys are sorted item tuples.


class SimplifyOverflow(RuntimeError):
    pass


def snap(c: float) -> float:
    if not math.isfinite(c):
        return c
    if abs(c) < SNAP_TOL:
        return 0.0
    frac = Fraction(c).limit_denominator(MAX_DENOMINATOR)
    if abs(c - float(frac)) < SNAP_TOL:
        return float(frac)
    return c


def _clean(poly: dict) -> dict:
    out = {}
    for mono, c in poly.items():
        c = snap(c)
        if c != 0.0:
            out[mono] = c
    if len(out) > MAX_TERMS:
        raise SimplifyOverflow("expansion too large")
    return out


def const(c: float) -> dict:
    return _clean({(): float(c)})


def freeze(poly: dict) -> tuple:
    return tuple(sorted(poly.items()))


def thaw(frozen: tuple) -> dict:
    return dict(frozen)


def _as_const(poly: dict) -> float | None:
    if not poly:
        return 0.0
    if len(poly) == 1 and () in poly:
        return poly[()]
    return None


def add(a: dict, b: dict) -> dict:
    out = dict(a)
    for mono, c in b.items():
        out[mono] = out.get(mono, 0.0) + c
    return _clean(out)


def scale(a: dict, s: float) -> dict:
    return _clean({m: c * s for m, c in a.items()})


def _mono_mul(m1: tuple, m2: tuple) -> tuple[tuple, float]:
    powers: dict = {}
    for atom, p in m1 + m2:
        powers[atom] = powers.get(atom, 0) + p
    exps = [(atom, p) for atom, p in powers.items() if atom[0] == "exp"]
    coeff = 1.0
    if len(exps) > 1 or (exps and exps[0][1] != 1):
        arg: dict = {}
        for atom, p in exps:
            del powers[atom]
            arg = add(arg, scale(thaw(atom[1]), p))
        coeff, atom = _exp_atom(arg)
        if atom is not None:
            powers[atom] = 1
    mono = tuple(sorted((a, p) for a, p in powers.items() if p != 0))
    return mono, coeff


def mul(a: dict, b: dict) -> dict:
    if len(a) * len(b) > MAX_TERMS:
        raise SimplifyOverflow("expansion too large")
    out: dict = {}
    for m1, c1 in a.items():
        for m2, c2 in b.items():
            mono, k = _mono_mul(m1, m2)
            out[mono] = out.get(mono, 0.0) + c1 * c2 * k
    return _clean(out)


def _atom(atom) -> dict:
    return {((atom, 1),): 1.0}


def _exp_atom(arg: dict):
    """Split exp(arg) into (coefficient, atom or None)."""
    c0 = arg.get((), 0.0)
    rest = {m: c for m, c in arg.items() if m != ()}
    coeff = math.exp(c0) if c0 else 1.0
    if not rest:
        return coeff, None
    return coeff, ("exp", freeze(rest))


def _leading_sign(poly: dict) -> float:
    for mono, c in sorted(poly.items()):
        if mono != ():
            return math.copysign(1.0, c)
    return 1.0


def _divide(a: dict, b: dict) -> dict:
    cb = _as_const(b)
    if cb is not None:
        if abs(cb) < 1e-12:
            return _atom(("nan",))
        return scale(a, 1.0 / cb)
    if len(b) == 1:
        ((mono, c),) = b.items()
        # inverting inv(f)^p gives back f^p
        back = [(atom, p) for atom, p in mono if atom[0] == "inv" and p > 0]
        inv = {tuple((atom, -p) for atom, p in mono if (atom, p) not in back): 1.0 / c}
        # exp atoms invert by negating their argument
        out = mul(a, _fix_exp(inv))
        for atom, p in back:
            for _ in range(p):
                out = mul(out, thaw(atom[1]))
        return out
    lead = next(c for m, c in sorted(b.items()) if m != ())
    normed = scale(b, 1.0 / lead)
    return scale(mul(a, _atom(("inv", freeze(normed)))), 1.0 / lead)


def _fix_exp(poly: dict) -> dict:
    out: dict = {}
    for mono, c in poly.items():
        m, k = _mono_mul(mono, ())
        out[m] = out.get(m, 0.0) + c * k
    return _clean(out)


_UNARY_NUMERIC = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
    "relu": lambda v: max(v, 0.0),
    "step": lambda v: 1.0 if v > 0 else 0.0,
    "sign": lambda v: math.copysign(1.0, v) if v else 0.0,
}


def _unary(op: str, a: dict) -> dict:
    if op == "neg":
        return scale(a, -1.0)
    if op == "square":
        return mul(a, a)
    c = _as_const(a)
    if c is not None:
        try:
            return const(_UNARY_NUMERIC[op](c))
        except (ValueError, OverflowError):
            return _atom(("nan",))
    if op == "exp":
        coeff, atom = _exp_atom(a)
        return scale(_atom(atom), coeff)
    if op in ("sin", "sign"):
        s = _leading_sign(a)
        return scale(_atom((op, freeze(scale(a, s)))), s)
    if op in ("cos", "abs"):
        return _atom((op, freeze(scale(a, _leading_sign(a)))))
    return _atom((op, freeze(a)))


def from_node(node: Node) -> dict:
    """Normal form of a symbolic node."""
    memo: dict = {}

    def go(n: Node) -> dict:
        hit = memo.get(n)
        if hit is not None:
            return hit
        if n.op == "num":
            out = const(n.value) if math.isfinite(n.value) else _atom(("nan",))
        elif n.op == "var":
            out = _atom(("var", n.value))
        elif n.op == "add":
            out = add(go(n.args[0]), go(n.args[1]))
        elif n.op == "sub":
            out = add(go(n.args[0]), scale(go(n.args[1]), -1.0))
        elif n.op == "mul":
            out = mul(go(n.args[0]), go(n.args[1]))
        elif n.op == "div":
            out = _divide(go(n.args[0]), go(n.args[1]))
        elif n.op == "max":
            a, b = go(n.args[0]), go(n.args[1])
            ca, cb = _as_const(a), _as_const(b)
            if ca is not None and cb is not None:
                out = const(max(ca, cb))
            else:
                out = _atom(("max", tuple(sorted((freeze(a), freeze(b))))))
        else:
            out = _unary(n.op, go(n.args[0]))
        memo[n] = out
        return out

    return go(node)


# ---------------------------------------------------------------------------
# skeleton rendering


def _render_atom(atom) -> str:
    if atom[0] == "var":
        return atom[1]
    if atom[0] == "nan":
        return "nan"
    if atom[0] == "max":
        return f"max({render(thaw(atom[1][0]))}, {render(thaw(atom[1][1]))})"
    return f"{atom[0]}({render(thaw(atom[1]))})"


def _render_mono(mono: tuple) -> str:
    parts = []
    for atom, p in mono:
        s = _render_atom(atom)
        parts.append(s if p == 1 else f"{s}^{p}")
    return "*".join(sorted(parts))


def render(poly: dict) -> str:
    """Skeleton string: coefficient 1 is implicit, -1 is a sign, others are C."""
    if not poly:
        return "0"
    terms = []
    for mono, c in poly.items():
        body = _render_mono(mono)
        if not body:
            terms.append("C")
        elif c == 1.0:
            terms.append(body)
        elif c == -1.0:
            terms.append("-" + body)
        else:
            terms.append("C*" + body)
    return " + ".join(sorted(terms))


def skeleton(node: Node) -> str:
    """Canonical skeleton string of a constant-folded expression."""
    try:
        return render(from_node(node))
    except SimplifyOverflow:
        return "overflow:" + repr(node)
