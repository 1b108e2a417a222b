"""Tokens, vocabularies and prefix-notation expression trees."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import symbolic as sym
from .symbolic import Node

CONST_SYMBOL = "const"

# token symbol -> symbolic op name
BINARY = {"+": "add", "-": "sub", "*": "mul", "/": "div", "max": "max"}
UNARY = {
    name: name
    for name in ("sin", "cos", "exp", "log", "sqrt", "square", "neg", "abs", "relu", "step", "sign")
}
_OP_TO_SYMBOL = {v: k for k, v in {**BINARY, **UNARY}.items()}
COMMUTATIVE = frozenset({"+", "*", "max"})

SPATIAL_ORDER = ("x", "y", "z")
TIME_SYMBOL = "t"
PARAM_SYMBOL = "k"


class ExpressionError(ValueError):
    """Base class for malformed expressions."""


class MalformedSequenceError(ExpressionError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class MissingBindingError(KeyError):
    pass


@dataclass(frozen=True)
class Token:
    symbol: str
    arity: int

    def __post_init__(self):
        if self.arity not in (0, 1, 2):
            raise ValueError(f"arity must be 0, 1 or 2, got {self.arity}")

    @property
    def kind(self) -> str:
        return ("terminal", "unary", "binary")[self.arity]

    @property
    def is_const(self) -> bool:
        return self.symbol == CONST_SYMBOL

    @property
    def is_variable(self) -> bool:
        return self.arity == 0 and not self.is_const

    def __str__(self):
        return self.symbol


CONST = Token(CONST_SYMBOL, 0)


def token_arity(token: Token | str) -> int:
    return make_token(token).arity


def make_token(symbol: Token | str) -> Token:
    """Resolve a symbol to its token; unknown identifiers are variables."""
    if isinstance(symbol, Token):
        return symbol
    if symbol in BINARY:
        return Token(symbol, 2)
    if symbol in UNARY:
        return Token(symbol, 1)
    if not symbol or not (symbol[0].isalpha() or symbol[0] == "_"):
        raise ExpressionError(f"not a valid token: {symbol!r}")
    return Token(symbol, 0)


def _literal(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


class Vocabulary:
    """Ordered token set with stable indices and nested curriculum views."""

    def __init__(self, tokens: Iterable[Token | str]):
        self.tokens: tuple[Token, ...] = tuple(make_token(t) for t in tokens)
        symbols = [t.symbol for t in self.tokens]
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if not any(t.arity == 0 for t in self.tokens):
            raise ValueError("vocabulary needs at least one terminal")
        self._index = {s: i for i, s in enumerate(symbols)}
        self.arities = np.array([t.arity for t in self.tokens], dtype=np.int64)

    @classmethod
    def build(cls, operators: Sequence[str], variables: Sequence[str], const: bool = True):
        tokens = [make_token(op) for op in operators]
        for t in tokens:
            if t.arity == 0:
                raise ValueError(f"{t.symbol!r} is not an operator")
        tokens += [Token(v, 0) for v in variables]
        if const:
            tokens.append(CONST)
        return cls(tokens)

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, item):
        symbol = item.symbol if isinstance(item, Token) else item
        return symbol in self._index

    def __getitem__(self, i: int) -> Token:
        return self.tokens[i]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary({[t.symbol for t in self.tokens]})"

    def index(self, token: Token | str) -> int:
        symbol = token.symbol if isinstance(token, Token) else token
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"token {symbol!r} not in vocabulary") from None

    @property
    def terminals(self) -> tuple[Token, ...]:
        return tuple(t for t in self.tokens if t.arity == 0)

    def stage_mask(self, stage: int) -> np.ndarray:
        """Boolean mask over tokens active in a curriculum stage.

        Stage 1 hides time and the parameter, stage 2 hides the parameter,
        stage 3 uses everything.
        """
        hidden = {1: {TIME_SYMBOL, PARAM_SYMBOL}, 2: {PARAM_SYMBOL}, 3: set()}[stage]
        return np.array([t.symbol not in hidden for t in self.tokens])

    def stage(self, stage: int) -> "Vocabulary":
        mask = self.stage_mask(stage)
        return Vocabulary([t for t, keep in zip(self.tokens, mask) if keep])


@dataclass(frozen=True)
class ExprTree:
    """Complete prefix expression with positional constant slots."""

    prefix: tuple[Token, ...]
    constants: tuple[float, ...] = ()
    depth: int = field(default=0, compare=False)

    def __post_init__(self):
        prefix = tuple(make_token(t) for t in self.prefix)
        object.__setattr__(self, "prefix", prefix)
        if not prefix:
            raise MalformedSequenceError("empty prefix", 0)
        n_const = sum(t.is_const for t in prefix)
        constants = tuple(float(c) for c in self.constants) if self.constants else (1.0,) * n_const
        if len(constants) != n_const:
            raise ExpressionError(
                f"{n_const} constant placeholders but {len(constants)} constants given"
            )
        object.__setattr__(self, "constants", constants)
        object.__setattr__(self, "depth", _check_complete(prefix))

    def __len__(self):
        return len(self.prefix)

    @property
    def symbols(self) -> tuple[str, ...]:
        return tuple(t.symbol for t in self.prefix)

    @property
    def n_constants(self) -> int:
        return len(self.constants)

    def with_constants(self, constants: Sequence[float]) -> "ExprTree":
        return ExprTree(self.prefix, tuple(constants))

    def variables(self) -> set[str]:
        return {t.symbol for t in self.prefix if t.is_variable}

    def to_node(self, symbolic_constants: bool = False) -> Node:
        """Convert to a symbolic node.

        With ``symbolic_constants`` the i-th placeholder becomes the variable
        ``__c{i}`` instead of its numeric value.
        """
        return _build_node(self.prefix, self.constants, symbolic_constants)

    @classmethod
    def from_node(cls, node: Node) -> "ExprTree":
        prefix: list[Token] = []
        constants: list[float] = []
        stack = [node]
        while stack:
            n = stack.pop()
            if n.op == "num":
                prefix.append(CONST)
                constants.append(n.value)
            elif n.op == "var":
                prefix.append(Token(n.value, 0))
            else:
                prefix.append(make_token(_OP_TO_SYMBOL[n.op]))
                stack.extend(reversed(n.args))
        return cls(tuple(prefix), tuple(constants))

    def __str__(self):
        return to_prefix_string(self)


def const_name(i: int) -> str:
    return f"__c{i}"


def _build_node(prefix, constants, symbolic_constants):
    pos = 0
    slot = 0

    def build() -> Node:
        nonlocal pos, slot
        tok = prefix[pos]
        pos += 1
        if tok.arity == 0:
            if tok.is_const:
                i = slot
                slot += 1
                return sym.var(const_name(i)) if symbolic_constants else sym.num(constants[i])
            return sym.var(tok.symbol)
        args = [build() for _ in range(tok.arity)]
        op = BINARY.get(tok.symbol) or UNARY[tok.symbol]
        # raw constructors keep the tree shape intact
        return Node(op, tuple(args))

    return build()


def _check_complete(prefix: Sequence[Token]) -> int:
    """Validate a complete prefix and return its depth (root = 1)."""
    stack: list[int] = [1]
    depth = 0
    for i, tok in enumerate(prefix):
        if not stack:
            raise MalformedSequenceError(f"token {tok.symbol!r} at index {i} after a complete tree", i)
        d = stack.pop()
        depth = max(depth, d)
        stack.extend([d + 1] * tok.arity)
    if stack:
        raise MalformedSequenceError(f"incomplete prefix: {len(stack)} open slot(s)", len(prefix))
    return depth


class Incomplete(NamedTuple):
    """Marker returned when a prefix still has open argument slots."""

    open_slots: int


def parse_prefix(tokens: Sequence[Token | str], constants: Sequence[float] | None = None):
    """Parse a token list into an :class:`ExprTree`.

    Numeric literals become constant placeholders carrying their value.
    Returns :class:`Incomplete` when the arity budget is still positive and
    raises :class:`MalformedSequenceError` when tokens overrun it.
    """
    if not tokens:
        raise MalformedSequenceError("empty token sequence", 0)
    prefix: list[Token] = []
    values: list[float] = []
    budget = 1
    for i, raw in enumerate(tokens):
        if budget == 0:
            raise MalformedSequenceError(
                f"token {str(raw)!r} at index {i} follows a complete expression", i
            )
        literal = _literal(raw) if isinstance(raw, str) else None
        if literal is not None:
            tok = CONST
            values.append(literal)
        else:
            try:
                tok = make_token(raw)
            except ExpressionError as exc:
                raise MalformedSequenceError(f"bad token at index {i}: {exc}", i) from None
            if tok.is_const:
                values.append(math.nan)
        prefix.append(tok)
        budget += tok.arity - 1
    if budget > 0:
        return Incomplete(budget)
    if constants is not None:
        values = list(constants)
    else:
        values = [1.0 if math.isnan(v) else v for v in values]
    return ExprTree(tuple(prefix), tuple(values))


def parse_expression(text: str) -> ExprTree:
    """Parse a space separated prefix string such as ``"* 2.5 sin x"``."""
    result = parse_prefix(text.split())
    if isinstance(result, Incomplete):
        raise MalformedSequenceError(
            f"expression ends with {result.open_slots} open slot(s)", len(text.split())
        )
    return result


def to_prefix_string(tree: ExprTree) -> str:
    out = []
    it = iter(tree.constants)
    for tok in tree.prefix:
        out.append(repr(next(it)) if tok.is_const else tok.symbol)
    return " ".join(out)


def to_infix(tree: ExprTree, precision: int | None = None) -> str:
    """Human-readable infix rendering, e.g. ``(sin(x) * cos(y))``."""

    def fmt(v: float) -> str:
        return repr(v) if precision is None else f"{v:.{precision}g}"

    def render(n: Node) -> str:
        if n.op == "num":
            return fmt(n.value)
        if n.op == "var":
            return n.value
        if n.op in ("add", "sub", "mul", "div"):
            a, b = (render(x) for x in n.args)
            return f"({a} {_OP_TO_SYMBOL[n.op]} {b})"
        if n.op == "max":
            a, b = (render(x) for x in n.args)
            return f"max[{a},{b}]"
        a = render(n.args[0])
        if n.op == "neg":
            return f"(-{a})"
        if n.op == "square":
            return f"({a})^2"
        return f"{n.op}({a})"

    return render(tree.to_node())


# ---------------------------------------------------------------------------
# evaluation and differentiation


def evaluate(tree: ExprTree, env: Mapping[str, object]) -> np.ndarray:
    """Vectorised evaluation; non-finite results are reported as nan."""
    node = tree.to_node()
    missing = sym.free_vars(node) - set(env)
    if missing:
        raise MissingBindingError(f"no value for {sorted(missing)}")
    (out,) = sym.evaluate_nodes([node], env)
    out = np.asarray(out, dtype=float)
    return np.where(np.isfinite(out), out, np.nan)


def eval_expr(tree: ExprTree, point: Mapping[str, float]) -> float:
    """Evaluate at one point. Returns nan instead of raising on inf/nan."""
    return float(evaluate(tree, point))


def diff(tree: ExprTree, wrt: str) -> ExprTree:
    """Exact symbolic derivative; numeric literals become constants."""
    return ExprTree.from_node(sym.differentiate(tree.to_node(), wrt))


# ---------------------------------------------------------------------------
# canonical forms and structural checks


def _subtrees(prefix: Sequence[Token]) -> list[tuple[int, int]]:
    """(start, end) span of the subtree rooted at every position."""
    spans = [(0, 0)] * len(prefix)

    def walk(i: int) -> int:
        j = i + 1
        for _ in range(prefix[i].arity):
            j = walk(j)
        spans[i] = (i, j)
        return j

    walk(0)
    return spans


def _canonical(prefix: Sequence[Token], i: int) -> tuple[list[Token], str, int]:
    tok = prefix[i]
    if tok.arity == 0:
        return [tok], tok.symbol, i + 1
    j = i + 1
    children = []
    for _ in range(tok.arity):
        seq, key, j = _canonical(prefix, j)
        children.append((key, seq))
    if tok.symbol in COMMUTATIVE:
        children.sort(key=lambda c: c[0])
    seq = [tok]
    for _, s in children:
        seq.extend(s)
    key = f"{tok.symbol}({','.join(k for k, _ in children)})"
    return seq, key, j


def canonicalize(tree: ExprTree) -> list[Token]:
    """Token sequence with commutative operands in a deterministic order.

    Constant values are dropped; every placeholder renders as ``const``.
    """
    seq, _, _ = _canonical(tree.prefix, 0)
    return seq


def canonical_key(tree: ExprTree) -> str:
    return _canonical(tree.prefix, 0)[1]


def is_degenerate(tree: ExprTree) -> bool:
    """True for x-x, x/x style subtrees or operator subtrees without variables."""
    prefix = tree.prefix
    spans = _subtrees(prefix)
    for i, tok in enumerate(prefix):
        if tok.arity == 0:
            continue
        start, end = spans[i]
        if not any(t.is_variable for t in prefix[start:end]):
            return True
        if tok.symbol in ("-", "/"):
            left = spans[i + 1]
            right = spans[left[1]]
            _, ka, _ = _canonical(prefix, left[0])
            _, kb, _ = _canonical(prefix, right[0])
            if ka == kb:
                return True
    return False


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two token sequences."""
    a = [t.symbol if isinstance(t, Token) else t for t in a]
    b = [t.symbol if isinstance(t, Token) else t for t in b]
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
