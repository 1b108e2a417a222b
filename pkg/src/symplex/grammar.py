"""Partial ASTs, grammar-valid action masks and tree relations."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .expr import ExpressionError, Token, Vocabulary, make_token

SELF, PARENT, CHILD, SIBLING, ANCESTOR, OTHER = range(6)
N_RELATIONS = 6

# operators need at least one more level below them
MIN_HEIGHT = {0: 1, 1: 2, 2: 2}


class MalformedPrefixError(ExpressionError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class Slot(NamedTuple):
    parent: int
    index: int
    depth: int


class PartialAst:
    """Incrementally reconstructed tree of a (possibly incomplete) prefix.

    ``_stack`` holds open slots with the next one to fill on top, so
    ``open_slots`` (leftmost first) is the reversed stack.
    """

    __slots__ = ("tokens", "parent", "child_slot", "depth", "_stack")

    def __init__(self):
        self.tokens: list[Token] = []
        self.parent: list[int] = []
        self.child_slot: list[int] = []
        self.depth: list[int] = []
        self._stack: list[Slot] = [Slot(-1, 0, 1)]

    def copy(self) -> "PartialAst":
        out = PartialAst.__new__(PartialAst)
        out.tokens = list(self.tokens)
        out.parent = list(self.parent)
        out.child_slot = list(self.child_slot)
        out.depth = list(self.depth)
        out._stack = list(self._stack)
        return out

    def __len__(self):
        return len(self.tokens)

    @property
    def open_slots(self) -> list[Slot]:
        return self._stack[::-1]

    @property
    def next_slot(self) -> Slot | None:
        return self._stack[-1] if self._stack else None

    @property
    def complete(self) -> bool:
        return not self._stack

    @property
    def max_depth(self) -> int:
        return max(self.depth, default=0)

    def push(self, token: Token | str) -> int:
        """Place ``token`` in the next open slot; returns its position."""
        token = make_token(token)
        if not self._stack:
            raise MalformedPrefixError(
                f"token {token.symbol!r} at index {len(self.tokens)} has no open slot", len(self.tokens)
            )
        slot = self._stack.pop()
        i = len(self.tokens)
        self.tokens.append(token)
        self.parent.append(slot.parent)
        self.child_slot.append(slot.index)
        self.depth.append(slot.depth)
        for k in reversed(range(token.arity)):
            self._stack.append(Slot(i, k, slot.depth + 1))
        return i

    def sibling_before(self, slot: Slot) -> int | None:
        """Position of the left sibling that fills slot 0 of ``slot.parent``."""
        if slot.parent < 0 or slot.index == 0:
            return None
        return slot.parent + 1


def build_partial_ast(prefix: Sequence[Token | str]) -> PartialAst:
    ast = PartialAst()
    for tok in prefix:
        ast.push(tok)
    return ast


def valid_mask(partial: PartialAst, vocab: Vocabulary, d_max: int,
               allowed: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of tokens that may fill the next slot.

    ``allowed`` restricts to a curriculum stage view of ``vocab``.
    """
    slot = partial.next_slot
    if slot is None:
        raise MalformedPrefixError("prefix is already complete", len(partial))
    heights = np.where(vocab.arities == 0, 1, 2)
    mask = slot.depth + heights - 1 <= d_max
    if allowed is not None:
        mask &= allowed
    assert mask[vocab.arities == 0].any(), "no terminal available for the open slot"
    sib = partial.sibling_before(slot)
    if sib is not None and partial.tokens[slot.parent].symbol in ("-", "/"):
        left = partial.tokens[sib]
        if left.arity == 0 and left in vocab:
            j = vocab.index(left)
            if mask[j] and mask.sum() > 1:
                mask = mask.copy()
                mask[j] = False
    return mask


def valid_next_tokens(partial: PartialAst, vocab: Vocabulary, d_max: int,
                      allowed: np.ndarray | None = None) -> set[Token]:
    mask = valid_mask(partial, vocab, d_max, allowed)
    return {vocab[i] for i in np.flatnonzero(mask)}


def relation_row(parent: Sequence[int], i: int) -> np.ndarray:
    """Relations of node ``i`` to nodes ``0..i`` (causal view)."""
    row = np.full(i + 1, OTHER, dtype=np.int8)
    p = parent[i]
    if p >= 0:
        row[p] = CHILD
        for j in range(p + 1, i):
            if parent[j] == p:
                row[j] = SIBLING
    row[i] = SELF
    return row


def relation_matrix(partial: PartialAst | Sequence[int]) -> np.ndarray:
    """Pairwise relation codes r[i, j] of node i with respect to node j."""
    parent = partial.parent if isinstance(partial, PartialAst) else list(partial)
    n = len(parent)
    r = np.full((n, n), OTHER, dtype=np.int8)
    for i in range(n):
        r[i, i] = SELF
        p = parent[i]
        if p >= 0:
            r[p, i] = PARENT
            r[i, p] = CHILD
            a = parent[p]
            while a >= 0:
                r[a, i] = ANCESTOR
                a = parent[a]
    for i in range(n):
        for j in range(i + 1, n):
            if parent[i] == parent[j] != -1:
                r[i, j] = r[j, i] = SIBLING
    return r


def is_structurally_isomorphic(a: Sequence[Token | str] | PartialAst,
                               b: Sequence[Token | str] | PartialAst) -> bool:
    """Order-preserving structural equivalence with terminals unlabeled."""
    pa = a if isinstance(a, PartialAst) else build_partial_ast(a)
    pb = b if isinstance(b, PartialAst) else build_partial_ast(b)
    if len(pa) != len(pb) or pa.parent != pb.parent or pa.child_slot != pb.child_slot:
        return False
    for ta, tb in zip(pa.tokens, pb.tokens):
        if ta.arity != tb.arity:
            return False
        if ta.arity > 0 and ta.symbol != tb.symbol:
            return False
    return pa.open_slots == pb.open_slots
