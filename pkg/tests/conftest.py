import numpy as np
import pytest
from hypothesis import strategies as st

from symplex.expr import ExprTree

SMOOTH_UNARY = ("sin", "cos", "exp", "square", "neg")
BINARY = ("+", "-", "*")
LEAVES = ("x", "y", "t", "const")


@st.composite
def prefixes(draw, max_depth=5, unary=SMOOTH_UNARY, binary=BINARY, leaves=LEAVES):
    """Random complete prefix token lists of bounded depth."""

    def grow(depth):
        if depth >= max_depth or draw(st.integers(0, 2)) == 0:
            return [draw(st.sampled_from(leaves))]
        if draw(st.booleans()):
            return [draw(st.sampled_from(unary))] + grow(depth + 1)
        return [draw(st.sampled_from(binary))] + grow(depth + 1) + grow(depth + 1)

    return grow(1)


@st.composite
def trees(draw, max_depth=5, **kw):
    tokens = draw(prefixes(max_depth=max_depth, **kw))
    n_const = tokens.count("const")
    consts = draw(st.lists(st.floats(-2, 2, allow_nan=False), min_size=n_const, max_size=n_const))
    return ExprTree(tuple(tokens), tuple(consts))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(line(n))
