import pytest

from symplex.expr import parse_expression
from symplex.simplify import skeleton, snap


def sk(text):
    return skeleton(parse_expression(text).to_node())


@pytest.mark.parametrize(
    "a, b",
    [
        ("+ x y", "+ y x"),
        ("- * square square y 1.2 neg square square x", "+ square square x * 1.2 square square y"),
        ("+ abs y - + -0.0 abs x * -0.2436 / t 0.2436", "+ + abs x abs y t"),
        ("* exp x exp y", "exp + x y"),
        ("* exp x exp neg x", "1.0"),
        ("sin neg x", "neg sin x"),
        ("cos neg x", "cos x"),
        ("/ 1.0 / 1.0 + x y", "+ x y"),
        ("* 2.0 x", "* 3.5 x"),
    ],
)
def test_skeleton_equal(a, b):
    assert sk(a) == sk(b)


@pytest.mark.parametrize(
    "a, b",
    [("x", "* 2.0 x"), ("sin x", "cos x"), ("- x y", "- y x"), ("+ x 1.0", "x"), ("square x", "* x y")],
)
def test_skeleton_distinct(a, b):
    assert sk(a) != sk(b)


def test_snap():
    assert snap(0.3333333334) == pytest.approx(1 / 3, abs=1e-15)
    assert snap(-0.0000001) == 0.0
    assert snap(0.2436) == 0.2436


def test_skeleton_rendering():
    assert sk("* 2.0 x") == "C*x"
    assert sk("+ x 0.5") == "C + x"
