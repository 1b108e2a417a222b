import dataclasses

import numpy as np
import pytest

from symplex.constopt import (
    REFINE_CONFIG,
    ConstOptConfig,
    optimize_batch,
    optimize_constants,
    refine_memory,
)
from symplex.expr import parse_expression
from symplex.pde import energy, load_problem, sample_collocation

HEAT = load_problem("heat2d")


@pytest.fixture
def ic_points():
    return sample_collocation(HEAT, 1, np.random.default_rng(0))


def _with_ic(text):
    return dataclasses.replace(HEAT, initial=parse_expression(text))


def test_config_validation():
    with pytest.raises(ValueError):
        ConstOptConfig(steps=0)
    with pytest.raises(ValueError):
        ConstOptConfig(lr=0)
    assert REFINE_CONFIG.steps == 200 and REFINE_CONFIG.lr == 0.02


def test_quadratic_reaches_least_squares(ic_points):
    problem = _with_ic("* 2.0 square x")
    x = ic_points.initial["x"]
    target = np.sum(2 * x**4) / np.sum(x**4)
    res = optimize_constants(parse_expression("* const square x"), problem, 1, ic_points,
                             config=ConstOptConfig(steps=500))
    assert res.constants[0] == pytest.approx(target, abs=1e-3)


def test_constant_to_zero(ic_points):
    res = optimize_constants(parse_expression("const"), _with_ic("0.0"), 1, ic_points,
                             config=ConstOptConfig(steps=500))
    assert abs(res.constants[0]) < 1e-6


def test_constant_free_tree_skipped(ic_points):
    tree = parse_expression("* sin x cos y")
    res = optimize_constants(tree, HEAT, 1, ic_points)
    assert res.steps == 0 and res.constants == ()
    assert res.report.total < 1e-28


def test_best_seen_never_worse_than_init(ic_points, rng):
    for text in ("* const sin * const x", "+ exp * const x const", "* cos * const y sin x"):
        tree = parse_expression(text)
        init = tuple(rng.uniform(-2, 2, size=tree.n_constants))
        before = energy(tree, init, HEAT, 1, ic_points).total
        res = optimize_constants(tree, HEAT, 1, ic_points, init=init)
        assert res.report.total <= before


def test_nonfinite_init_gives_sentinel(ic_points):
    res = optimize_constants(parse_expression("/ x - const 1.0"), HEAT, 1, ic_points, init=(1.0, 1.0))
    assert res.reward == 0.0 and res.constants == (1.0, 1.0)
    with pytest.raises(ValueError):
        optimize_constants(parse_expression("* const x"), HEAT, 1, ic_points, init=(1.0, 2.0))


def test_batch_dedupes_and_keeps_order(ic_points):
    trees = [parse_expression(t) for t in ("* const x", "sin x", "* const x")]
    out = optimize_batch(trees, HEAT, 1, ic_points)
    assert out[0] == out[2]
    assert out[1].steps == 0


def test_batch_workers_do_not_change_results(ic_points):
    trees = [parse_expression(t) for t in ("* const x", "* sin * const x cos y", "+ const y")]
    assert optimize_batch(trees, HEAT, 1, ic_points, workers=1) == optimize_batch(trees, HEAT, 1, ic_points, workers=2)


class _Mem:
    def __init__(self, entries):
        self.entries = entries
        self.updates = []

    def update_entry(self, entry, constants, reward, current_reward=None):
        self.updates.append((entry, constants, reward))


class _Entry:
    def __init__(self, text, reward):
        self.tree = parse_expression(text)
        self.constants = self.tree.constants
        self.reward = reward


def test_refine_improves_reward(ic_points):
    entry = _Entry("* * sin x cos y 0.5", 0.0)
    mem = _Mem([entry])
    refine_memory(mem, HEAT, 1, ic_points)
    (_, constants, reward), = mem.updates
    start = energy(entry.tree, None, HEAT, 1, ic_points).reward
    assert reward > start
    assert constants[0] == pytest.approx(1.0, abs=1e-3)


def test_refine_empty_memory(ic_points):
    mem = _Mem([])
    refine_memory(mem, HEAT, 1, ic_points)
    assert mem.updates == []
