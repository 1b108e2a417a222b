"""Adam refinement of expression constants against the stage energy."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import ExprTree
from .pde import INF_REPORT, CollocationSet, EnergyReport, PdeProblem, energy_model


@dataclass(frozen=True)
class ConstOptConfig:
    steps: int = 50
    lr: float = 0.02
    init: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


REFINE_CONFIG = ConstOptConfig(steps=200)


@dataclass(frozen=True)
class ConstOptResult:
    constants: tuple[float, ...]
    report: EnergyReport
    steps: int

    @property
    def reward(self) -> float:
        return self.report.reward


def optimize_constants(tree: ExprTree, problem: PdeProblem, stage: int, points: CollocationSet,
                       init: Sequence[float] | None = None,
                       config: ConstOptConfig = ConstOptConfig()) -> ConstOptResult:
    """Minimise the energy over the constants; returns the best iterate seen.

    Gradients come from exact symbolic differentiation of the residuals with
    respect to each constant slot. Trees without constants are evaluated once.
    """
    model = energy_model(tree, problem, stage)
    n = tree.n_constants
    if init is None:
        init = (config.init,) * n
    c = np.array(init, dtype=np.float64)
    if len(c) != n:
        raise ValueError(f"expected {n} initial constants, got {len(c)}")
    if n == 0:
        report, _ = model.evaluate(c, points)
        return ConstOptResult((), report, 0)

    report, grad = model.evaluate(c, points, with_grad=True)
    if not report.finite:
        return ConstOptResult(tuple(float(v) for v in c), INF_REPORT, 0)
    best_c, best = c.copy(), report
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2 = config.beta1, config.beta2
    steps = 0
    for step in range(1, config.steps + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        c = c - config.lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + config.eps)
        steps = step
        report, new_grad = model.evaluate(c, points, with_grad=True)
        if not report.finite:
            break
        grad = new_grad
        if report.total < best.total:
            best_c, best = c.copy(), report
    return ConstOptResult(tuple(float(x) for x in best_c), best, steps)


def _job(args):
    symbols, init, problem, stage, points, config = args
    return optimize_constants(ExprTree(symbols), problem, stage, points, init, config)


def optimize_batch(trees: Sequence[ExprTree], problem: PdeProblem, stage: int, points: CollocationSet,
                   config: ConstOptConfig = ConstOptConfig(), workers: int = 1,
                   inits: Sequence[Sequence[float] | None] | None = None) -> list[ConstOptResult]:
    """Optimise many trees; duplicates are solved once, results keep input order."""
    inits = list(inits) if inits is not None else [None] * len(trees)
    keys = [(t.symbols, None if i is None else tuple(i)) for t, i in zip(trees, inits)]
    unique = list(dict.fromkeys(keys))
    jobs = [(sym, init, problem, stage, points, config) for sym, init in unique]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            solved = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        solved = [_job(j) for j in jobs]
    table = dict(zip(unique, solved))
    return [table[k] for k in keys]


def refine_memory(memory, problem: PdeProblem, stage: int, points: CollocationSet,
                  config: ConstOptConfig = REFINE_CONFIG):
    """Re-fit every memory entry's constants and refresh its reward.

    ``memory`` must provide ``entries`` and ``update_entry(entry, constants,
    reward, current_reward)``. ``current_reward`` scores the entry's present
    constants on this stage and draw, for when the update is refused.
    """
    for entry in list(memory.entries):
        tree = entry.tree
        model = energy_model(tree, problem, stage)
        current, _ = model.evaluate(tree.constants, points)
        if tree.n_constants:
            res = optimize_constants(tree, problem, stage, points, init=tree.constants, config=config)
        else:
            res = ConstOptResult((), current, 0)
        memory.update_entry(entry, res.constants, res.reward, current.reward)
    return memory
