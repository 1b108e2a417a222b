"""scikit-learn style wrapper around the curriculum trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .expr import PARAM_SYMBOL, TIME_SYMBOL, evaluate, to_infix, to_prefix_string
from .pde import PdeProblem, load_problem
from .policy import PolicyConfig
from .trainer import Trainer, TrainerConfig


class SymPlexSolver(BaseEstimator):
    """Discover a closed-form solution of a catalog (or custom) PDE.

    ``fit`` ignores ``X``/``y`` beyond validation: the PDE, boundary and
    initial data define the objective. ``predict`` evaluates the discovered
    expression on rows ordered as ``problem.variables`` (spatial, then
    ``t`` if time dependent, then ``k`` if parametric).

    >>> est = SymPlexSolver(problem="poisson_exp2d", operators=("+", "exp"), d_max=3, epochs_cap=5)
    >>> est.get_params()["d_max"]
    3
    """

    def __init__(self, problem: str | PdeProblem = "poisson_exp2d", operators=None, d_max: int = 7,
                 batch_size: int = 64, epochs_cap: int | None = None, stage: int | None = None,
                 seed: int = 0, workers: int = 1):
        self.problem = problem
        self.operators = operators
        self.d_max = d_max
        self.batch_size = batch_size
        self.epochs_cap = epochs_cap
        self.stage = stage
        self.seed = seed
        self.workers = workers

    def _problem(self) -> PdeProblem:
        return self.problem if isinstance(self.problem, PdeProblem) else load_problem(self.problem)

    def fit(self, X=None, y=None):
        if X is not None:
            check_array(X)
        problem = self._problem()
        config = TrainerConfig(batch_size=self.batch_size, seed=self.seed, workers=self.workers,
                               epochs_cap=self.epochs_cap, force_stage=self.stage,
                               operators=tuple(self.operators) if self.operators else None)
        self.trainer_ = Trainer(problem, config, PolicyConfig(d_max=self.d_max))
        self.result_ = self.trainer_.run_curriculum()
        self.problem_ = problem
        self.expression_ = self.result_.best.tree if self.result_.best else None
        self.n_features_in_ = len(problem.variables)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        X = check_array(X)
        names = self.problem_.variables
        if X.shape[1] != len(names):
            raise ValueError(f"expected {len(names)} columns {names}, got {X.shape[1]}")
        if self.expression_ is None:
            return np.full(X.shape[0], np.nan)
        env = dict(zip(names, X.T))
        env.setdefault(TIME_SYMBOL, np.zeros(X.shape[0]))
        env.setdefault(PARAM_SYMBOL, np.ones(X.shape[0]))
        return np.broadcast_to(evaluate(self.expression_, env), (X.shape[0],)).copy()

    def score(self, X, y) -> float:
        """Negative mean squared error against ``y``."""
        pred = self.predict(X)
        return -float(np.mean((pred - np.asarray(y, dtype=float)) ** 2))

    @property
    def expression(self) -> str:
        check_is_fitted(self, "result_")
        return to_prefix_string(self.expression_) if self.expression_ else ""

    @property
    def infix(self) -> str:
        check_is_fitted(self, "result_")
        return to_infix(self.expression_) if self.expression_ else ""
