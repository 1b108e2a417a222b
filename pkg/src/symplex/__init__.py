"""Reinforcement-learned closed-form solutions of PDEs."""

from .estimator import SymPlexSolver
from .expr import ExprTree, evaluate, parse_expression, to_infix, to_prefix_string
from .pde import PdeProblem, catalog, load_problem, load_problem_file
from .policy import PolicyConfig, SymFormer
from .trainer import Trainer, TrainerConfig, run_curriculum

__all__ = [
    "ExprTree", "PdeProblem", "PolicyConfig", "SymFormer", "SymPlexSolver", "Trainer",
    "TrainerConfig", "catalog", "evaluate", "load_problem", "load_problem_file",
    "parse_expression", "run_curriculum", "to_infix", "to_prefix_string",
]
