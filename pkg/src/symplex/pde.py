"""PDE problems, Monte Carlo energies, rewards and recovery metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import symbolic as sym
from .expr import ExprTree, PARAM_SYMBOL, TIME_SYMBOL, const_name, parse_expression
from .simplify import skeleton
from .symbolic import Node

DEFAULT_COUNTS = {"pde": 200, "bc": 80, "ic": 80}
DEFAULT_WEIGHTS = {"bc": 10.0, "ic": 10.0}
DEFAULT_KAPPA_RANGE = (0.5, 2.0)
SRR_MSE_TOL = 1e-8


class CatalogError(KeyError):
    pass


class ProblemFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PdeProblem:
    name: str
    spatial_vars: tuple[str, ...]
    time_dependent: bool
    parametric: bool
    domain: Mapping[str, tuple[float, float]]
    time_horizon: float
    kappa_range: tuple[float, float] | None
    residual: ExprTree
    boundary: ExprTree | None
    initial: ExprTree | None
    solution: ExprTree | None
    hamiltonian: ExprTree | None = None
    hamiltonian_grad: tuple[ExprTree, ...] = ()
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    counts: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    operators: tuple[str, ...] = ()
    self_consistent: bool = True
    description: str = ""
    notes: str = ""

    def __post_init__(self):
        if self.parametric != (self.kappa_range is not None):
            raise ProblemFormatError(f"{self.name}: kappa range must be given iff the problem is parametric")
        if (self.hamiltonian is None) != (len(self.hamiltonian_grad) == 0):
            raise ProblemFormatError(f"{self.name}: hamiltonian and its gradient come together")
        if self.hamiltonian is not None and len(self.hamiltonian_grad) != len(self.spatial_vars):
            raise ProblemFormatError(f"{self.name}: one gradient component per spatial variable")
        if self.time_dependent and self.initial is None:
            raise ProblemFormatError(f"{self.name}: time-dependent problems need an initial condition")

    def __repr__(self):
        return f"PdeProblem({self.name!r})"

    @property
    def uses_implicit_hj_loss(self) -> bool:
        return self.hamiltonian is not None

    @property
    def variables(self) -> tuple[str, ...]:
        out = self.spatial_vars
        if self.time_dependent:
            out += (TIME_SYMBOL,)
        if self.parametric:
            out += (PARAM_SYMBOL,)
        return out

    @property
    def n_stages(self) -> int:
        if not self.time_dependent:
            return 1
        return 3 if self.parametric else 2

    def stages(self) -> list[int]:
        return list(range(1, self.n_stages + 1))


# ---------------------------------------------------------------------------
# problem files


def _tree(text: str | None, where: str) -> ExprTree | None:
    if text is None:
        return None
    try:
        return parse_expression(text)
    except ValueError as exc:
        raise ProblemFormatError(f"{where}: {exc}") from None


def problem_from_dict(doc: Mapping) -> PdeProblem:
    try:
        name = doc["name"]
        spatial = tuple(doc["spatial_vars"])
        time_dependent = bool(doc.get("time_dependent", True))
        parametric = bool(doc.get("parametric", False))
    except KeyError as exc:
        raise ProblemFormatError(f"problem file missing field {exc}") from None
    domain = {v: tuple(map(float, doc.get("domain", {}).get(v, (-1.0, 1.0)))) for v in spatial}
    kappa = doc.get("kappa_range", list(DEFAULT_KAPPA_RANGE) if parametric else None)
    ham = doc.get("hamiltonian")
    return PdeProblem(
        name=name,
        spatial_vars=spatial,
        time_dependent=time_dependent,
        parametric=parametric,
        domain=domain,
        time_horizon=float(doc.get("time_horizon", 1.0)),
        kappa_range=tuple(map(float, kappa)) if kappa is not None else None,
        residual=_tree(doc["residual"], f"{name}.residual"),
        boundary=_tree(doc.get("boundary"), f"{name}.boundary"),
        initial=_tree(doc.get("initial"), f"{name}.initial"),
        solution=_tree(doc.get("solution"), f"{name}.solution"),
        hamiltonian=_tree(ham["H"], f"{name}.hamiltonian") if ham else None,
        hamiltonian_grad=tuple(_tree(g, f"{name}.hamiltonian.grad") for g in ham["grad"]) if ham else (),
        weights={**DEFAULT_WEIGHTS, **doc.get("weights", {})},
        counts={**DEFAULT_COUNTS, **doc.get("counts", {})},
        operators=tuple(doc.get("operators", ())),
        self_consistent=bool(doc.get("self_consistent", True)),
        description=doc.get("description", ""),
        notes=doc.get("notes", ""),
    )


def load_problem_file(path: str | Path) -> PdeProblem:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"{path}: {exc}") from None
    return problem_from_dict(doc)


@lru_cache(maxsize=1)
def _catalog() -> dict[str, PdeProblem]:
    out = {}
    for entry in sorted(resources.files("symplex.problems").iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            p = problem_from_dict(json.loads(entry.read_text()))
            out[p.name] = p
    return out


def catalog() -> list[PdeProblem]:
    return list(_catalog().values())


def problem_names() -> list[str]:
    return list(_catalog())


def load_problem(name: str) -> PdeProblem:
    try:
        return _catalog()[name]
    except KeyError:
        raise CatalogError(f"unknown problem {name!r}; available: {', '.join(problem_names())}") from None


# ---------------------------------------------------------------------------
# collocation


@dataclass
class CollocationSet:
    interior: dict[str, np.ndarray]
    boundary: dict[str, np.ndarray]
    initial: dict[str, np.ndarray]

    @staticmethod
    def size(points: Mapping[str, np.ndarray]) -> int:
        return len(next(iter(points.values()))) if points else 0


def _box(problem: PdeProblem, n: int, rng) -> dict[str, np.ndarray]:
    return {v: rng.uniform(*problem.domain[v], size=n) for v in problem.spatial_vars}


def _kappa(problem: PdeProblem, stage: int, n: int, rng) -> np.ndarray:
    if stage >= 3 and problem.parametric:
        return rng.uniform(*problem.kappa_range, size=n)
    return np.ones(n)


def sample_collocation(problem: PdeProblem, stage: int, rng: np.random.Generator,
                       counts: Mapping[str, int] | None = None) -> CollocationSet:
    """Uniform Monte Carlo draws for the given curriculum stage.

    Stage 1 of a time-dependent problem only needs initial-time points.
    Time-independent problems always get interior and boundary points.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    counts = {**problem.counts, **(counts or {})}
    T = problem.time_horizon
    interior: dict[str, np.ndarray] = {}
    boundary: dict[str, np.ndarray] = {}
    initial: dict[str, np.ndarray] = {}
    ic_only = problem.time_dependent and stage == 1

    if not ic_only:
        n = counts["pde"]
        interior = _box(problem, n, rng)
        interior[TIME_SYMBOL] = rng.uniform(0.0, T, size=n) if problem.time_dependent else np.zeros(n)
        interior[PARAM_SYMBOL] = _kappa(problem, stage, n, rng)

        n = counts["bc"]
        boundary = _box(problem, n, rng)
        dim = len(problem.spatial_vars)
        face = rng.integers(0, 2 * dim, size=n)
        for axis, v in enumerate(problem.spatial_vars):
            lo, hi = problem.domain[v]
            boundary[v] = np.where(face == 2 * axis, lo, np.where(face == 2 * axis + 1, hi, boundary[v]))
        boundary[TIME_SYMBOL] = rng.uniform(0.0, T, size=n) if problem.time_dependent else np.zeros(n)
        boundary[PARAM_SYMBOL] = _kappa(problem, stage, n, rng)

    if problem.time_dependent:
        n = counts["ic"]
        initial = _box(problem, n, rng)
        initial[TIME_SYMBOL] = np.zeros(n)
        initial[PARAM_SYMBOL] = _kappa(problem, stage, n, rng)

    return CollocationSet(interior, boundary, initial)


# ---------------------------------------------------------------------------
# residual construction


def _derivative_spec(name: str) -> tuple[str, ...] | None:
    """``u_xy`` -> ("x", "y"); ``u`` -> (); anything else -> None."""
    if name == "u":
        return ()
    if name.startswith("u_") and len(name) > 2:
        return tuple(name[2:])
    return None


def pde_residual_node(problem: PdeProblem, u: Node) -> Node:
    """Substitute the candidate and its derivatives into the residual template."""
    template = problem.residual.to_node()
    mapping: dict[str, Node] = {}
    memo: dict = {}
    for name in sym.free_vars(template):
        spec = _derivative_spec(name)
        if spec is None:
            continue
        node = u
        prefix: tuple[str, ...] = ()
        for v in spec:
            prefix += (v,)
            key = prefix
            if key not in memo:
                memo[key] = sym.differentiate(node, v)
            node = memo[key]
        mapping[name] = node
    return sym.substitute(template, mapping)


def hj_residual_node(problem: PdeProblem, u: Node) -> Node:
    """u + tH(∇u) − t ∇u·∇H(∇u) − u0(x − t∇H(∇u))."""
    if not problem.uses_implicit_hj_loss:
        raise ValueError(f"{problem.name} has no Hamiltonian")
    t = sym.var(TIME_SYMBOL)
    grads = [sym.differentiate(u, v) for v in problem.spatial_vars]
    p_map = {f"p{i + 1}": g for i, g in enumerate(grads)}
    H = sym.substitute(problem.hamiltonian.to_node(), p_map)
    gH = [sym.substitute(g.to_node(), p_map) for g in problem.hamiltonian_grad]
    dot = sym.ZERO
    for g, h in zip(grads, gH):
        dot = sym.add(dot, sym.mul(g, h))
    shift = {v: sym.sub(sym.var(v), sym.mul(t, h)) for v, h in zip(problem.spatial_vars, gH)}
    u0 = sym.substitute(problem.initial.to_node(), shift)
    return sym.sub(sym.sub(sym.add(u, sym.mul(t, H)), sym.mul(t, dot)), u0)


def _condition_residual(u: Node, target: ExprTree | None) -> Node:
    return u if target is None else sym.sub(u, target.to_node())


# ---------------------------------------------------------------------------
# energy


@dataclass(frozen=True)
class EnergyReport:
    total: float
    pde: float
    bc: float
    ic: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.total)

    @property
    def reward(self) -> float:
        return reward(self.total)


INF_REPORT = EnergyReport(math.inf, math.inf, math.inf, math.inf)


def reward(E: float) -> float:
    """1 / (1 + sqrt(E)); non-finite or negative energy maps to 0."""
    if E is None or not math.isfinite(E) or E < 0:
        return 0.0
    return 1.0 / (1.0 + math.sqrt(E))


def _broadcast(values, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(values, dtype=np.float64), (n,))


class _Term:
    """One squared-residual term with its constant-gradient expressions."""

    def __init__(self, residual: Node, n_const: int, weight: float):
        self.weight = weight
        grads = [sym.differentiate(residual, const_name(i)) for i in range(n_const)]
        self.nodes = (residual, *grads)
        self._fn = None

    def evaluate(self, env: Mapping[str, object], n: int, with_grad: bool):
        if self._fn is None:
            self._fn = sym.compile_nodes(self.nodes if with_grad else self.nodes[:1])
            self._with_grad = with_grad
        elif with_grad and not self._with_grad:
            self._fn = sym.compile_nodes(self.nodes)
            self._with_grad = True
        outs = self._fn(env)
        r = _broadcast(outs[0], n)
        loss = float(np.mean(r * r))
        if not with_grad:
            return loss, None
        g = np.array([float(np.mean(2.0 * r * _broadcast(d, n))) for d in outs[1:]])
        return loss, g


class EnergyModel:
    """Compiled energy of one expression skeleton on one problem stage.

    Constants stay symbolic (``__c{i}``) so the same compiled code serves
    every constant vector, and dE/dc comes from exact differentiation.
    """

    def __init__(self, tree: ExprTree, problem: PdeProblem, stage: int):
        self.problem = problem
        self.stage = stage
        self.n_constants = tree.n_constants
        u = tree.to_node(symbolic_constants=True)
        n = self.n_constants
        self.terms: dict[str, _Term] = {}
        if problem.time_dependent and stage == 1:
            self.terms["ic"] = _Term(_condition_residual(u, problem.initial), n, 1.0)
            return
        if problem.uses_implicit_hj_loss:
            pde = hj_residual_node(problem, u)
        else:
            pde = pde_residual_node(problem, u)
        self.terms["pde"] = _Term(pde, n, 1.0)
        self.terms["bc"] = _Term(_condition_residual(u, problem.boundary), n, problem.weights["bc"])
        if problem.time_dependent:
            self.terms["ic"] = _Term(_condition_residual(u, problem.initial), n, problem.weights["ic"])

    def evaluate(self, constants: Sequence[float], points: CollocationSet,
                 with_grad: bool = False) -> tuple[EnergyReport, np.ndarray | None]:
        consts = {const_name(i): float(c) for i, c in enumerate(constants)}
        parts = {"pde": 0.0, "bc": 0.0, "ic": 0.0}
        grad = np.zeros(self.n_constants) if with_grad else None
        sets = {"pde": points.interior, "bc": points.boundary, "ic": points.initial}
        total = 0.0
        for key, term in self.terms.items():
            pts = sets[key]
            n = CollocationSet.size(pts)
            if n == 0:
                continue
            loss, g = term.evaluate({**pts, **consts}, n, with_grad)
            parts[key] = loss
            total += term.weight * loss
            if with_grad:
                grad += term.weight * g
        if not math.isfinite(total) or (with_grad and not np.all(np.isfinite(grad))):
            return INF_REPORT, None
        return EnergyReport(total, parts["pde"], parts["bc"], parts["ic"]), grad


@lru_cache(maxsize=4096)
def _cached_model(symbols: tuple[str, ...], problem: PdeProblem, stage: int) -> EnergyModel:
    return EnergyModel(ExprTree(symbols), problem, stage)


def energy_model(tree: ExprTree, problem: PdeProblem, stage: int) -> EnergyModel:
    if problem.time_dependent and stage == 1 or not problem.time_dependent:
        stage_key = 1
    else:
        stage_key = 2  # stages 2 and 3 share the loss composition
    return _cached_model(tree.symbols, problem, stage_key)


def energy(tree: ExprTree, constants: Sequence[float] | None, problem: PdeProblem,
           stage: int, points: CollocationSet) -> EnergyReport:
    constants = tree.constants if constants is None else constants
    report, _ = energy_model(tree, problem, stage).evaluate(constants, points)
    return report


def hj_implicit_residual(problem: PdeProblem, tree: ExprTree, constants: Sequence[float] | None,
                         points: Mapping[str, np.ndarray]) -> float:
    """Mean squared implicit characteristic residual at the given points."""
    constants = tree.constants if constants is None else constants
    node = hj_residual_node(problem, tree.with_constants(constants).to_node())
    n = CollocationSet.size(points)
    (r,) = sym.evaluate_nodes([node], points)
    r = _broadcast(r, n)
    return float(np.mean(r * r))


def pointwise_residual(problem: PdeProblem, tree: ExprTree, points: Mapping[str, np.ndarray]) -> np.ndarray:
    """PDE residual (or implicit HJ residual) of a concrete expression."""
    u = tree.to_node()
    node = hj_residual_node(problem, u) if problem.uses_implicit_hj_loss else pde_residual_node(problem, u)
    (r,) = sym.evaluate_nodes([node], points)
    return np.array(_broadcast(r, CollocationSet.size(points)))


# ---------------------------------------------------------------------------
# metrics


def evaluation_grid(problem: PdeProblem, n_space: int = 64, n_time: int = 16, n_kappa: int = 8) -> dict[str, np.ndarray]:
    axes = [np.linspace(*problem.domain[v], n_space) for v in problem.spatial_vars]
    names = list(problem.spatial_vars)
    if problem.time_dependent:
        axes.append(np.linspace(0.0, problem.time_horizon, n_time))
        names.append(TIME_SYMBOL)
    if problem.parametric:
        axes.append(np.linspace(*problem.kappa_range, n_kappa))
        names.append(PARAM_SYMBOL)
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = {k: m.ravel() for k, m in zip(names, mesh)}
    n = mesh[0].size
    grid.setdefault(TIME_SYMBOL, np.zeros(n))
    grid.setdefault(PARAM_SYMBOL, np.ones(n))
    return grid


def mse(tree: ExprTree, constants: Sequence[float] | None, problem: PdeProblem,
        grid: Mapping[str, np.ndarray] | None = None) -> float:
    if problem.solution is None:
        raise ValueError(f"{problem.name} has no analytic solution")
    constants = tree.constants if constants is None else constants
    grid = evaluation_grid(problem) if grid is None else grid
    n = CollocationSet.size(grid)
    pred, true = sym.evaluate_nodes([tree.with_constants(constants).to_node(), problem.solution.to_node()], grid)
    err = _broadcast(pred, n) - _broadcast(true, n)
    value = float(np.mean(err * err))
    return value if math.isfinite(value) else math.inf


def srr_check(tree: ExprTree, constants: Sequence[float] | None, problem: PdeProblem,
              grid: Mapping[str, np.ndarray] | None = None) -> bool:
    """Skeleton match after constant folding, and MSE below 1e-8."""
    if problem.solution is None:
        raise ValueError(f"{problem.name} has no analytic solution")
    concrete = tree if constants is None else tree.with_constants(constants)
    if skeleton(concrete.to_node()) != skeleton(problem.solution.to_node()):
        return False
    return mse(concrete, None, problem, grid) < SRR_MSE_TOL
