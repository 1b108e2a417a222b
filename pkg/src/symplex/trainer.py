"""Reinforcement learning loop: rewards, losses, top-k memory and curriculum."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .constopt import REFINE_CONFIG, ConstOptConfig, ConstOptResult, optimize_batch, refine_memory
from .expr import (
    PARAM_SYMBOL,
    TIME_SYMBOL,
    ExprTree,
    Vocabulary,
    canonicalize,
    evaluate,
    levenshtein,
    to_infix,
    to_prefix_string,
)
from .pde import CollocationSet, PdeProblem, mse, sample_collocation, srr_check
from .policy import InvalidTrajectoryError, PolicyConfig, Rollout, SymFormer

log = logging.getLogger(__name__)

DEFAULT_OPERATORS = ("+", "-", "*", "/", "sin", "cos", "exp", "square", "neg")


# ---------------------------------------------------------------------------
# reward shaping


def rank_rewards(energies: Sequence[float], normalize: bool = True) -> np.ndarray:
    """1 - rank/(N-1) with stable tie-breaking, optionally standardised.

    Non-finite energies rank last.
    """
    E = np.array([e if e is not None and math.isfinite(e) else np.inf for e in energies], dtype=float)
    N = len(E)
    if N == 0:
        return np.zeros(0)
    if N == 1:
        return np.ones(1)
    ranks = np.empty(N)
    ranks[np.argsort(E, kind="stable")] = np.arange(N)
    r = 1.0 - ranks / (N - 1)
    if normalize:
        std = r.std()
        if std > 1e-8:
            r = (r - r.mean()) / std
    return r


def depth_weights(depths: Sequence[int]) -> np.ndarray:
    d = np.asarray(depths, dtype=float)
    if np.any(d < 1):
        raise ValueError("depths start at 1")
    return 1.0 / (d + 1.0)


def policy_loss(log_probs: ad.DiffArray, entropy: ad.DiffArray, weights: np.ndarray,
                rewards: np.ndarray, lambda_ent: float) -> ad.DiffArray:
    """-mean(w r log pi) - lambda_ent * mean node entropy."""
    coef = np.asarray(weights, dtype=float) * np.asarray(rewards, dtype=float)
    pg = ad.mul(ad.mean(ad.mul(log_probs, coef)), -1.0)
    return ad.sub(pg, ad.mul(entropy, lambda_ent))


def imitation_weights(rewards: Sequence[float], tau: float) -> np.ndarray:
    z = np.asarray(rewards, dtype=float) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def imitation_loss(policy: SymFormer, entries: Sequence["MemoryEntry"], tau: float = 0.1,
                   threshold: float = 0.8, allowed: np.ndarray | None = None) -> ad.DiffArray | None:
    """Reward-softmax weighted per-token NLL of memory sequences.

    Returns None (no contribution) unless the best reward exceeds ``threshold``.
    Entries that are not valid trajectories under ``allowed`` are skipped.
    """
    if not entries or max(e.reward for e in entries) <= threshold:
        return None
    trajs, kept = [], []
    for e in entries:
        try:
            trajs.append(policy.trajectory_masks(e.symbols, allowed))
            kept.append(e)
        except InvalidTrajectoryError as exc:
            log.warning("skipping memory entry %s: %s", " ".join(e.symbols), exc)
    if not kept:
        return None
    alpha = imitation_weights([e.reward for e in kept], tau)
    scored = policy.score(trajs)
    nll = ad.mul(scored.per_token_log_prob(), -1.0)
    return ad.sum(ad.mul(nll, alpha))


# ---------------------------------------------------------------------------
# top-k memory


@dataclass
class MemoryEntry:
    symbols: tuple[str, ...]
    constants: tuple[float, ...]
    reward: float
    fingerprint: np.ndarray
    stage: int
    skeleton: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.skeleton:
            self.skeleton = tuple(t.symbol for t in canonicalize(self.tree))

    @property
    def tree(self) -> ExprTree:
        return ExprTree(self.symbols, self.constants)

    def to_dict(self) -> dict:
        tree = self.tree
        return {
            "prefix": " ".join(self.symbols),
            "constants": list(self.constants),
            "expression": to_prefix_string(tree),
            "infix": to_infix(tree),
            "reward": self.reward,
            "stage": self.stage,
        }


def behavior_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference; positions where both are non-finite match."""
    fa, fb = np.isfinite(a), np.isfinite(b)
    diff = np.where(fa & fb, np.abs(np.where(fa, a, 0.0) - np.where(fb, b, 0.0)), np.inf)
    diff = np.where(~fa & ~fb, 0.0, diff)
    return float(diff.mean())


class TopKMemory:
    def __init__(self, test_points: Mapping[str, np.ndarray], capacity: int = 10,
                 delta_s: int = 3, delta_b: float = 1e-3):
        self.test_points = dict(test_points)
        self.capacity = capacity
        self.delta_s = delta_s
        self.delta_b = delta_b
        self.entries: list[MemoryEntry] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def best(self) -> MemoryEntry | None:
        return self.entries[0] if self.entries else None

    def fingerprint(self, tree: ExprTree) -> np.ndarray:
        n = len(next(iter(self.test_points.values())))
        return np.broadcast_to(evaluate(tree, self.test_points), (n,)).copy()

    def make_entry(self, tree: ExprTree, reward: float, stage: int) -> MemoryEntry:
        return MemoryEntry(tree.symbols, tree.constants, float(reward), self.fingerprint(tree), stage)

    def _conflicts(self, entry: MemoryEntry, skip: MemoryEntry | None = None) -> list[MemoryEntry]:
        out = []
        for e in self.entries:
            if e is skip:
                continue
            if (levenshtein(e.skeleton, entry.skeleton) < self.delta_s
                    or behavior_distance(e.fingerprint, entry.fingerprint) < self.delta_b):
                out.append(e)
        return out

    def _sort(self):
        self.entries.sort(key=lambda e: -e.reward)

    def insert(self, entry: MemoryEntry) -> bool:
        """Insert if diverse, or if it beats every entry it duplicates."""
        if not math.isfinite(entry.reward):
            return False
        conflicts = self._conflicts(entry)
        if conflicts:
            if entry.reward <= max(e.reward for e in conflicts):
                return False
            self.entries = [e for e in self.entries if all(e is not c for c in conflicts)]
        if len(self.entries) >= self.capacity and entry.reward <= self.entries[-1].reward:
            return False
        self.entries.append(entry)
        self._sort()
        del self.entries[self.capacity:]
        return True

    def update_entry(self, entry: MemoryEntry, constants: Sequence[float], reward: float,
                     current_reward: float | None = None) -> bool:
        """Replace constants and reward. If the new behaviour would collide
        with another entry the constants stay and the reward becomes
        ``current_reward`` (the old constants re-scored), when given."""
        new = MemoryEntry(entry.symbols, tuple(constants), float(reward), np.zeros(0), entry.stage, entry.skeleton)
        new.fingerprint = self.fingerprint(new.tree)
        clash = any(behavior_distance(e.fingerprint, new.fingerprint) < self.delta_b
                    for e in self.entries if e is not entry)
        if clash:
            if current_reward is not None:
                entry.reward = float(current_reward)
            self._sort()
            return False
        entry.constants = new.constants
        entry.reward = new.reward
        entry.fingerprint = new.fingerprint
        self._sort()
        return True

    def revalidate(self, vocab_symbols: set[str]) -> list[MemoryEntry]:
        dropped = [e for e in self.entries if not set(e.symbols) <= vocab_symbols]
        self.entries = [e for e in self.entries if set(e.symbols) <= vocab_symbols]
        return dropped

    def check_invariants(self) -> None:
        assert len(self.entries) <= self.capacity
        rewards = [e.reward for e in self.entries]
        assert rewards == sorted(rewards, reverse=True)
        for i, a in enumerate(self.entries):
            for b in self.entries[i + 1:]:
                assert levenshtein(a.skeleton, b.skeleton) >= self.delta_s
                assert behavior_distance(a.fingerprint, b.fingerprint) >= self.delta_b

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.entries]


def fingerprint_points(problem: PdeProblem, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    pts = {v: rng.uniform(*problem.domain[v], size=n) for v in problem.spatial_vars}
    pts[TIME_SYMBOL] = rng.uniform(0.0, problem.time_horizon, size=n) if problem.time_dependent else np.zeros(n)
    pts[PARAM_SYMBOL] = rng.uniform(*problem.kappa_range, size=n) if problem.parametric else np.ones(n)
    return pts


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainerConfig:
    batch_size: int = 64
    lambda_ent: float = 0.3
    tau: float = 0.1
    imitation_threshold: float = 0.8
    lambda_imit: float = 1.0
    lr: float = 5e-4
    plateau_factor: float = 0.9
    plateau_patience: int = 10
    grad_clip: float = 5.0
    refine_period: int = 10
    stage_max_epochs: int = 500
    advance_reward: float = 0.99
    stage_fallback_epochs: int = 200
    memory_size: int = 10
    delta_s: int = 3
    delta_b: float = 1e-3
    n_test: int = 64
    const_steps: int = 50
    const_lr: float = 0.02
    refine_steps: int = 200
    seed: int = 0
    workers: int = 1
    epochs_cap: int | None = None
    force_stage: int | None = None
    operators: tuple[str, ...] | None = None

    def __post_init__(self):
        positive = ("batch_size", "tau", "lr", "grad_clip", "refine_period", "stage_max_epochs",
                    "stage_fallback_epochs", "memory_size", "delta_s", "n_test", "const_steps",
                    "const_lr", "refine_steps", "workers")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("imitation_threshold", "advance_reward", "plateau_factor"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.lambda_ent < 0 or self.lambda_imit < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs_cap is not None and self.epochs_cap <= 0:
            raise ValueError("epochs_cap must be positive")
        if self.force_stage is not None and self.force_stage not in (1, 2, 3):
            raise ValueError("force_stage must be 1, 2 or 3")


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    stage_epoch: int
    best_reward: float
    batch_best_reward: float
    mean_reward: float
    mean_entropy: float
    lr: float
    memory_size: int
    best_expression: str

    FIELDS = ("epoch", "stage", "stage_epoch", "best_reward", "batch_best_reward", "mean_reward",
              "mean_entropy", "lr", "memory_size", "best_expression")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class StageReport:
    stage: int
    epochs: int
    best_reward: float
    advanced_early: bool


@dataclass
class RunResult:
    problem: str
    seed: int
    best: MemoryEntry | None
    reward: float
    mse: float | None
    srr: bool | None
    stages: list[StageReport]
    history: list[EpochRecord]
    memory: list[MemoryEntry]
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        best = self.best.to_dict() if self.best else None
        return {
            "problem": self.problem,
            "seed": self.seed,
            "best": best,
            "reward": self.reward,
            "mse": self.mse,
            "srr": self.srr,
            "stage_epochs": {str(s.stage): s.epochs for s in self.stages},
            "stages": [vars(s) for s in self.stages],
            "total_epochs": len(self.history),
        }


def build_vocabulary(problem: PdeProblem, operators: Sequence[str] | None = None) -> Vocabulary:
    ops = tuple(operators) if operators else (problem.operators or DEFAULT_OPERATORS)
    return Vocabulary.build(ops, problem.variables)


class Trainer:
    """Runs the curriculum on one shared policy.

    ``sample_rollouts``, ``evaluate_batch`` and ``update_policy`` are
    separate methods so tests can substitute scripted behaviour.
    """

    def __init__(self, problem: PdeProblem, config: TrainerConfig | None = None,
                 policy_config: PolicyConfig | None = None,
                 on_epoch: Callable[[EpochRecord], None] | None = None):
        self.problem = problem
        self.config = config or TrainerConfig()
        self.vocab = build_vocabulary(problem, self.config.operators)
        seeds = np.random.SeedSequence(self.config.seed).spawn(4)
        self.policy = SymFormer(self.vocab, policy_config or PolicyConfig(), seed=np.random.default_rng(seeds[0]))
        self.sample_rng = np.random.default_rng(seeds[1])
        self.point_rng = np.random.default_rng(seeds[2])
        test_points = fingerprint_points(problem, self.config.n_test, np.random.default_rng(seeds[3]))
        self.memory = TopKMemory(test_points, self.config.memory_size, self.config.delta_s, self.config.delta_b)
        self.optimizer = ad.Adam(self.policy.parameters(), lr=self.config.lr)
        self.scheduler = ad.ReduceLROnPlateau(self.optimizer, mode="max", factor=self.config.plateau_factor,
                                              patience=self.config.plateau_patience)
        self.const_config = ConstOptConfig(steps=self.config.const_steps, lr=self.config.const_lr)
        self.refine_config = replace(REFINE_CONFIG, steps=self.config.refine_steps, lr=self.config.const_lr)
        self.history: list[EpochRecord] = []
        self.on_epoch = on_epoch
        self._allowed: np.ndarray | None = None

    # -- overridable pieces ----------------------------------------------

    def stage_list(self) -> list[int]:
        if self.config.force_stage is not None:
            return [self.config.force_stage]
        return self.problem.stages()

    def sample_points(self, stage: int) -> CollocationSet:
        return sample_collocation(self.problem, stage, self.point_rng)

    def sample_rollouts(self, stage: int) -> list[Rollout]:
        return self.policy.sample_batch(self.config.batch_size, self.sample_rng, allowed=self._allowed)

    def evaluate_batch(self, rollouts: Sequence[Rollout], stage: int,
                       points: CollocationSet) -> list[ConstOptResult]:
        trees = [r.tree for r in rollouts]
        return optimize_batch(trees, self.problem, stage, points, self.const_config, self.config.workers)

    def update_policy(self, rollouts: Sequence[Rollout], energies: Sequence[float]) -> float:
        cfg = self.config
        self.optimizer.zero_grad()
        scored = self.policy.score_rollouts(rollouts)
        r = rank_rewards(energies)
        w = depth_weights([ro.depth for ro in rollouts])
        loss = policy_loss(scored.seq_log_prob, scored.mean_entropy(), w, r, cfg.lambda_ent)
        imit = imitation_loss(self.policy, self.memory.entries, cfg.tau, cfg.imitation_threshold, self._allowed)
        if imit is not None:
            loss = ad.add(loss, ad.mul(imit, cfg.lambda_imit))
        loss.backward()
        grads = ad.clip_grad_norm(self.optimizer.grads(), cfg.grad_clip)
        if all(np.all(np.isfinite(g)) for g in grads):
            self.optimizer.step(grads)
        return loss.item()

    def refine(self, stage: int, points: CollocationSet):
        refine_memory(self.memory, self.problem, stage, points, self.refine_config)

    # -- loop ------------------------------------------------------------

    def stage_limit(self, final: bool) -> int:
        cfg = self.config
        if final:
            return cfg.epochs_cap if cfg.epochs_cap is not None else cfg.stage_max_epochs
        limit = min(cfg.stage_fallback_epochs, cfg.stage_max_epochs)
        return min(limit, cfg.epochs_cap) if cfg.epochs_cap is not None else limit

    def train_stage(self, stage: int, final: bool = True) -> StageReport:
        cfg = self.config
        self._allowed = self.vocab.stage_mask(stage)
        limit = self.stage_limit(final)
        self.memory.revalidate({t.symbol for t, ok in zip(self.vocab, self._allowed) if ok})
        if self.memory.entries:
            self.refine(stage, self.sample_points(stage))
        best = self.memory.best.reward if self.memory.best else 0.0
        epochs = 0
        early = False
        while epochs < limit:
            epochs += 1
            points = self.sample_points(stage)
            rollouts = self.sample_rollouts(stage)
            results = self.evaluate_batch(rollouts, stage, points)
            rewards = np.array([res.reward for res in results])
            energies = [res.report.total for res in results]
            for ro, res in zip(rollouts, results):
                if res.reward > 0:
                    tree = ExprTree(ro.symbols, res.constants)
                    self.memory.insert(self.memory.make_entry(tree, res.reward, stage))
            self.update_policy(rollouts, energies)
            if epochs % cfg.refine_period == 0:
                self.refine(stage, points)
            batch_best = float(rewards.max()) if len(rewards) else 0.0
            mem_best = self.memory.best.reward if self.memory.best else 0.0
            best = max(best, batch_best, mem_best)
            self.scheduler.step(batch_best)
            entropy = float(np.mean(np.concatenate([ro.entropies for ro in rollouts]))) if rollouts else 0.0
            record = EpochRecord(
                epoch=len(self.history) + 1,
                stage=stage,
                stage_epoch=epochs,
                best_reward=best,
                batch_best_reward=batch_best,
                mean_reward=float(rewards.mean()) if len(rewards) else 0.0,
                mean_entropy=entropy,
                lr=self.optimizer.lr,
                memory_size=len(self.memory),
                best_expression=to_prefix_string(self.memory.best.tree) if self.memory.best else "",
            )
            self.history.append(record)
            if self.on_epoch:
                self.on_epoch(record)
            if best > cfg.advance_reward:
                early = True
                break
        return StageReport(stage, epochs, best, early)

    def run_curriculum(self) -> RunResult:
        start = time.perf_counter()
        stages = self.stage_list()
        reports = []
        for i, stage in enumerate(stages):
            reports.append(self.train_stage(stage, final=i == len(stages) - 1))
        best = self.memory.best
        m = srr = None
        if best is not None and self.problem.solution is not None:
            m = mse(best.tree, None, self.problem)
            srr = bool(srr_check(best.tree, None, self.problem))
        return RunResult(
            problem=self.problem.name,
            seed=self.config.seed,
            best=best,
            reward=best.reward if best else 0.0,
            mse=m,
            srr=srr,
            stages=reports,
            history=list(self.history),
            memory=list(self.memory.entries),
            wall_clock=time.perf_counter() - start,
        )


def run_curriculum(problem: PdeProblem, config: TrainerConfig | None = None,
                   policy_config: PolicyConfig | None = None) -> RunResult:
    return Trainer(problem, config, policy_config).run_curriculum()
