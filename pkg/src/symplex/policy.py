"""SymFormer: a decoder-only transformer with tree-relative attention.

Two code paths share the same parameters:

* ``sample_batch`` decodes autoregressively in plain numpy with a key/value
  cache. It is exact because a position's relations to earlier positions
  never change once the position exists.
* ``score`` runs a padded batch forward through the autodiff engine and
  returns differentiable log-probabilities and entropies for training.

Position 0 holds a BOS token; the hidden state at position j predicts
prefix token j.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .expr import ExprTree, Token, Vocabulary, is_degenerate
from .grammar import (
    CHILD,
    N_RELATIONS,
    OTHER,
    SELF,
    SIBLING,
    PartialAst,
    relation_row,
    valid_mask,
)

CHECKPOINT_FORMAT = "symplex-params/1"
MAX_RESAMPLE = 10
LN_EPS = 1e-5


class InvalidTrajectoryError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class PolicyConfig:
    d_model: int = 64
    ffn_hidden: int = 128
    layers: int = 4
    heads: int = 8
    relation_types: int = N_RELATIONS
    d_max: int = 7
    temperature: float = 1.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.relation_types != N_RELATIONS:
            raise ValueError(f"relation_types must be {N_RELATIONS}")
        if self.d_max < 1:
            raise ValueError("d_max must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class Rollout:
    tokens: tuple[int, ...]
    symbols: tuple[str, ...]
    log_probs: np.ndarray
    entropies: np.ndarray
    masks: np.ndarray
    parents: tuple[int, ...]
    depth: int
    resamples: int = 0
    _tree: ExprTree | None = field(default=None, repr=False, compare=False)

    @property
    def log_prob(self) -> float:
        return float(self.log_probs.sum())

    @property
    def tree(self) -> ExprTree:
        if self._tree is None:
            self._tree = ExprTree(self.symbols)
        return self._tree

    def __len__(self):
        return len(self.tokens)


def positional_encoding(n: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin, odd columns cos, base 10000."""
    if n <= 0:
        raise ValueError("positional table needs at least one position")
    pos = np.arange(n)[:, None]
    rates = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _layer_norm_np(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * g + b


@dataclass
class ScoredBatch:
    seq_log_prob: ad.DiffArray  # (B,)
    step_entropy: ad.DiffArray  # (B, L), zero on padding
    lengths: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.lengths.sum())

    def mean_entropy(self) -> ad.DiffArray:
        return ad.mul(ad.sum(self.step_entropy), 1.0 / max(self.n_steps, 1))

    def per_token_log_prob(self) -> ad.DiffArray:
        return ad.mul(self.seq_log_prob, 1.0 / self.lengths)


class SymFormer:
    def __init__(self, vocab: Vocabulary, config: PolicyConfig | None = None, seed: int | np.random.Generator = 0):
        self.vocab = vocab
        self.config = config or PolicyConfig()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.bos = len(vocab)
        self.params: dict[str, ad.DiffArray] = {}
        self._init_params(rng)
        self._pe = positional_encoding(64, self.config.d_model)

    # -- parameters ------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        d, f, V = c.d_model, c.ffn_hidden, len(self.vocab)
        p = self.params

        def new(name, data):
            p[name] = ad.parameter(data, name=name)

        new("tok_emb", rng.normal(0.0, 1.0 / math.sqrt(d), size=(V + 1, d)))
        new("rel_emb", rng.uniform(-0.05, 0.05, size=(c.heads, N_RELATIONS, c.d_head)))
        for i in range(c.layers):
            for w in ("q", "k", "v", "o"):
                new(f"l{i}.W{w}", _xavier(rng, d, d))
                new(f"l{i}.b{w}", np.zeros(d))
            new(f"l{i}.ln1.g", np.ones(d))
            new(f"l{i}.ln1.b", np.zeros(d))
            new(f"l{i}.W1", _xavier(rng, d, f))
            new(f"l{i}.b1", np.zeros(f))
            new(f"l{i}.W2", _xavier(rng, f, d))
            new(f"l{i}.b2", np.zeros(d))
            new(f"l{i}.ln2.g", np.ones(d))
            new(f"l{i}.ln2.b", np.zeros(d))
        new("out.W", _xavier(rng, d, V))
        new("out.b", np.zeros(V))

    def parameters(self) -> list[ad.DiffArray]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def tie_embeddings(self, symbols: Sequence[str]):
        """Give the listed tokens one shared embedding row (test helper)."""
        rows = [self.vocab.index(s) for s in symbols]
        emb = self.params["tok_emb"].data
        emb[rows] = emb[rows[0]]

    def save(self, path: str | Path):
        save_params(path, self.params)

    def load(self, path: str | Path):
        load_params(path, self.params)

    def _pos(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError("positional table needs at least one position")
        if n > len(self._pe):
            self._pe = positional_encoding(max(n, 2 * len(self._pe)), self.config.d_model)
        return self._pe[:n]

    # -- differentiable forward ------------------------------------------

    def embed(self, input_ids: np.ndarray) -> ad.DiffArray:
        ids = np.asarray(input_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > self.bos):
            raise KeyError("token id outside the vocabulary")
        return ad.add(ad.gather_rows(self.params["tok_emb"], ids), self._pos(ids.shape[-1]))

    def forward(self, input_ids: np.ndarray, relations: np.ndarray) -> ad.DiffArray:
        """Logits (B, L, V) for padded inputs and relation codes (B, L, L)."""
        c = self.config
        p = self.params
        ids = np.atleast_2d(input_ids)
        B, L = ids.shape
        rel = np.asarray(relations, dtype=np.int64).reshape(B, L, L)
        H, dh = c.heads, c.d_head
        causal = np.tril(np.ones((L, L), dtype=bool))
        rel_t = ad.transpose(p["rel_emb"], (0, 2, 1))  # (H, dh, 6)
        rel_idx = rel[:, None, :, :]
        scale = 1.0 / math.sqrt(dh)

        h = self.embed(ids)
        for i in range(c.layers):
            def heads(name):
                x = ad.add(ad.matmul(h, p[f"l{i}.W{name}"]), p[f"l{i}.b{name}"])
                return ad.transpose(ad.reshape(x, (B, L, H, dh)), (0, 2, 1, 3))

            q, k, v = heads("q"), heads("k"), heads("v")
            content = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
            structure = ad.take_along_last(ad.matmul(q, rel_t), rel_idx)
            att = ad.masked_softmax(ad.mul(ad.add(content, structure), scale), causal)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, c.d_model))
            o = ad.add(ad.matmul(o, p[f"l{i}.Wo"]), p[f"l{i}.bo"])
            h = ad.layer_norm(ad.add(h, o), p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"], LN_EPS)
            f = ad.relu(ad.add(ad.matmul(h, p[f"l{i}.W1"]), p[f"l{i}.b1"]))
            f = ad.add(ad.matmul(f, p[f"l{i}.W2"]), p[f"l{i}.b2"])
            h = ad.layer_norm(ad.add(h, f), p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"], LN_EPS)
        return ad.add(ad.matmul(h, p["out.W"]), p["out.b"])

    # -- trajectories ----------------------------------------------------

    def trajectory_masks(self, tokens: Sequence[Token | str | int], allowed: np.ndarray | None = None):
        """Replay the grammar; returns (token ids, parents, masks).

        Raises InvalidTrajectoryError when a token is not valid at its step.
        """
        ast = PartialAst()
        ids, masks = [], []
        for i, tok in enumerate(tokens):
            if ast.complete:
                raise InvalidTrajectoryError(f"token at index {i} follows a complete tree", i)
            j = tok if isinstance(tok, (int, np.integer)) else self._index(tok, i)
            mask = valid_mask(ast, self.vocab, self.config.d_max, allowed)
            if not mask[j]:
                raise InvalidTrajectoryError(
                    f"token {self.vocab[j].symbol!r} is not valid at index {i}", i
                )
            ids.append(int(j))
            masks.append(mask)
            ast.push(self.vocab[j])
        if not ast.complete:
            raise InvalidTrajectoryError("trajectory ends with open slots", len(ids))
        return ids, tuple(ast.parent), np.array(masks)

    def _index(self, tok, i):
        try:
            return self.vocab.index(tok)
        except KeyError:
            raise InvalidTrajectoryError(f"token {str(tok)!r} at index {i} not in vocabulary", i) from None

    @staticmethod
    def _relations(parents: Sequence[int], L: int) -> np.ndarray:
        """Relation codes over [BOS, node 0, ..., node n-2] padded to L."""
        r = np.full((L, L), OTHER, dtype=np.int64)
        np.fill_diagonal(r, SELF)
        m = min(len(parents), L - 1)
        for a in range(1, m + 1):
            pa = parents[a - 1]
            if pa >= 0:
                r[a, pa + 1] = CHILD
                for b in range(pa + 2, a):
                    if parents[b - 1] == pa:
                        r[a, b] = SIBLING
        return r

    def score(self, trajectories: Sequence[tuple[Sequence[int], Sequence[int], np.ndarray]]) -> ScoredBatch:
        """Differentiable log-probs and entropies for (ids, parents, masks) triples."""
        B = len(trajectories)
        lengths = np.array([len(t[0]) for t in trajectories])
        L = int(lengths.max())
        V = len(self.vocab)
        inputs = np.full((B, L), self.bos, dtype=np.int64)
        targets = np.zeros((B, L, 1), dtype=np.int64)
        masks = np.zeros((B, L, V), dtype=bool)
        masks[:, :, 0] = True  # padding rows need a non-empty support
        valid = np.zeros((B, L))
        rel = np.empty((B, L, L), dtype=np.int64)
        for b, (ids, parents, m) in enumerate(trajectories):
            n = len(ids)
            inputs[b, 1:n] = ids[:-1]
            targets[b, :n, 0] = ids
            masks[b, :n] = m
            valid[b, :n] = 1.0
            rel[b] = self._relations(parents, L)
        logits = self.forward(inputs, rel)
        if self.config.temperature != 1.0:
            logits = ad.mul(logits, 1.0 / self.config.temperature)
        logp = ad.masked_log_softmax(logits, masks)
        chosen = ad.mul(ad.reshape(ad.take_along_last(logp, targets), (B, L)), valid)
        probs = ad.mul(ad.exp(logp), masks.astype(float))
        ent = ad.mul(ad.mul(ad.sum(ad.mul(probs, logp), axis=-1), -1.0), valid)
        return ScoredBatch(ad.sum(chosen, axis=-1), ent, lengths)

    def score_rollouts(self, rollouts: Sequence[Rollout]) -> ScoredBatch:
        return self.score([(r.tokens, r.parents, r.masks) for r in rollouts])

    def sequence_log_prob(self, tokens: Sequence[Token | str | int], allowed: np.ndarray | None = None):
        """(total, per-token mean) differentiable log-probability of a sequence."""
        traj = self.trajectory_masks(tokens, allowed)
        scored = self.score([traj])
        total = ad.reshape(scored.seq_log_prob, ())
        return total, ad.mul(total, 1.0 / len(traj[0]))

    def next_token_distribution(self, prefix: Sequence[Token | str | int] = (),
                                allowed: np.ndarray | None = None) -> np.ndarray:
        """Masked next-token probabilities after an incomplete prefix."""
        ast = PartialAst()
        ids = []
        for i, tok in enumerate(prefix):
            j = tok if isinstance(tok, (int, np.integer)) else self._index(tok, i)
            ast.push(self.vocab[j])
            ids.append(int(j))
        mask = valid_mask(ast, self.vocab, self.config.d_max, allowed)
        n = len(ids)
        inputs = np.array([[self.bos] + ids])
        rel = self._relations(ast.parent, n + 1)
        with ad.no_grad():
            logits = self.forward(inputs, rel[None]).data[0, n]
        return _masked_probs(logits / self.config.temperature, mask)

    # -- sampling --------------------------------------------------------

    def sample_batch(self, n: int, rng: np.random.Generator, allowed: np.ndarray | None = None,
                     temperature: float | None = None) -> list[Rollout]:
        """Sample ``n`` complete rollouts, resampling degenerate ones."""
        temperature = self.config.temperature if temperature is None else temperature
        out: list[Rollout | None] = [None] * n
        attempts = [0] * n
        pending = list(range(n))
        while pending:
            batch = self._sample_raw(len(pending), rng, allowed, temperature)
            retry = []
            for slot, ro in zip(pending, batch):
                ro.resamples = attempts[slot]
                if attempts[slot] < MAX_RESAMPLE and is_degenerate(ro.tree):
                    attempts[slot] += 1
                    retry.append(slot)
                else:
                    out[slot] = ro
            pending = retry
        return out  # type: ignore[return-value]

    def _sample_raw(self, m: int, rng, allowed, temperature) -> list[Rollout]:
        c = self.config
        P = {k: v.data for k, v in self.params.items()}
        H, dh, d = c.heads, c.d_head, c.d_model
        V = len(self.vocab)
        scale = 1.0 / math.sqrt(dh)
        R = P["rel_emb"]

        asts = [PartialAst() for _ in range(m)]
        chosen: list[list[int]] = [[] for _ in range(m)]
        logps: list[list[float]] = [[] for _ in range(m)]
        ents: list[list[float]] = [[] for _ in range(m)]
        masks: list[list[np.ndarray]] = [[] for _ in range(m)]

        # caches hold only unfinished rollouts; rows[r] is the rollout in cache row r
        rows = np.arange(m)
        done = np.zeros(m, dtype=bool)
        cap = 32
        Kc = [np.zeros((m, H, cap, dh)) for _ in range(c.layers)]
        Vc = [np.zeros((m, H, cap, dh)) for _ in range(c.layers)]
        rel = np.zeros((m, cap), dtype=np.int64)
        inp = np.full(m, self.bos)
        s = 0
        while len(rows):
            n = len(rows)
            if s >= cap:
                grow = cap
                Kc = [np.concatenate([k, np.zeros((n, H, grow, dh))], axis=2) for k in Kc]
                Vc = [np.concatenate([v, np.zeros((n, H, grow, dh))], axis=2) for v in Vc]
                rel = np.concatenate([rel, np.zeros((n, grow), dtype=np.int64)], axis=1)
                cap += grow
            # relation row of position s against positions 0..s
            rel[:, : s + 1] = OTHER
            rel[:, s] = SELF
            if s > 0:
                for r, b in enumerate(rows):
                    if not done[b]:
                        rel[r, 1 : s + 1] = relation_row(asts[b].parent, s - 1)
            h = P["tok_emb"][inp] + self._pos(s + 1)[s]
            idx = np.broadcast_to(rel[:, None, : s + 1], (n, H, s + 1))
            for i in range(c.layers):
                q = (h @ P[f"l{i}.Wq"] + P[f"l{i}.bq"]).reshape(n, H, dh)
                Kc[i][:, :, s] = (h @ P[f"l{i}.Wk"] + P[f"l{i}.bk"]).reshape(n, H, dh)
                Vc[i][:, :, s] = (h @ P[f"l{i}.Wv"] + P[f"l{i}.bv"]).reshape(n, H, dh)
                keys = Kc[i][:, :, : s + 1]
                content = np.einsum("mhd,mhjd->mhj", q, keys)
                qr = np.einsum("mhd,hrd->mhr", q, R)
                scores = (content + np.take_along_axis(qr, idx, axis=-1)) * scale
                scores -= scores.max(axis=-1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=-1, keepdims=True)
                o = np.einsum("mhj,mhjd->mhd", w, Vc[i][:, :, : s + 1]).reshape(n, d)
                o = o @ P[f"l{i}.Wo"] + P[f"l{i}.bo"]
                h = _layer_norm_np(h + o, P[f"l{i}.ln1.g"], P[f"l{i}.ln1.b"])
                f = np.maximum(h @ P[f"l{i}.W1"] + P[f"l{i}.b1"], 0.0) @ P[f"l{i}.W2"] + P[f"l{i}.b2"]
                h = _layer_norm_np(h + f, P[f"l{i}.ln2.g"], P[f"l{i}.ln2.b"])
            logits = (h @ P["out.W"] + P["out.b"]) / temperature
            u = rng.random(n)
            for r, b in enumerate(rows):
                if done[b]:
                    continue
                mask = valid_mask(asts[b], self.vocab, c.d_max, allowed)
                probs = _masked_probs(logits[r], mask)
                j = int(np.searchsorted(np.cumsum(probs), u[r] * probs.sum(), side="right"))
                j = min(j, V - 1)
                while not mask[j]:  # guard against round-off at the cdf edges
                    j = (j - 1) % V
                with np.errstate(divide="ignore", invalid="ignore"):
                    lp = np.where(mask, np.log(probs), 0.0)
                chosen[b].append(j)
                logps[b].append(float(lp[j]))
                ents[b].append(float(-(probs * lp).sum()))
                masks[b].append(mask)
                asts[b].push(self.vocab[j])
                inp[r] = j
                if asts[b].complete:
                    done[b] = True
            s += 1
            live = ~done[rows]
            if live.sum() < 0.75 * n:
                rows, inp, rel = rows[live], inp[live], rel[live]
                Kc = [k[live] for k in Kc]
                Vc = [v[live] for v in Vc]

        out = []
        for b in range(m):
            ast = asts[b]
            out.append(
                Rollout(
                    tokens=tuple(chosen[b]),
                    symbols=tuple(t.symbol for t in ast.tokens),
                    log_probs=np.array(logps[b]),
                    entropies=np.array(ents[b]),
                    masks=np.array(masks[b]),
                    parents=tuple(ast.parent),
                    depth=ast.max_depth,
                )
            )
        return out


def _masked_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum()


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path: str | Path, params: dict[str, ad.DiffArray]):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "params": [
            {"name": k, "shape": list(v.shape), "values": v.data.ravel().tolist()}
            for k, v in params.items()
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path: str | Path, params: dict[str, ad.DiffArray]):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    for entry in doc["params"]:
        name = entry["name"]
        if name not in params:
            raise KeyError(f"checkpoint parameter {name!r} not in model")
        shape = tuple(entry["shape"])
        if shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name}: {shape} vs {params[name].shape}")
        params[name].data[...] = np.array(entry["values"], dtype=np.float64).reshape(shape)
