"""HR@k evaluation with sampled negatives, seed aggregation, and the MF-BPR baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .graph import EdgeSplit

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    k: int = 5
    negatives_per_positive: int = 49
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # "skip": drop test edges whose user lacks enough candidate negatives;
    # "replace": draw that user's negatives with replacement instead
    short_pool: str = "skip"

    def __post_init__(self):
        if self.k >= 1 + self.negatives_per_positive:
            raise ValueError("k must be smaller than the candidate list")
        if self.short_pool not in ("skip", "replace"):
            raise ValueError("short_pool must be 'skip' or 'replace'")


@dataclass(frozen=True, eq=False)
class Candidates:
    """Fixed candidate lists: column 0 is the true item, the rest negatives."""

    users: np.ndarray
    items: np.ndarray  # (n_eval, 1 + negatives)
    skipped: int


@dataclass(frozen=True)
class HrResult:
    hr: float
    hits: int
    evaluated: int
    skipped: int


def build_candidates(
    split: EdgeSplit, protocol: EvalProtocol, seed: int, partition: str = "test"
) -> Candidates:
    """Draw negatives per held-out edge with an RNG keyed by ``(seed, edge index)``.

    Negatives exclude every known positive of the user in any partition.
    """
    edges = getattr(split, partition)
    full = split.all_positive_graph()
    n_items = full.item_count
    n_neg = protocol.negatives_per_positive
    users, rows = [], []
    skipped = 0
    for idx, (u, i) in enumerate(edges):
        pos = full.items_of(int(u))
        mask = np.ones(n_items, dtype=bool)
        mask[pos] = False
        pool = np.flatnonzero(mask)
        rng = np.random.default_rng([seed, idx])
        if len(pool) >= n_neg:
            negs = rng.choice(pool, size=n_neg, replace=False)
        elif protocol.short_pool == "replace" and len(pool) > 0:
            negs = rng.choice(pool, size=n_neg, replace=True)
        else:
            skipped += 1
            log.warning("skipping %s edge %d: user %d has only %d candidate negatives",
                        partition, idx, u, len(pool))
            continue
        users.append(int(u))
        rows.append(np.concatenate([[int(i)], negs]))
    items = np.array(rows, dtype=np.int64).reshape(-1, 1 + n_neg)
    return Candidates(np.array(users, dtype=np.int64), items, skipped)


def hits_from_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Pessimistic hit indicator per row; column 0 holds the true item's score."""
    better_or_tied = (scores[:, 1:] >= scores[:, :1]).sum(axis=1)
    return better_or_tied + 1 <= k


def evaluate_hr(
    scorer: Scorer,
    split: EdgeSplit,
    protocol: EvalProtocol = EvalProtocol(),
    seed: int = 0,
    partition: str = "test",
    candidates: Candidates | None = None,
) -> HrResult:
    cands = candidates if candidates is not None else build_candidates(split, protocol, seed, partition)
    n = len(cands.users)
    if n == 0:
        raise ProtocolError(f"no evaluable {partition} edges ({cands.skipped} skipped)")
    width = cands.items.shape[1]
    scores = scorer(np.repeat(cands.users, width), cands.items.reshape(-1)).reshape(n, width)
    hits = int(hits_from_scores(scores, protocol.k).sum())
    return HrResult(hits / n, hits, n, cands.skipped)


class RandomScorer:
    """Uniform random scores; a fresh draw on every call."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return self.rng.random(len(users))


# ---------------------------------------------------------------- seeds


@dataclass(frozen=True)
class SeedSummary:
    values: tuple[float, ...]
    mean: float
    std: float

    def formatted(self, percent: bool = True) -> str:
        c = 100.0 if percent else 1.0
        return f"{self.mean * c:.2f}±{self.std * c:.2f}"


def summarize(values: Sequence[float]) -> SeedSummary:
    v = np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return SeedSummary(tuple(float(x) for x in v), float(v.mean()), std)


def run_seeds(experiment: Callable[[int], float], seeds: Sequence[int]) -> SeedSummary:
    """Run ``experiment(seed)`` per seed and report mean and sample std."""
    return summarize([experiment(s) for s in seeds])


# ---------------------------------------------------------------- MF-BPR


@dataclass(frozen=True)
class MfConfig:
    dim: int = 32
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 256
    init_std: float = 0.1
    seed: int = 0


@dataclass
class MfParams:
    user_emb: ad.Tensor
    item_emb: ad.Tensor
    history: list = field(default_factory=list)

    def scorer(self) -> Scorer:
        U, V = self.user_emb.value, self.item_emb.value

        def score(users, items):
            return np.einsum("ij,ij->i", U[users], V[items])

        return score


def mf_init(n_users: int, n_items: int, cfg: MfConfig) -> MfParams:
    rng = np.random.default_rng(cfg.seed)
    return MfParams(
        ad.parameter(rng.normal(0.0, cfg.init_std, (n_users, cfg.dim)), "user_emb"),
        ad.parameter(rng.normal(0.0, cfg.init_std, (n_items, cfg.dim)), "item_emb"),
    )


def train_negatives(g, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn non-neighbor item per user (rejection sampling)."""
    from .graph import sample_negatives

    out = np.empty(len(users), dtype=np.int64)
    for k, u in enumerate(users):
        for _ in range(64):
            j = int(rng.integers(g.item_count))
            if not g.has_edge(int(u), j):
                out[k] = j
                break
        else:
            out[k] = sample_negatives(g, int(u), 1, seed=rng)[0]
    return out


def mf_baseline(
    split: EdgeSplit,
    cfg: MfConfig = MfConfig(),
    protocol: EvalProtocol = EvalProtocol(),
    eval_seed: int = 0,
) -> tuple[MfParams, HrResult]:
    """BPR-trained dot-product model; the epoch with best val HR is kept."""
    from .train import bpr_loss

    g = split.train_graph()
    params = mf_init(g.user_count, g.item_count, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = ad.Adam({"user_emb": params.user_emb, "item_emb": params.item_emb}, lr=cfg.lr)
    val_c = build_candidates(split, protocol, eval_seed, "val") if len(split.val) else None
    if val_c is not None and len(val_c.users) == 0:
        val_c = None
    best = (-1.0, params.user_emb.value.copy(), params.item_emb.value.copy())
    for epoch in range(cfg.epochs + 1):
        if epoch > 0:
            order = rng.permutation(len(split.train))
            total = 0.0
            for s in range(0, len(order), cfg.batch_size):
                e = split.train[order[s : s + cfg.batch_size]]
                neg = train_negatives(g, e[:, 0], rng)
                with ad.Tape() as tape:
                    pu = ad.index_rows(params.user_emb, e[:, 0])
                    s_pos = ad.sum_cols(ad.mul(pu, ad.index_rows(params.item_emb, e[:, 1])))
                    s_neg = ad.sum_cols(ad.mul(pu, ad.index_rows(params.item_emb, neg)))
                    loss = bpr_loss(s_pos, s_neg)
                tape.backward(loss)
                opt.step()
                total += float(loss.value)
        else:
            total = float("nan")
        val_hr = evaluate_hr(params.scorer(), split, protocol, eval_seed, "val", val_c).hr if val_c is not None else math.nan
        params.history.append({"epoch": epoch, "loss": total, "val_hr": val_hr})
        if val_c is None or val_hr > best[0]:
            best = (val_hr, params.user_emb.value.copy(), params.item_emb.value.copy())
    params.user_emb.value, params.item_emb.value = best[1], best[2]
    return params, evaluate_hr(params.scorer(), split, protocol, eval_seed, "test")
