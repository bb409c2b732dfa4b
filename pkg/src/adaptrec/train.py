"""BPR objective, multi-graph pre-training, and fine-tuning strategies."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluate import EvalProtocol, build_candidates, evaluate_hr, train_negatives
from .graph import BipartiteGraph, EdgeSplit, split_dataset
from .model import (
    Checkpoint,
    LgnnScorer,
    ModelConfig,
    Params,
    SubgraphSampler,
    adaptor_names,
    conv_weights,
    copy_params,
    init_params,
    lgnn_logits,
    materialize_adapted,
    meta_names,
)
from .props import compute_properties, fit_norm, normalize
from .subgraph import RwrConfig

log = logging.getLogger(__name__)

STRATEGIES = ("direct", "joint", "scratch")


def bpr_loss(s_pos: Tensor, s_neg: Tensor) -> Tensor:
    """Sum over pairs of ``-ln sigmoid(s_pos - s_neg)``."""
    return ad.sum_all(ad.neg_log_sigmoid(ad.sub(s_pos, s_neg)))


def pair_loss(
    sampler: SubgraphSampler,
    users: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    thetas: Sequence[Tensor],
    delta: Tensor,
    cfg: ModelConfig,
    train: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    b = len(users)
    logits = lgnn_logits(
        sampler, np.concatenate([users, users]), np.concatenate([pos, neg]),
        thetas, delta, cfg, train, rng,
    )
    s = logits if cfg.presigmoid_bpr else ad.sigmoid(logits)
    return bpr_loss(ad.take_range(s, 0, b), ad.take_range(s, b, 2 * b))


def trainable_names(strategy: str, cfg: ModelConfig) -> list[str]:
    """Parameters exposed to the optimizer per training mode."""
    if strategy == "pretrain":
        return meta_names(cfg) + adaptor_names(cfg) + ["delta"]
    if strategy in ("pretrain-no-adaptor", "scratch"):
        return meta_names(cfg) + ["delta"]
    if strategy == "joint":
        return meta_names(cfg) + adaptor_names(cfg) + ["delta"]
    if strategy == "direct":
        return [f"theta_m.{l}" for l in range(cfg.n_layers)] + ["delta"]
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------- pre-training


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 256
    samples_per_epoch: int | None = None  # default: half the corpus interactions
    learning_rate: float = 0.001
    max_epochs: int = 20
    patience: int = 5
    heldout_frac: float = 0.05
    use_adaptor: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def training_positives(g: BipartiteGraph, edges: np.ndarray) -> np.ndarray:
    """Edges usable as training positives: removing one leaves both endpoints connected.

    A positive's subgraph is extracted with the target edge removed. When an
    endpoint has degree 1 that removal isolates it, a pattern held-out edges
    never show (the cold-start constraint keeps their endpoints in train), and
    the scorer learns "disconnected means positive". Falls back to all edges
    when none qualify.
    """
    if len(edges) == 0:
        return edges
    du, di = g.user_degrees(), g.item_degrees()
    ok = (du[edges[:, 0]] >= 2) & (di[edges[:, 1]] >= 2)
    if not ok.any():
        log.warning("no edge keeps both endpoints connected when removed; using all %d edges", len(edges))
        return edges
    return edges[ok]


def _sample_positives(edges: np.ndarray, b: int, rng: np.random.Generator) -> np.ndarray:
    if len(edges) >= b:
        return edges[rng.choice(len(edges), size=b, replace=False)]
    log.info("graph has %d train edges < batch %d; sampling with replacement", len(edges), b)
    return edges[rng.integers(len(edges), size=b)]


def pretrain(
    graphs: Sequence[BipartiteGraph],
    cfg: PretrainConfig = PretrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    rwr: RwrConfig = RwrConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """Train meta weights, adaptor and scorer jointly over a corpus of graphs.

    Each batch draws one graph uniformly, derives its customized weights from
    its property vector, and takes one Adam step on ``batch_size`` positive
    and negative pairs. A small held-out slice of every graph drives early
    stopping; the best held-out epoch is returned.
    """
    if not graphs:
        raise ValueError("pre-training corpus is empty")
    splits = [split_dataset(g, cfg.heldout_frac, 0.0, cfg.seed + m) for m, g in enumerate(graphs)]
    train_graphs = [s.train_graph() for s in splits]
    pvs = [compute_properties(g) for g in train_graphs]
    norm = fit_norm(pvs)
    p_norms = [normalize(pv, norm) for pv in pvs]
    samplers = [SubgraphSampler(g, rwr, cfg.seed + 7919 * m, model_cfg.l_max) for m, g in enumerate(train_graphs)]
    positives = [training_positives(g, sp.train) for g, sp in zip(train_graphs, splits)]
    total_edges = sum(g.edge_count for g in train_graphs)
    n_samples = cfg.samples_per_epoch or max(cfg.batch_size, total_edges // 2)
    if n_samples >= total_edges:
        raise ValueError(f"samples_per_epoch {n_samples} must be below corpus size {total_edges}")
    n_batches = max(1, n_samples // cfg.batch_size)

    params = init_params(model_cfg, cfg.seed)
    mode = "adapted" if cfg.use_adaptor else "meta"
    registry = trainable_names("pretrain" if cfg.use_adaptor else "pretrain-no-adaptor", model_cfg)
    opt = ad.Adam({k: params[k] for k in registry}, lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 11])
    drop_rng = np.random.default_rng([cfg.seed, 13])

    held = []
    for m, (s, g) in enumerate(zip(splits, train_graphs)):
        if len(s.val):
            neg = train_negatives(g, s.val[:, 0], np.random.default_rng([cfg.seed, 17, m]))
            held.append((m, s.val, neg))

    def heldout_loss() -> float:
        if not held:
            return math.nan
        total, count = 0.0, 0
        for m, e, neg in held:
            thetas = [Tensor(t.value) for t in conv_weights(params, model_cfg, mode, p_norms[m])]
            loss = pair_loss(samplers[m], e[:, 0], e[:, 1], neg, thetas,
                             Tensor(params["delta"].value), model_cfg, False, None)
            total += float(loss.value)
            count += len(e)
        return total / count

    history = []
    best = (heldout_loss(), copy_params(params))
    history.append({"epoch": 0, "loss": math.nan, "heldout_loss": best[0]})
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        running = 0.0
        for _ in range(n_batches):
            m = int(rng.integers(len(graphs)))
            e = _sample_positives(positives[m], cfg.batch_size, rng)
            neg = train_negatives(train_graphs[m], e[:, 0], rng)
            with ad.Tape() as tape:
                thetas = conv_weights(params, model_cfg, mode, p_norms[m])
                loss = pair_loss(samplers[m], e[:, 0], e[:, 1], neg, thetas,
                                 params["delta"], model_cfg, True, drop_rng)
            tape.backward(loss)
            opt.step()
            running += float(loss.value) / len(e)
        h = heldout_loss()
        row = {"epoch": epoch, "loss": running / n_batches, "heldout_loss": h}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if not h >= best[0]:
            best = (h, copy_params(params))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    ck = Checkpoint(
        best[1],
        model_cfg,
        norm,
        rwr,
        {"pretrain": asdict(cfg), "graphs": len(graphs)},
    )
    return PretrainResult(ck, history)


# ---------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 256
    learning_rate: float = 0.001
    max_epochs: int = 30
    patience: int | None = None  # epochs without val-HR gain before stopping
    seed: int = 0
    eval_seed: int = 0


@dataclass
class FinetuneResult:
    strategy: str
    params: Params
    mode: str
    p_norm: np.ndarray | None
    history: list[dict]
    best_epoch: int
    best_val_hr: float

    def scorer(self, sampler: SubgraphSampler, cfg: ModelConfig) -> LgnnScorer:
        return LgnnScorer(sampler, self.params, cfg, self.mode, self.p_norm)


def target_property_vector(ck: Checkpoint, g: BipartiteGraph) -> np.ndarray:
    if ck.norm is None:
        raise ValueError("checkpoint carries no normalization stats")
    return normalize(compute_properties(g), ck.norm)


def finetune(
    ck: Checkpoint | None,
    split: EdgeSplit,
    strategy: str,
    cfg: FinetuneConfig = FinetuneConfig(),
    protocol: EvalProtocol = EvalProtocol(),
    model_cfg: ModelConfig | None = None,
    rwr: RwrConfig | None = None,
    sampler: SubgraphSampler | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> FinetuneResult:
    """Fine-tune on the train partition; keep the epoch with the best val HR.

    ``direct`` optimizes customized weights materialized once through the
    frozen adaptor; ``joint`` optimizes meta weights and adaptor, re-deriving
    the customized weights every step; ``scratch`` trains a freshly
    initialized model with no adaptor. Epoch 0 is the untouched start model.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy != "scratch" and ck is None:
        raise ValueError(f"strategy {strategy!r} needs a pre-trained checkpoint")
    mcfg = model_cfg or (ck.model if ck is not None else ModelConfig())
    rwr = rwr or (ck.rwr if ck is not None else RwrConfig())
    g = split.train_graph()
    sampler = sampler or SubgraphSampler(g, rwr, cfg.seed, mcfg.l_max)

    p_norm = None
    if strategy == "scratch":
        params, mode = init_params(mcfg, cfg.seed), "meta"
    elif strategy == "direct":
        p_norm = target_property_vector(ck, g)
        params, mode = materialize_adapted(ck.params, mcfg, p_norm), "direct"
    else:
        p_norm = target_property_vector(ck, g)
        params, mode = copy_params(ck.params), "adapted"
    registry = trainable_names(strategy, mcfg)
    opt = ad.Adam({k: params[k] for k in registry}, lr=cfg.learning_rate)
    train_pos = training_positives(g, split.train)
    rng = np.random.default_rng([cfg.seed, 23])
    drop_rng = np.random.default_rng([cfg.seed, 29])
    val_c = build_candidates(split, protocol, cfg.eval_seed, "val") if len(split.val) else None
    if val_c is not None and len(val_c.users) == 0:
        val_c = None

    def val_hr() -> float:
        if val_c is None:
            return math.nan
        scorer = LgnnScorer(sampler, params, mcfg, mode, p_norm)
        return evaluate_hr(scorer, split, protocol, cfg.eval_seed, "val", val_c).hr

    history = [{"epoch": 0, "loss": math.nan, "val_hr": val_hr()}]
    best = (history[0]["val_hr"], 0, copy_params(params))
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_pos))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            e = train_pos[order[s : s + cfg.batch_size]]
            neg = train_negatives(g, e[:, 0], rng)
            with ad.Tape() as tape:
                thetas = conv_weights(params, mcfg, mode, p_norm)
                loss = pair_loss(sampler, e[:, 0], e[:, 1], neg, thetas,
                                 params["delta"], mcfg, True, drop_rng)
            tape.backward(loss)
            opt.step()
            total += float(loss.value)
        row = {"epoch": epoch, "loss": total / len(order), "val_hr": val_hr()}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if row["val_hr"] > best[0] or (math.isnan(best[0]) and val_c is None):
            best = (row["val_hr"], epoch, copy_params(params))
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    return FinetuneResult(strategy, best[2], mode, p_norm, history, best[1], best[0])
