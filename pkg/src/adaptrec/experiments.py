"""Experiment runners: ablation table, transfer comparison, sparsity sweep.

Every runner pre-trains at most once and then loops over seeds. A seed fixes
the target split, the sparsified training set, fine-tuning initialization and
the evaluation negatives, so all variants of one seed see identical candidates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .evaluate import EvalProtocol, MfConfig, SeedSummary, evaluate_hr, mf_baseline, summarize
from .graph import BipartiteGraph, EdgeSplit, sparsify_train, split_dataset
from .model import Checkpoint, LgnnScorer, ModelConfig, SubgraphSampler, init_params
from .subgraph import RwrConfig
from .synth import SynthConfig, gen_corpus, gen_synthetic
from .train import FinetuneConfig, PretrainConfig, finetune, pretrain, target_property_vector

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("random-init", "meta-LGNN", "customized-GNN", "ADAPT-D", "ADAPT-J")
ALL_VARIANTS = ABLATION_VARIANTS + ("scratch", "MF")
_FINETUNED = {"ADAPT-D": "direct", "ADAPT-J": "joint", "scratch": "scratch"}


@dataclass(frozen=True)
class FamilyConfig:
    """A synthetic generator family; the last graph drawn is the held-out target."""

    n_graphs: int = 7
    seed: int = 100
    user_range: tuple[int, int] = (150, 300)
    item_range: tuple[int, int] = (100, 200)
    density_range: tuple[float, float] = (0.03, 0.06)
    exponent_range: tuple[float, float] = (0.0, 1.5)
    communities_range: tuple[int, int] = (1, 4)
    mixing: float = 0.1

    def configs(self) -> list[SynthConfig]:
        return gen_corpus(
            self.n_graphs, self.seed, self.user_range, self.item_range, self.density_range,
            self.exponent_range, self.communities_range, self.mixing,
        )


def synthetic_family(cfg: FamilyConfig = FamilyConfig()) -> tuple[list[BipartiteGraph], BipartiteGraph]:
    """Pre-training graphs and one held-out target from the same family."""
    if cfg.n_graphs < 2:
        raise ValueError("a family needs at least one pre-training graph and a target")
    graphs = [gen_synthetic(c) for c in cfg.configs()]
    return graphs[:-1], graphs[-1]


@dataclass(frozen=True)
class RunSettings:
    val_frac: float = 0.05
    test_frac: float = 0.05
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    finetune: FinetuneConfig = FinetuneConfig()
    mf: MfConfig = MfConfig()
    protocol: EvalProtocol = EvalProtocol()
    # used only when no checkpoint supplies them (scratch / MF runs)
    model: ModelConfig = ModelConfig()
    rwr: RwrConfig = RwrConfig()


def prepare_target(g: BipartiteGraph, val_frac: float, test_frac: float, keep_frac: float, seed: int) -> EdgeSplit:
    """Split, then thin the training part to ``keep_frac`` of its edges."""
    split = split_dataset(g, val_frac, test_frac, seed)
    return sparsify_train(split, keep_frac, seed) if keep_frac < 1.0 else split


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class Row:
    dataset: str
    keep_frac: float
    variant: str
    seed: int
    hr: float
    best_epoch: int | None = None


@dataclass
class Report:
    rows: list[Row] = field(default_factory=list)

    def values(self, variant: str, keep_frac: float | None = None, dataset: str | None = None) -> list[float]:
        return [
            r.hr for r in self.rows
            if r.variant == variant
            and (keep_frac is None or r.keep_frac == keep_frac)
            and (dataset is None or r.dataset == dataset)
        ]

    def summary(self, variant: str, keep_frac: float | None = None, dataset: str | None = None) -> SeedSummary:
        return summarize(self.values(variant, keep_frac, dataset))

    def groups(self) -> list[tuple[str, float, str]]:
        seen: dict[tuple[str, float, str], None] = {}
        for r in self.rows:
            seen.setdefault((r.dataset, r.keep_frac, r.variant))
        return list(seen)

    def to_tsv(self) -> str:
        lines = ["dataset\tkeep_frac\tvariant\tseed\thr\tbest_epoch"]
        for r in self.rows:
            ep = "" if r.best_epoch is None else str(r.best_epoch)
            lines.append(f"{r.dataset}\t{r.keep_frac!r}\t{r.variant}\t{r.seed}\t{r.hr!r}\t{ep}")
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        """Machine-readable summary, one ``key = value`` per line."""
        out = []
        for dataset, keep, variant in self.groups():
            s = self.summary(variant, keep, dataset)
            prefix = f"{dataset}.{keep!r}.{variant}"
            for seed, v in zip([r.seed for r in self.rows
                                if (r.dataset, r.keep_frac, r.variant) == (dataset, keep, variant)], s.values):
                out.append(f"{prefix}.seed{seed}.hr = {v!r}")
            out.append(f"{prefix}.mean = {s.mean!r}")
            out.append(f"{prefix}.std = {s.std!r}")
        return "\n".join(out) + "\n"

    def table(self) -> str:
        """Human-readable table: one line per variant, mean±std in percent."""
        lines = []
        for dataset, keep, variant in self.groups():
            s = self.summary(variant, keep, dataset)
            lines.append(f"{dataset:<12} keep={keep:<4} {variant:<15} {s.formatted()}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- runners


def evaluate_variants(
    ck: Checkpoint | None,
    split: EdgeSplit,
    variants: Sequence[str],
    seed: int,
    settings: RunSettings = RunSettings(),
) -> dict[str, tuple[float, int | None]]:
    """HR on the test partition per variant, all sharing one subgraph cache."""
    unknown = set(variants) - set(ALL_VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    needs_ck = set(variants) - {"scratch", "MF"}
    if needs_ck and ck is None:
        raise ValueError(f"variants {sorted(needs_ck)} need a pre-trained checkpoint")
    prot = settings.protocol
    model_cfg = ck.model if ck is not None else settings.model
    rwr = ck.rwr if ck is not None else settings.rwr
    sampler = SubgraphSampler(split.train_graph(), rwr, seed, model_cfg.l_max)
    ft = replace(settings.finetune, seed=seed, eval_seed=seed)
    out: dict[str, tuple[float, int | None]] = {}
    for v in variants:
        if v == "random-init":
            scorer = LgnnScorer(sampler, init_params(model_cfg, seed), model_cfg, "meta")
        elif v == "meta-LGNN":
            scorer = LgnnScorer(sampler, ck.params, model_cfg, "meta")
        elif v == "customized-GNN":
            p = target_property_vector(ck, sampler.graph)
            scorer = LgnnScorer(sampler, ck.params, model_cfg, "adapted", p)
        elif v == "MF":
            out[v] = (mf_baseline(split, replace(settings.mf, seed=seed), prot, seed)[1].hr, None)
            continue
        else:
            res = finetune(ck, split, _FINETUNED[v], ft, prot, model_cfg, rwr, sampler)
            out[v] = (evaluate_hr(res.scorer(sampler, model_cfg), split, prot, seed).hr, res.best_epoch)
            continue
        out[v] = (evaluate_hr(scorer, split, prot, seed).hr, None)
    return out


def run_grid(
    ck: Checkpoint | None,
    target: BipartiteGraph,
    variants: Sequence[str],
    keep_fracs: Sequence[float],
    settings: RunSettings = RunSettings(),
    dataset: str = "target",
    on_row: Callable[[Row], None] | None = None,
) -> Report:
    report = Report()
    for seed in settings.seeds:
        for keep in keep_fracs:
            split = prepare_target(target, settings.val_frac, settings.test_frac, keep, seed)
            for v, (hr, ep) in evaluate_variants(ck, split, variants, seed, settings).items():
                row = Row(dataset, float(keep), v, int(seed), hr, ep)
                report.rows.append(row)
                log.info("%s keep=%s %s seed=%d hr=%.4f", dataset, keep, v, seed, hr)
                if on_row:
                    on_row(row)
    return report


def ablation_suite(
    ck: Checkpoint,
    target: BipartiteGraph,
    keep_frac: float = 0.4,
    settings: RunSettings = RunSettings(),
    dataset: str = "target",
    on_row: Callable[[Row], None] | None = None,
) -> Report:
    """The five-row table: three untuned variants, then both fine-tuning strategies."""
    return run_grid(ck, target, ABLATION_VARIANTS, [keep_frac], settings, dataset, on_row)


def pretrain_family(
    family: FamilyConfig = FamilyConfig(),
    cfg: PretrainConfig = PretrainConfig(),
    **kwargs,
) -> tuple[Checkpoint, BipartiteGraph]:
    corpus, target = synthetic_family(family)
    return pretrain(corpus, cfg, **kwargs).checkpoint, target


# ---------------------------------------------------------------- verdicts


def best_adapt(report: Report, keep_frac: float) -> list[float]:
    """Per-seed max of ADAPT-D and ADAPT-J (the better fine-tuning strategy)."""
    d = report.values("ADAPT-D", keep_frac)
    j = report.values("ADAPT-J", keep_frac)
    return [max(a, b) for a, b in zip(d, j)]


def relative_drop(full: Sequence[float], sparse: Sequence[float]) -> float:
    """Mean over seeds of ``(hr_full - hr_sparse) / hr_full``."""
    full, sparse = np.asarray(full, float), np.asarray(sparse, float)
    return float(np.mean((full - sparse) / np.maximum(full, 1e-12)))
