"""Acceptance checks, one test per criterion.

Every test records a single ``CRITERION n: PASS|FAIL ...`` line; the lines are
printed together at the end of the pytest session (see conftest.py) and when
this file is run as a script.

Criteria 7 and 9 share one pre-training run and one seed grid, which takes
tens of minutes on one core.
"""

from __future__ import annotations

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

import oracles
from adaptrec import autodiff as ad
from adaptrec.evaluate import EvalProtocol, RandomScorer, evaluate_hr
from adaptrec.experiments import (
    FamilyConfig,
    RunSettings,
    best_adapt,
    relative_drop,
    run_grid,
    synthetic_family,
)
from adaptrec.graph import BipartiteGraph, split_dataset
from adaptrec.model import (
    LgnnScorer,
    ModelConfig,
    SubgraphSampler,
    build_batch,
    conv_weights,
    forward_logits,
    init_params,
    prepare,
)
from adaptrec.props import (
    compute_properties,
    connected_components,
    degree_assortativity,
    global_efficiency,
    robins_alexander_clustering,
)
from adaptrec.subgraph import LocalSubgraph, drnl_label
from adaptrec.synth import SynthConfig, gen_synthetic
from adaptrec.train import FinetuneConfig, PretrainConfig, bpr_loss, finetune, pretrain
from conftest import random_bipartite

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[n] = line
    print(line)


# ---------------------------------------------------------------- 1 gradients


def _random_local(rng, n_nodes=10):
    """Random connected-ish bipartite local graph; targets at 0 (user) and 1 (item)."""
    n_u = int(rng.integers(3, n_nodes - 2))
    users = [0] + list(range(2, 1 + n_u))
    items = [1] + list(range(1 + n_u, n_nodes))
    edges = [(u, i) for u in users for i in items if (u, i) != (0, 1) and rng.random() < 0.45]
    e = np.array(edges, dtype=np.int64).reshape(-1, 2)
    is_item = np.zeros(n_nodes, dtype=bool)
    is_item[items] = True
    return LocalSubgraph(np.arange(n_nodes), is_item, e, drnl_label(n_nodes, e))


def test_criterion_1_gradient_check():
    cfg = ModelConfig(l_max=6, hidden=4, n_layers=3, trunk=5, dropout=0.0)
    rng = np.random.default_rng(1)
    params = init_params(cfg, 0)
    for p in params.values():  # move off the identity init so every path carries signal
        p.value = rng.normal(0, 0.5, size=p.shape)
    pos, neg = _random_local(rng), _random_local(rng)
    batch = build_batch([prepare(pos, cfg.l_max), prepare(neg, cfg.l_max)])
    p_norm = rng.normal(size=8)

    def loss():
        thetas = conv_weights(params, cfg, "adapted", p_norm)
        s = ad.sigmoid(forward_logits(batch, thetas, params["delta"], cfg))
        return bpr_loss(ad.take_range(s, 0, 1), ad.take_range(s, 1, 2))

    with ad.Tape() as tape:
        value = loss()
    tape.backward(value)
    errs, h = [], 1e-5
    for p in params.values():
        flat, grad = p.value.reshape(-1), p.grad.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = float(loss().value)
            flat[k] = old - h
            down = float(loss().value)
            flat[k] = old
            num = (up - down) / (2 * h)
            errs.append(abs(grad[k] - num) / max(abs(grad[k]), abs(num), 1e-6))
    errs = np.array(errs)
    frac = float(np.mean(errs < 1e-4))
    ok = frac >= 0.99 and errs.max() < 1e-3
    record(1, ok, f"{len(errs)} params, {frac:.4f} below 1e-4, max rel err {errs.max():.2e}")
    assert ok


# ---------------------------------------------------------------- 2 DRNL


def test_criterion_2_drnl_oracle():
    rng = np.random.default_rng(2)
    mismatches, zero_cases = 0, 0
    for _ in range(200):
        n_u, n_i = int(rng.integers(1, 16)), int(rng.integers(1, 16))
        users = [0] + list(range(2, 1 + n_u))
        items = [1] + list(range(1 + n_u, n_u + n_i))
        p = rng.uniform(0.03, 0.5)
        edges = np.array([(u, i) for u in users for i in items if (u, i) != (0, 1) and rng.random() < p],
                         dtype=np.int64).reshape(-1, 2)
        got = drnl_label(n_u + n_i, edges).tolist()
        want = oracles.drnl(n_u + n_i, edges.tolist())
        mismatches += got != want
        zero_cases += 0 in want
    ok = mismatches == 0 and zero_cases > 0
    record(2, ok, f"200 graphs, {mismatches} mismatches, {zero_cases} with unreachable label-0 nodes")
    assert ok


# ---------------------------------------------------------------- 3 FiLM identity


def test_criterion_3_film_identity():
    g = gen_synthetic(SynthConfig(80, 60, 0.08, 1.0, seed=3, communities=2))
    cfg = ModelConfig()
    params = init_params(cfg, 5)
    rng = np.random.default_rng(3)
    users, items = rng.integers(g.user_count, size=1000), rng.integers(g.item_count, size=1000)
    sampler = SubgraphSampler(g, seed=0)
    meta = LgnnScorer(sampler, params, cfg, "meta")(users, items)
    custom = LgnnScorer(sampler, params, cfg, "adapted", rng.normal(size=8))(users, items)
    diff = float(np.max(np.abs(meta - custom)))
    ok = diff <= 1e-12
    record(3, ok, f"1000 pairs, max |customized - meta| = {diff:.1e}")
    assert ok


# ---------------------------------------------------------------- 4 properties


def _small_graphs():
    for n_u, n_i in itertools.product(range(1, 4), range(1, 4)):
        pairs = list(itertools.product(range(n_u), range(n_i)))
        for mask in range(1, 2 ** len(pairs)):
            yield n_u, n_i, [pairs[k] for k in range(len(pairs)) if mask >> k & 1]
    rng = np.random.default_rng(4)
    for _ in range(100):
        g = random_bipartite(rng, 6, 6)
        yield g.user_count, g.item_count, [tuple(e) for e in g.edges.tolist()]


def test_criterion_4_property_oracles():
    checked, bad = 0, []
    for n_u, n_i, edges in _small_graphs():
        g = BipartiteGraph.from_edges(edges, n_u, n_i)
        e = [tuple(x) for x in g.edges.tolist()]
        got = (
            compute_properties(g).density,
            degree_assortativity(g),
            connected_components(g),
            global_efficiency(g),
            robins_alexander_clustering(g),
        )
        want = (
            len(e) / (n_u * n_i),
            oracles.assortativity(e),
            oracles.components(n_u, n_i, e),
            oracles.efficiency(n_u, n_i, e),
            oracles.robins_alexander(n_u, n_i, e),
        )
        checked += 1
        if got[2] != want[2] or any(abs(a - b) > 1e-12 for a, b in zip(got, want)):
            bad.append((n_u, n_i, e, got, want))
    k22 = robins_alexander_clustering(BipartiteGraph.from_edges([(0, 0), (0, 1), (1, 0), (1, 1)]))
    path = global_efficiency(BipartiteGraph.from_edges([(0, 0), (1, 0)]))
    ok = not bad and k22 == 1.0 and abs(path - 5 / 6) <= 1e-15
    record(4, ok, f"{checked} graphs, {len(bad)} mismatches; K22 clustering {k22}, path efficiency {path:.15f}")
    assert ok, bad[:3]


# ---------------------------------------------------------------- 5 random anchor


def test_criterion_5_random_anchor():
    g = gen_synthetic(SynthConfig(500, 150, 0.08, 0.5, seed=5))
    split = split_dataset(g, 0.05, 0.2, seed=5)
    res = evaluate_hr(RandomScorer(5), split)
    ok = res.evaluated >= 1000 and abs(res.hr - 0.10) <= 0.03
    record(5, ok, f"HR@5 {res.hr:.4f} over {res.evaluated} test edges (target 0.10 +/- 0.03)")
    assert ok


# ---------------------------------------------------------------- 6 learnability


def test_criterion_6_learnability():
    g = gen_synthetic(SynthConfig(50, 50, 0.06, 0.0, seed=6, communities=2, mixing=0.0))
    prot = EvalProtocol(short_pool="replace")  # 50 items cannot always supply 49 negatives
    vals, tests = [], []
    for seed in range(5):
        split = split_dataset(g, 0.05, 0.05, seed)
        res = finetune(None, split, "scratch",
                       FinetuneConfig(max_epochs=100, batch_size=32, seed=seed, eval_seed=seed), prot)
        sampler = SubgraphSampler(split.train_graph(), seed=seed)
        vals.append(res.best_val_hr)
        tests.append(evaluate_hr(res.scorer(sampler, ModelConfig()), split, prot, seed).hr)
    ok = float(np.mean(vals)) >= 0.30 and float(np.mean(tests)) > 0.10
    record(6, ok, f"best val HR@5 mean {np.mean(vals):.3f} {np.round(vals, 3).tolist()}, "
                  f"test HR@5 mean {np.mean(tests):.3f} (threshold 0.30, random 0.10)")
    assert ok


# ---------------------------------------------------------------- 8 determinism


def test_criterion_8_determinism(tmp_path, monkeypatch):
    from adaptrec.cli import main

    monkeypatch.setenv("ADAPT_RUN_DIR", str(tmp_path / "runs"))
    monkeypatch.chdir(tmp_path)
    fam = ["--set", "family.n_graphs=3", "--set", "family.user_range=[30,45]",
           "--set", "family.item_range=[30,45]", "--set", "family.density_range=[0.12,0.2]"]
    small = ["--set", "model.hidden=8", "--set", "model.trunk=8", "--set", "eval.short_pool=replace"]
    outputs = []
    for rep in range(2):
        d = f"rep{rep}"
        cmds = [
            ["synth", "--family", "--out", d, *fam],
            ["prepare", f"{d}/target.tsv", "--keep-frac", "0.6", "--out", d],
            ["pretrain", f"{d}/corpus", "--epochs", "2", "--batch-size", "32",
             "--set", "pretrain.samples_per_epoch=64", *small, "--out", f"{d}/ck.npz"],
            ["finetune", "--checkpoint", f"{d}/ck.npz", "--manifest", f"{d}/manifest.tsv",
             "--strategy", "joint", "--epochs", "2", *small, "--out", f"{d}/model.npz"],
            ["eval", "--checkpoint", f"{d}/model.npz", "--manifest", f"{d}/manifest.tsv", *small],
        ]
        for c in cmds:
            assert main([*c, "--run-dir", f"runs{rep}"]) == 0, c
        blobs = [Path(d, "manifest.tsv").read_bytes(), Path(d, "ck.npz").read_bytes(),
                 Path(d, "model.npz").read_bytes()]
        for r in sorted(Path(f"runs{rep}").iterdir(), key=lambda p: p.name.split("-", 2)[2]):
            for name in ("metrics.tsv", "result.txt", "report.tsv", "summary.txt"):
                if (r / name).exists():
                    blobs.append((r / name).read_bytes())
        outputs.append(blobs)
    differ = [k for k, (a, b) in enumerate(zip(*outputs)) if a != b]
    ok = len(outputs[0]) == len(outputs[1]) and not differ
    record(8, ok, f"{len(outputs[0])} artifacts (manifest, checkpoints, metrics, reports) byte-identical on rerun")
    assert ok, differ


# ---------------------------------------------------------------- 7 and 9: transfer


TRANSFER_FAMILY = FamilyConfig(density_range=(0.01, 0.06))
TRANSFER_PRETRAIN = PretrainConfig(max_epochs=40, patience=40, seed=0)
TRANSFER_SETTINGS = RunSettings(finetune=FinetuneConfig(max_epochs=20))


@pytest.fixture(scope="module")
def transfer_grid():
    corpus, target = synthetic_family(TRANSFER_FAMILY)
    ck = pretrain(corpus, TRANSFER_PRETRAIN).checkpoint
    sparse = run_grid(ck, target, ["random-init", "customized-GNN", "ADAPT-D", "ADAPT-J", "scratch"],
                      [0.4], TRANSFER_SETTINGS)
    full = run_grid(ck, target, ["ADAPT-D", "ADAPT-J", "scratch"], [1.0], TRANSFER_SETTINGS)
    sparse.rows.extend(full.rows)
    print(sparse.table())
    return sparse


def test_criterion_7_transfer(transfer_grid):
    r = transfer_grid
    rand, cust = r.values("random-init", 0.4), r.values("customized-GNN", 0.4)
    adapt, scratch = best_adapt(r, 0.4), r.values("scratch", 0.4)
    wins = sum(a >= s for a, s in zip(adapt, scratch))
    ok = (np.mean(cust) > np.mean(rand) and np.mean(adapt) >= np.mean(scratch) and wins >= 4)
    record(7, ok, f"keep 0.4: customized {np.mean(cust):.3f} vs random-init {np.mean(rand):.3f}; "
                  f"ADAPT(best of D/J) {np.mean(adapt):.3f} vs scratch {np.mean(scratch):.3f}, "
                  f"ADAPT >= scratch in {wins}/5 seeds")
    assert ok


def test_criterion_9_sparsity_trend(transfer_grid):
    r = transfer_grid
    adapt_drop = relative_drop(best_adapt(r, 1.0), best_adapt(r, 0.4))
    scratch_drop = relative_drop(r.values("scratch", 1.0), r.values("scratch", 0.4))
    ok = adapt_drop < scratch_drop
    record(9, ok, f"relative HR drop keep 1.0 -> 0.4: ADAPT {adapt_drop:.3f} vs scratch {scratch_drop:.3f}")
    assert ok


if __name__ == "__main__":
    # the criterion lines are printed by the terminal-summary hook in conftest.py
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
