"""Synthetic bipartite corpora: spanning seed edges plus preferential attachment."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import BipartiteGraph


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``communities > 1`` plants that many user/item blocks; a new edge stays
    inside the user's block except with probability ``mixing``.
    """

    user_count: int
    item_count: int
    target_density: float
    preferential_exponent: float = 0.0
    seed: int = 0
    communities: int = 1
    mixing: float = 0.0

    def __post_init__(self):
        if self.user_count < 1 or self.item_count < 1:
            raise ValueError("need at least one user and one item")
        if not 0 < self.target_density <= 1:
            raise ValueError("target_density must be in (0, 1]")
        if self.target_edges < max(self.user_count, self.item_count):
            raise ValueError(
                f"density {self.target_density} gives {self.target_edges} edges, fewer than "
                f"max(users, items) = {max(self.user_count, self.item_count)}"
            )
        if not 1 <= self.communities <= min(self.user_count, self.item_count):
            raise ValueError("communities must be between 1 and min(users, items)")
        if not 0 <= self.mixing <= 1:
            raise ValueError("mixing must be in [0, 1]")

    @property
    def target_edges(self) -> int:
        return math.ceil(self.target_density * self.user_count * self.item_count - 1e-9)

    def to_dict(self) -> dict:
        return asdict(self)


def _weights(deg: np.ndarray, exponent: float, mask: np.ndarray) -> np.ndarray | None:
    w = np.where(mask, np.maximum(deg, 1).astype(float) ** exponent, 0.0)
    total = w.sum()
    return None if total == 0 else w / total


def gen_synthetic(cfg: SynthConfig) -> BipartiteGraph:
    rng = np.random.default_rng(cfg.seed)
    n_u, n_i, C = cfg.user_count, cfg.item_count, cfg.communities
    # balanced random block assignment; every block gets >= 1 user and item
    u_block = rng.permutation(np.arange(n_u) % C)
    i_block = rng.permutation(np.arange(n_i) % C)
    adj = np.zeros((n_u, n_i), dtype=bool)

    for c in range(C):
        us = rng.permutation(np.flatnonzero(u_block == c))
        its = rng.permutation(np.flatnonzero(i_block == c))
        for k in range(max(len(us), len(its))):
            adj[us[k % len(us)], its[k % len(its)]] = True

    u_deg = adj.sum(axis=1)
    i_deg = adj.sum(axis=0)
    n_edges = int(u_deg.sum())
    exp = cfg.preferential_exponent
    while n_edges < cfg.target_edges:
        pu = _weights(u_deg, exp, u_deg < n_i)
        u = int(rng.choice(n_u, p=pu))
        free = ~adj[u]
        if C > 1 and rng.random() >= cfg.mixing:
            in_block = free & (i_block == u_block[u])
            if in_block.any():
                free = in_block
        pi = _weights(i_deg, exp, free)
        i = int(rng.choice(n_i, p=pi))
        adj[u, i] = True
        u_deg[u] += 1
        i_deg[i] += 1
        n_edges += 1

    rows, cols = np.nonzero(adj)
    return BipartiteGraph.from_edges(
        np.stack([rows, cols], axis=1),
        n_u,
        n_i,
        [f"u{k}" for k in range(n_u)],
        [f"i{k}" for k in range(n_i)],
    )


def gen_corpus(
    n_graphs: int,
    seed: int,
    user_range: tuple[int, int] = (60, 160),
    item_range: tuple[int, int] = (60, 140),
    density_range: tuple[float, float] = (0.03, 0.1),
    exponent_range: tuple[float, float] = (0.0, 1.5),
    communities_range: tuple[int, int] = (1, 4),
    mixing: float = 0.1,
) -> list[SynthConfig]:
    """Configs for a corpus of graphs with spread-out sizes, densities and skews."""
    rng = np.random.default_rng(seed)
    cfgs = []
    for k in range(n_graphs):
        while True:
            n_u = int(rng.integers(user_range[0], user_range[1] + 1))
            n_i = int(rng.integers(item_range[0], item_range[1] + 1))
            dens = round(float(rng.uniform(*density_range)), 4)
            if dens * n_u * n_i >= max(n_u, n_i):
                break
        cfgs.append(
            SynthConfig(
                user_count=n_u,
                item_count=n_i,
                target_density=dens,
                preferential_exponent=round(float(rng.uniform(*exponent_range)), 3),
                seed=int(rng.integers(2**31)),
                communities=int(rng.integers(communities_range[0], communities_range[1] + 1)),
                mixing=mixing,
            )
        )
    return cfgs
