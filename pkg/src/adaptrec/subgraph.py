"""Local graph around a (user, item) pair: RWR neighbor sampling and DRNL labels."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .graph import BipartiteGraph

L_MAX = 32


@dataclass(frozen=True)
class RwrConfig:
    restart_prob: float = 0.5
    walk_steps: int = 100
    max_nodes_per_side: int = 50

    def __post_init__(self):
        if not 0 < self.restart_prob <= 1:
            raise ValueError("restart_prob must be in (0, 1]")
        if self.walk_steps < 1 or self.max_nodes_per_side < 1:
            raise ValueError("walk_steps and max_nodes_per_side must be >= 1")


@dataclass(frozen=True, eq=False)
class LocalSubgraph:
    """Induced neighborhood of a target pair.

    ``nodes`` are unified node ids of the parent graph (items offset by
    ``user_count``); local index 0 is the target user, 1 the target item.
    ``edges`` holds (user_local, item_local) pairs with the target edge removed.
    """

    nodes: np.ndarray
    is_item: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    target_u: int = 0
    target_i: int = 1

    @property
    def size(self) -> int:
        return len(self.nodes)

    def to_text(self, user_count: int) -> str:
        out = [f"# local-subgraph target_u={self.target_u} target_i={self.target_i}"]
        for k, (n, item, lab) in enumerate(zip(self.nodes, self.is_item, self.labels)):
            side, idx = ("item", n - user_count) if item else ("user", n)
            out.append(f"node {k} {side} {idx} {lab}")
        for a, b in self.edges:
            out.append(f"edge {a} {b}")
        return "\n".join(out) + "\n"


def rwr_sample(
    g: BipartiteGraph,
    start: int,
    cfg: RwrConfig,
    rng: np.random.Generator,
    blocked: tuple[int, int] | None = None,
) -> set[int]:
    """Nodes visited by one random walk with restart from ``start`` (unified id).

    A side stops accepting new nodes once it holds ``max_nodes_per_side``; the
    walk ends after ``walk_steps`` steps or once both sides are full.
    ``blocked`` is an undirected edge the walker may not traverse.
    """
    visited = {start}
    n_users = g.user_count
    counts = [0, 0]
    counts[start >= n_users] += 1
    cap = cfg.max_nodes_per_side
    restart = rng.random(cfg.walk_steps) < cfg.restart_prob
    pick = rng.random(cfg.walk_steps)
    cur = start
    for step in range(cfg.walk_steps):
        if restart[step]:
            cur = start
            continue
        nbrs = g.neighbors(cur)
        if blocked is not None and cur in blocked:
            other = blocked[1] if cur == blocked[0] else blocked[0]
            nbrs = nbrs[nbrs != other]
        if len(nbrs) == 0:
            cur = start
            continue
        cur = int(nbrs[int(pick[step] * len(nbrs))])
        if cur not in visited:
            side = int(cur >= n_users)
            if counts[side] < cap:
                visited.add(cur)
                counts[side] += 1
            if counts[0] >= cap and counts[1] >= cap:
                break
    return visited


def bfs_distances(n: int, adj: list[list[int]], source: int) -> np.ndarray:
    """Hop distances from ``source``; -1 marks unreachable nodes."""
    dist = np.full(n, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        x = queue.popleft()
        for y in adj[x]:
            if dist[y] < 0:
                dist[y] = dist[x] + 1
                queue.append(y)
    return dist


def drnl_from_distances(d_u: np.ndarray, d_i: np.ndarray, l_max: int = L_MAX) -> np.ndarray:
    """Double-radius labels; -1 distances mean unreachable and map to label 0."""
    d = d_u + d_i
    labels = 1 + np.minimum(d_u, d_i) + (d // 2) ** 2
    labels = np.where((d_u < 0) | (d_i < 0), 0, labels)
    return np.minimum(labels, l_max)


def drnl_label(
    n: int, edges: np.ndarray, target_u: int = 0, target_i: int = 1, l_max: int = L_MAX
) -> np.ndarray:
    """DRNL labels of an ``n``-node local graph given its (already pruned) edges."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(int(b))
        adj[b].append(int(a))
    d_u = bfs_distances(n, adj, target_u)
    d_i = bfs_distances(n, adj, target_i)
    labels = drnl_from_distances(d_u, d_i, l_max)
    labels[target_u] = 1
    labels[target_i] = 1
    return labels


def pair_rng(seed: int, user: int, item: int) -> np.random.Generator:
    return np.random.default_rng([seed, user, item])


def extract_local_graph(
    g: BipartiteGraph,
    user: int,
    item: int,
    cfg: RwrConfig = RwrConfig(),
    seed: int | np.random.Generator = 0,
    l_max: int = L_MAX,
) -> LocalSubgraph:
    """Sample, induce and label the local graph of ``(user, item)``.

    The direct user-item edge, if present, is invisible to the walks and
    removed from the induced subgraph before labelling.
    """
    rng = seed if isinstance(seed, np.random.Generator) else pair_rng(seed, user, item)
    u_node, i_node = user, g.user_count + item
    blocked = (u_node, i_node)
    node_set = rwr_sample(g, u_node, cfg, rng, blocked) | rwr_sample(g, i_node, cfg, rng, blocked)
    others = sorted(node_set - {u_node, i_node})
    nodes = np.array([u_node, i_node] + others, dtype=np.int64)
    is_item = nodes >= g.user_count
    local = {int(n): k for k, n in enumerate(nodes)}
    edges = []
    for k in np.flatnonzero(~is_item):
        for it in g.items_of(int(nodes[k])):
            j = local.get(int(it) + g.user_count)
            if j is not None and not (k == 0 and j == 1):
                edges.append((int(k), j))
    edges_arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    labels = drnl_label(len(nodes), edges_arr, 0, 1, l_max)
    return LocalSubgraph(nodes, is_item, edges_arr, labels)
