"""The eight structural statistics that condition the adaptor, and their z-scoring."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .graph import BipartiteGraph, EmptyGraphError

EXACT_EFFICIENCY_MAX_NODES = 2000
EFFICIENCY_SAMPLE_PAIRS = 10_000


@dataclass(frozen=True)
class PropertyVector:
    node_count: float
    edge_count: float
    user_item_ratio: float
    density: float
    degree_assortativity: float
    robins_alexander_clustering: float
    connected_components: float
    global_efficiency: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "PropertyVector":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


# ------------------------------------------------------------ statistics


def _adjacency(g: BipartiteGraph) -> sp.csr_matrix:
    B = g.to_scipy()
    return sp.bmat([[None, B], [B.T, None]], format="csr")


def degree_assortativity(g: BipartiteGraph) -> float:
    """Pearson correlation of endpoint degrees over both orientations of every edge."""
    if g.edge_count == 0:
        return 0.0
    du = g.user_degrees()[g.edges[:, 0]].astype(float)
    di = g.item_degrees()[g.edges[:, 1]].astype(float)
    x = np.concatenate([du, di])
    y = np.concatenate([di, du])
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 0.0
    r = float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))
    return min(1.0, max(-1.0, r))


def count_four_cycles(g: BipartiteGraph) -> int:
    B = g.to_scipy()
    co = (B @ B.T).tocoo()
    c = co.data[co.row < co.col]
    return int((c * (c - 1) // 2).sum())


def count_three_paths(g: BipartiteGraph) -> int:
    # in a simple bipartite graph every walk a-b-c-d with a != c, b != d is a path
    du = g.user_degrees()[g.edges[:, 0]]
    di = g.item_degrees()[g.edges[:, 1]]
    return int(((du - 1) * (di - 1)).sum())


def robins_alexander_clustering(g: BipartiteGraph) -> float:
    paths = count_three_paths(g)
    if paths == 0:
        return 0.0
    return 4.0 * count_four_cycles(g) / paths


def connected_components(g: BipartiteGraph) -> int:
    n, _ = csgraph.connected_components(_adjacency(g), directed=False)
    return int(n)


def global_efficiency(
    g: BipartiteGraph,
    exact_max_nodes: int = EXACT_EFFICIENCY_MAX_NODES,
    sample_pairs: int = EFFICIENCY_SAMPLE_PAIRS,
    seed: int = 0,
) -> float:
    """Mean of 1/d over ordered node pairs; unreachable pairs contribute 0.

    Exact when the graph has at most ``exact_max_nodes`` nodes, otherwise
    estimated from ``sample_pairs`` uniformly drawn ordered pairs.
    """
    n = g.node_count
    if n < 2:
        return 0.0
    A = _adjacency(g)
    if n <= exact_max_nodes:
        dist = csgraph.shortest_path(A, unweighted=True, directed=False)
        np.fill_diagonal(dist, np.inf)
        return float((1.0 / dist).sum() / (n * (n - 1)))
    return sampled_efficiency(g, sample_pairs, seed)[0]


def sampled_efficiency(g: BipartiteGraph, pairs: int, seed: int = 0) -> tuple[float, float]:
    """Pair-sampled efficiency estimate and its standard error."""
    n = g.node_count
    rng = np.random.default_rng(seed)
    src = rng.integers(n, size=pairs)
    dst = (src + rng.integers(1, n, size=pairs)) % n  # uniform over t != s
    A = _adjacency(g)
    sources, inverse = np.unique(src, return_inverse=True)
    dist = csgraph.shortest_path(A, unweighted=True, directed=False, indices=sources)
    vals = 1.0 / dist[inverse, dst]
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(pairs))


def compute_properties(g: BipartiteGraph, seed: int = 0) -> PropertyVector:
    if g.edge_count == 0:
        raise EmptyGraphError("properties are undefined for a graph without edges")
    return PropertyVector(
        node_count=float(g.node_count),
        edge_count=float(g.edge_count),
        user_item_ratio=g.user_count / g.item_count,
        density=g.edge_count / (g.user_count * g.item_count),
        degree_assortativity=degree_assortativity(g),
        robins_alexander_clustering=robins_alexander_clustering(g),
        connected_components=float(connected_components(g)),
        global_efficiency=global_efficiency(g, seed=seed),
    )


# ------------------------------------------------------------ normalization


def fit_norm(corpus: Sequence[PropertyVector]) -> NormStats:
    if not corpus:
        raise ValueError("cannot fit normalization on an empty corpus")
    X = np.stack([pv.as_array() for pv in corpus])
    return NormStats(X.mean(axis=0), X.std(axis=0))


def normalize(pv: PropertyVector | np.ndarray, stats: NormStats) -> np.ndarray:
    x = pv.as_array() if isinstance(pv, PropertyVector) else np.asarray(pv, dtype=np.float64)
    std = np.where(stats.std > 0, stats.std, 1.0)
    return (x - stats.mean) / std


# ------------------------------------------------------------ key-value text


def dumps_properties(pv: PropertyVector) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in zip(PropertyVector.names(), astuple(pv)))


def loads_properties(text: str) -> PropertyVector:
    kv = _parse_kv(text)
    return PropertyVector(**{k: float(kv[k]) for k in PropertyVector.names()})


def dumps_norm(stats: NormStats) -> str:
    lines = []
    for k, m, s in zip(PropertyVector.names(), stats.mean, stats.std):
        lines.append(f"mean.{k} = {float(m)!r}\n")
        lines.append(f"std.{k} = {float(s)!r}\n")
    return "".join(lines)


def loads_norm(text: str) -> NormStats:
    kv = _parse_kv(text)
    names = PropertyVector.names()
    return NormStats(
        np.array([float(kv[f"mean.{k}"]) for k in names]),
        np.array([float(kv[f"std.{k}"]) for k in names]),
    )


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def read_norm(path: str | Path) -> NormStats:
    return loads_norm(Path(path).read_text(encoding="utf-8"))
