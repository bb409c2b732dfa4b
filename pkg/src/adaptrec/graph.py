"""Bipartite interaction graphs: ingestion, splitting, sparsification, negatives."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

MANIFEST_HEADER = "# adaptrec-manifest v1"
PARTITIONS = ("train", "val", "test", "dropped")


class GraphError(ValueError):
    """Base class for graph-level failures."""


class EmptyGraphError(GraphError):
    pass


class ParseError(GraphError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SplitInfeasibleError(GraphError):
    pass


class SparsifyInfeasibleError(GraphError):
    pass


class InsufficientNegativesError(GraphError):
    pass


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols[order].astype(np.int64)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Immutable user-item graph with CSR adjacency on both sides.

    Users are indexed ``0..user_count-1`` and items ``0..item_count-1``. Where a
    single node numbering is needed (walks, BFS), items are shifted by
    ``user_count`` so node ``user_count + j`` is item ``j``.
    """

    user_count: int
    item_count: int
    edges: np.ndarray  # (m, 2) int64, sorted by (user, item)
    user_ids: tuple = ()
    item_ids: tuple = ()
    user_indptr: np.ndarray = field(repr=False, default=None)
    user_items: np.ndarray = field(repr=False, default=None)
    item_indptr: np.ndarray = field(repr=False, default=None)
    item_users: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[tuple[int, int]] | np.ndarray,
        user_count: int | None = None,
        item_count: int | None = None,
        user_ids: Sequence | None = None,
        item_ids: Sequence | None = None,
    ) -> "BipartiteGraph":
        arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        arr = arr.reshape(-1, 2)
        if len(arr):
            arr = np.unique(arr, axis=0)
            if arr.min() < 0:
                raise GraphError("negative node index")
        n_u = int(arr[:, 0].max() + 1) if len(arr) else 0
        n_i = int(arr[:, 1].max() + 1) if len(arr) else 0
        user_count = n_u if user_count is None else user_count
        item_count = n_i if item_count is None else item_count
        if n_u > user_count or n_i > item_count:
            raise GraphError("edge index exceeds declared node count")
        user_ids = tuple(range(user_count)) if user_ids is None else tuple(user_ids)
        item_ids = tuple(range(item_count)) if item_ids is None else tuple(item_ids)
        if len(user_ids) != user_count or len(item_ids) != item_count:
            raise GraphError("id map size does not match node count")
        if len(set(user_ids)) != user_count or len(set(item_ids)) != item_count:
            raise GraphError("id maps must be bijective")
        u_ptr, u_adj = _csr(arr[:, 0], arr[:, 1], user_count)
        i_ptr, i_adj = _csr(arr[:, 1], arr[:, 0], item_count)
        arr.setflags(write=False)
        return cls(user_count, item_count, arr, user_ids, item_ids, u_ptr, u_adj, i_ptr, i_adj)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def node_count(self) -> int:
        return self.user_count + self.item_count

    def items_of(self, user: int) -> np.ndarray:
        return self.user_items[self.user_indptr[user] : self.user_indptr[user + 1]]

    def users_of(self, item: int) -> np.ndarray:
        return self.item_users[self.item_indptr[item] : self.item_indptr[item + 1]]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def has_edge(self, user: int, item: int) -> bool:
        row = self.items_of(user)
        k = np.searchsorted(row, item)
        return bool(k < len(row) and row[k] == item)

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbors of a node in the unified numbering (items offset by user_count)."""
        if node < self.user_count:
            return self.items_of(node) + self.user_count
        return self.users_of(node - self.user_count)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(i)) for u, i in self.edges}

    def subgraph_with(self, edges: np.ndarray) -> "BipartiteGraph":
        """Graph over the same node sets and id maps with a different edge list."""
        return BipartiteGraph.from_edges(
            np.asarray(edges, dtype=np.int64).reshape(-1, 2),
            self.user_count,
            self.item_count,
            self.user_ids,
            self.item_ids,
        )

    def to_scipy(self):
        import scipy.sparse as sp

        data = np.ones(self.edge_count)
        return sp.csr_matrix(
            (data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.user_count, self.item_count)
        )


# ---------------------------------------------------------------- ingestion


def load_edge_list(source: TextIO | str | Path, delimiter: str | None = None) -> BipartiteGraph:
    """Read ``user item [ignored...]`` records into a densely indexed graph.

    ``delimiter=None`` splits on any whitespace. Lines starting with ``#`` and
    blank lines are skipped. Index order follows first occurrence.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_edge_list(fh, delimiter)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    edges = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(delimiter)]
        if len(fields) < 2 or not fields[0] or not fields[1]:
            raise ParseError(lineno, f"expected user and item fields, got {raw.rstrip()!r}")
        u = users.setdefault(fields[0], len(users))
        i = items.setdefault(fields[1], len(items))
        edges.append((u, i))
    if not edges:
        raise EmptyGraphError("edge list contains no records")
    # keep first-occurrence order of edges for stable serialization, drop duplicates
    seen: dict[tuple[int, int], None] = dict.fromkeys(edges)
    return BipartiteGraph.from_edges(
        np.array(list(seen), dtype=np.int64), len(users), len(items), list(users), list(items)
    )


def write_edge_list(g: BipartiteGraph, sink: TextIO | str | Path, delimiter: str = "\t") -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_edge_list(g, fh, delimiter)
    for u, i in g.edges:
        sink.write(f"{g.user_ids[u]}{delimiter}{g.item_ids[i]}\n")


def dumps_edge_list(g: BipartiteGraph) -> str:
    buf = io.StringIO()
    write_edge_list(g, buf)
    return buf.getvalue()


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    """Train/val/test partition of one graph's edges.

    ``dropped`` holds train edges removed by sparsification; they are still
    true interactions and are excluded from negative pools.
    """

    graph: BipartiteGraph
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    dropped: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def train_graph(self) -> BipartiteGraph:
        return self.graph.subgraph_with(self.train)

    def all_positive_graph(self) -> BipartiteGraph:
        return self.graph.subgraph_with(np.vstack([self.train, self.val, self.test, self.dropped]))

    def sizes(self) -> dict[str, int]:
        return {p: len(getattr(self, p)) for p in PARTITIONS}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(g: BipartiteGraph, val_frac: float, test_frac: float, seed: int) -> EdgeSplit:
    """Random val/test holdout under the cold-start constraint.

    Held-out candidates are drawn uniformly; a candidate whose removal would
    leave its user or item with no train edge is rejected and another drawn,
    up to ``100 * |E|`` draws in total.
    """
    if g.edge_count == 0:
        raise EmptyGraphError("cannot split an empty graph")
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ValueError("need val_frac, test_frac >= 0 and val_frac + test_frac < 1")
    m = g.edge_count
    n_val, n_test = _round_half_up(val_frac * m), _round_half_up(test_frac * m)
    rng = np.random.default_rng(seed)
    u_deg = g.user_degrees().copy()
    i_deg = g.item_degrees().copy()
    in_train = np.ones(m, dtype=bool)
    held: list[int] = []
    budget = 100 * m
    draws = 0
    while len(held) < n_val + n_test:
        if draws >= budget:
            raise SplitInfeasibleError(
                f"could not hold out {n_val + n_test} edges without stranding a node "
                f"after {budget} draws"
            )
        draws += 1
        e = int(rng.integers(m))
        if not in_train[e]:
            continue
        u, i = g.edges[e]
        if u_deg[u] < 2 or i_deg[i] < 2:
            continue
        in_train[e] = False
        u_deg[u] -= 1
        i_deg[i] -= 1
        held.append(e)
    held_arr = np.array(held, dtype=np.int64)
    val_idx = np.sort(held_arr[:n_val])
    test_idx = np.sort(held_arr[n_val:])
    return EdgeSplit(g, g.edges[in_train], g.edges[val_idx], g.edges[test_idx], seed)


def sparsify_train(split: EdgeSplit, keep_frac: float, seed: int) -> EdgeSplit:
    """Drop train edges at random while keeping every train node covered.

    Train edges are shuffled and an edge is dropped only when both endpoints
    keep train degree >= 2, until ``ceil(keep_frac * |train|)`` remain.
    """
    if not 0 < keep_frac <= 1:
        raise ValueError("keep_frac must be in (0, 1]")
    train = split.train
    target = math.ceil(keep_frac * len(train) - 1e-9)
    if target >= len(train):
        return split
    g = split.graph
    rng = np.random.default_rng(seed)
    u_deg = np.bincount(train[:, 0], minlength=g.user_count)
    i_deg = np.bincount(train[:, 1], minlength=g.item_count)
    # every covered node needs an edge, so no edge set smaller than this exists
    floor = max(int((u_deg > 0).sum()), int((i_deg > 0).sum()))
    if floor > target:
        raise SparsifyInfeasibleError(
            f"keeping {target} of {len(train)} train edges would isolate nodes "
            f"(at least {floor} needed)"
        )
    keep = np.ones(len(train), dtype=bool)
    n_keep = len(train)
    for e in rng.permutation(len(train)):
        if n_keep <= target:
            break
        u, i = train[e]
        if u_deg[u] >= 2 and i_deg[i] >= 2:
            keep[e] = False
            u_deg[u] -= 1
            i_deg[i] -= 1
            n_keep -= 1
    # a stalled greedy pass leaves slightly more than target; that is accepted
    dropped = np.vstack([split.dropped, train[~keep]])
    return EdgeSplit(g, train[keep], split.val, split.test, split.seed, dropped)


def sample_negatives(
    g: BipartiteGraph,
    user: int,
    n: int,
    exclude: Iterable[int] = (),
    seed: int | np.random.Generator | None = None,
) -> list[int]:
    """``n`` distinct items the user has not interacted with, uniformly at random."""
    if n == 0:
        return []
    banned = set(int(x) for x in g.items_of(user))
    banned.update(int(x) for x in exclude)
    pool = np.array([j for j in range(g.item_count) if j not in banned], dtype=np.int64)
    if len(pool) < n:
        raise InsufficientNegativesError(
            f"user {user} has {len(pool)} candidate negatives, {n} requested"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [int(x) for x in rng.choice(pool, size=n, replace=False)]


# ---------------------------------------------------------------- manifests


def write_manifest(split: EdgeSplit, sink: TextIO | str | Path, meta: dict | None = None) -> None:
    """Plain-text split manifest: ``partition<TAB>user_id<TAB>item_id`` per line."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_manifest(split, fh, meta)
    g = split.graph
    sink.write(MANIFEST_HEADER + "\n")
    sink.write(f"# seed\t{split.seed}\n")
    for key, value in (meta or {}).items():
        sink.write(f"# {key}\t{value}\n")
    for part in PARTITIONS:
        for u, i in getattr(split, part):
            sink.write(f"{part}\t{g.user_ids[u]}\t{g.item_ids[i]}\n")


def read_manifest(source: TextIO | str | Path) -> EdgeSplit:
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_manifest(fh)
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    parts: dict[str, list[tuple[int, int]]] = {p: [] for p in PARTITIONS}
    seed = 0
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = line[1:].strip().split("\t")
            if fields[0] == "seed" and len(fields) > 1:
                seed = int(fields[1])
            continue
        fields = line.split("\t")
        if len(fields) < 3 or fields[0] not in parts:
            raise ParseError(lineno, f"bad manifest record {line!r}")
        u = users.setdefault(fields[1], len(users))
        i = items.setdefault(fields[2], len(items))
        parts[fields[0]].append((u, i))
    all_edges = [e for p in PARTITIONS for e in parts[p]]
    if not all_edges:
        raise EmptyGraphError("manifest contains no edges")
    g = BipartiteGraph.from_edges(all_edges, len(users), len(items), list(users), list(items))

    def arr(p):
        return np.array(parts[p], dtype=np.int64).reshape(-1, 2)

    return EdgeSplit(g, arr("train"), arr("val"), arr("test"), seed, arr("dropped"))
