"""Meta-LGNN scorer and the FiLM adaptor hypernetwork.

A local subgraph is encoded by one-hot DRNL labels, passed through a stack of
symmetric-normalized graph convolutions, mean-pooled and scored with a
sigmoid-linear head. The adaptor maps a normalized property vector to per-layer
(gamma, beta) pairs that modulate the convolution weights elementwise.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import BipartiteGraph
from .props import NormStats
from .subgraph import L_MAX, LocalSubgraph, RwrConfig, extract_local_graph

CHECKPOINT_VERSION = 1
N_PROPS = 8


@dataclass(frozen=True)
class ModelConfig:
    l_max: int = L_MAX
    hidden: int = 32
    n_layers: int = 3
    trunk: int = 64
    n_props: int = N_PROPS
    dropout: float = 0.1
    # off: BPR on sigmoid scores, exactly as the scoring/objective pair is stated
    presigmoid_bpr: bool = False

    @property
    def dims(self) -> list[int]:
        return [self.l_max + 1] + [self.hidden] * self.n_layers

    def head_size(self, layer: int) -> int:
        d = self.dims
        return 2 * d[layer] * d[layer + 1]


Params = dict[str, Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int | np.random.Generator) -> Params:
    """Random meta weights and scorer; adaptor heads start at zero (identity FiLM)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = cfg.dims
    p: Params = {}
    for layer in range(cfg.n_layers):
        p[f"theta.{layer}"] = ad.parameter(_glorot(rng, d[layer], d[layer + 1]), f"theta.{layer}")
    p["delta"] = ad.parameter(rng.normal(0.0, np.sqrt(1.0 / d[-1]), size=d[-1]), "delta")
    p["ada.trunk.w"] = ad.parameter(_glorot(rng, cfg.n_props, cfg.trunk), "ada.trunk.w")
    p["ada.trunk.b"] = ad.parameter(np.zeros(cfg.trunk), "ada.trunk.b")
    for layer in range(cfg.n_layers):
        n = cfg.head_size(layer)
        p[f"ada.head.{layer}.w"] = ad.parameter(np.zeros((cfg.trunk, n)), f"ada.head.{layer}.w")
        p[f"ada.head.{layer}.b"] = ad.parameter(np.zeros(n), f"ada.head.{layer}.b")
    return p


def meta_names(cfg: ModelConfig) -> list[str]:
    return [f"theta.{l}" for l in range(cfg.n_layers)]


def adaptor_names(cfg: ModelConfig) -> list[str]:
    names = ["ada.trunk.w", "ada.trunk.b"]
    for l in range(cfg.n_layers):
        names += [f"ada.head.{l}.w", f"ada.head.{l}.b"]
    return names


def copy_params(params: Params, names: Iterable[str] | None = None) -> Params:
    keys = params.keys() if names is None else names
    return {k: ad.parameter(params[k].value.copy(), k) for k in keys}


# ---------------------------------------------------------------- adaptor + FiLM


def adaptor_forward(p_norm: np.ndarray | Tensor, params: Params, cfg: ModelConfig) -> list[Tensor]:
    """Per-layer adapting vectors, gamma half first; zero heads decode to gamma=1, beta=0."""
    p = p_norm if isinstance(p_norm, Tensor) else Tensor(p_norm)
    if p.shape != (cfg.n_props,):
        raise ShapeError(f"adaptor input: expected ({cfg.n_props},), got {p.shape}")
    z = ad.tanh(p @ params["ada.trunk.w"] + params["ada.trunk.b"])
    phis = []
    for layer in range(cfg.n_layers):
        n = cfg.head_size(layer)
        offset = np.concatenate([np.ones(n // 2), np.zeros(n // 2)])
        head = z @ params[f"ada.head.{layer}.w"] + params[f"ada.head.{layer}.b"]
        phis.append(head + Tensor(offset))
    return phis


def film_adapt(thetas: Sequence[Tensor], phis: Sequence[Tensor]) -> list[Tensor]:
    """theta_m = theta * gamma + beta, with (gamma, beta) read row-major from phi."""
    out = []
    for theta, phi in zip(thetas, phis):
        rows, cols = theta.shape
        n = rows * cols
        if phi.shape != (2 * n,):
            raise ShapeError(f"film: adapting vector {phi.shape} does not match weight {theta.shape}")
        gamma = ad.reshape(ad.take_range(phi, 0, n), (rows, cols))
        beta = ad.reshape(ad.take_range(phi, n, 2 * n), (rows, cols))
        out.append(ad.mul(theta, gamma) + beta)
    return out


def conv_weights(
    params: Params, cfg: ModelConfig, mode: str = "meta", p_norm: np.ndarray | None = None
) -> list[Tensor]:
    """Convolution weights for a scoring mode.

    ``meta`` uses the shared weights as-is, ``adapted`` routes them through the
    adaptor for ``p_norm``, ``direct`` uses materialized ``theta_m.*`` leaves.
    """
    if mode == "meta":
        return [params[n] for n in meta_names(cfg)]
    if mode == "adapted":
        if p_norm is None:
            raise ValueError("adapted mode needs a normalized property vector")
        return film_adapt([params[n] for n in meta_names(cfg)], adaptor_forward(p_norm, params, cfg))
    if mode == "direct":
        return [params[f"theta_m.{l}"] for l in range(cfg.n_layers)]
    raise ValueError(f"unknown scoring mode {mode!r}")


def materialize_adapted(params: Params, cfg: ModelConfig, p_norm: np.ndarray) -> Params:
    """Fresh leaf parameters theta_m.* and delta for direct fine-tuning."""
    thetas = conv_weights(params, cfg, "adapted", p_norm)
    out = {f"theta_m.{l}": ad.parameter(t.value.copy(), f"theta_m.{l}") for l, t in enumerate(thetas)}
    out["delta"] = ad.parameter(params["delta"].value.copy(), "delta")
    return out


# ---------------------------------------------------------------- subgraph batches


@dataclass(frozen=True, eq=False)
class PreparedSubgraph:
    n: int
    labels: np.ndarray
    rows: np.ndarray  # normalized adjacency with self loops, COO
    cols: np.ndarray
    weights: np.ndarray


def prepare(sub: LocalSubgraph, l_max: int = L_MAX) -> PreparedSubgraph:
    n = sub.size
    a, b = sub.edges[:, 0], sub.edges[:, 1]
    loops = np.arange(n)
    rows = np.concatenate([a, b, loops])
    cols = np.concatenate([b, a, loops])
    deg = np.bincount(rows, minlength=n).astype(float)
    w = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return PreparedSubgraph(n, np.minimum(sub.labels, l_max), rows, cols, w)


@dataclass(frozen=True, eq=False)
class SubgraphBatch:
    labels: np.ndarray
    adj: sp.csr_matrix
    pool: sp.csr_matrix
    sizes: np.ndarray

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)


def build_batch(subs: Sequence[PreparedSubgraph]) -> SubgraphBatch:
    sizes = np.array([s.n for s in subs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    rows = np.concatenate([s.rows + o for s, o in zip(subs, offsets)])
    cols = np.concatenate([s.cols + o for s, o in zip(subs, offsets)])
    w = np.concatenate([s.weights for s in subs])
    adj = sp.csr_matrix((w, (rows, cols)), shape=(total, total))
    seg = np.repeat(np.arange(len(subs)), sizes)
    pool = sp.csr_matrix((1.0 / sizes[seg], (seg, np.arange(total))), shape=(len(subs), total))
    labels = np.concatenate([s.labels for s in subs])
    return SubgraphBatch(labels, adj, pool, sizes)


def encode_labels(labels: np.ndarray, l_max: int = L_MAX) -> np.ndarray:
    """One-hot rows of width ``l_max + 1``; labels above the cap share the last slot."""
    lab = np.minimum(np.asarray(labels, dtype=np.int64), l_max)
    X = np.zeros((len(lab), l_max + 1))
    X[np.arange(len(lab)), lab] = 1.0
    return X


def gcn_forward(
    batch: SubgraphBatch,
    thetas: Sequence[Tensor],
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    H = Tensor(encode_labels(batch.labels, cfg.l_max))
    if H.shape[1] != thetas[0].shape[0]:
        raise ShapeError(f"gcn: features {H.shape} vs first weight {thetas[0].shape}")
    last = len(thetas) - 1
    for layer, theta in enumerate(thetas):
        H = ad.spmm(batch.adj, H) @ theta
        if layer < last:
            H = ad.dropout(ad.relu(H), cfg.dropout, rng, train)
    return H


def pool(batch: SubgraphBatch, H: Tensor) -> Tensor:
    """Mean over each subgraph's node rows."""
    return ad.spmm(batch.pool, H)


def score_logits(h: Tensor, delta: Tensor) -> Tensor:
    return h @ delta


def score(h: Tensor, delta: Tensor) -> Tensor:
    return ad.sigmoid(score_logits(h, delta))


def forward_logits(
    batch: SubgraphBatch,
    thetas: Sequence[Tensor],
    delta: Tensor,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return score_logits(pool(batch, gcn_forward(batch, thetas, cfg, train, rng)), delta)


# ---------------------------------------------------------------- sampling cache


class SubgraphSampler:
    """Extracts and caches prepared local graphs of one parent graph.

    Each pair's walks use an RNG seeded by ``(seed, user, item)``, so a pair
    always maps to the same subgraph regardless of batch order.
    """

    def __init__(self, g: BipartiteGraph, rwr: RwrConfig = RwrConfig(), seed: int = 0, l_max: int = L_MAX):
        self.graph = g
        self.rwr = rwr
        self.seed = seed
        self.l_max = l_max
        self._cache: dict[tuple[int, int], PreparedSubgraph] = {}

    def local(self, user: int, item: int) -> LocalSubgraph:
        return extract_local_graph(self.graph, user, item, self.rwr, self.seed, self.l_max)

    def get(self, user: int, item: int) -> PreparedSubgraph:
        key = (int(user), int(item))
        sub = self._cache.get(key)
        if sub is None:
            sub = prepare(self.local(*key), self.l_max)
            self._cache[key] = sub
        return sub

    def batch(self, users: Sequence[int], items: Sequence[int]) -> SubgraphBatch:
        return build_batch([self.get(u, i) for u, i in zip(users, items)])


def lgnn_logits(
    sampler: SubgraphSampler,
    users: Sequence[int],
    items: Sequence[int],
    thetas: Sequence[Tensor],
    delta: Tensor,
    cfg: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return forward_logits(sampler.batch(users, items), thetas, delta, cfg, train, rng)


def lgnn_score(
    g: BipartiteGraph,
    u: int,
    i: int,
    params: Params,
    cfg: ModelConfig,
    rwr: RwrConfig = RwrConfig(),
    seed: int = 0,
    train: bool = False,
    mode: str = "meta",
    p_norm: np.ndarray | None = None,
    dropout_seed: int = 0,
) -> float:
    """Score of one pair: extract, encode, convolve, pool, sigmoid."""
    sampler = SubgraphSampler(g, rwr, seed, cfg.l_max)
    thetas = conv_weights(params, cfg, mode, p_norm)
    rng = np.random.default_rng(dropout_seed)
    logits = lgnn_logits(sampler, [u], [i], thetas, params["delta"], cfg, train, rng)
    return float(ad.sigmoid(logits).value[0])


class LgnnScorer:
    """Eval-mode scorer over a fixed parent graph with frozen weights."""

    def __init__(
        self,
        sampler: SubgraphSampler,
        params: Params,
        cfg: ModelConfig,
        mode: str = "meta",
        p_norm: np.ndarray | None = None,
        chunk: int = 2048,
    ):
        self.sampler = sampler
        self.cfg = cfg
        self.thetas = [Tensor(t.value) for t in conv_weights(params, cfg, mode, p_norm)]
        self.delta = Tensor(params["delta"].value)
        self.chunk = chunk

    def __call__(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(users), self.chunk):
            logits = lgnn_logits(
                self.sampler, users[s : s + self.chunk], items[s : s + self.chunk],
                self.thetas, self.delta, self.cfg,
            )
            out.append(ad._sigmoid(logits.value))
        return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Params
    model: ModelConfig
    norm: NormStats | None = None
    rwr: RwrConfig = field(default_factory=RwrConfig)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    """npz container: ``param/<name>`` arrays plus a JSON ``meta`` header."""
    meta = {
        "format": "adaptrec-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model": asdict(ck.model),
        "rwr": asdict(ck.rwr),
        "norm": ck.norm.to_dict() if ck.norm is not None else None,
        "extra": ck.extra,
    }
    arrays = {f"param/{k}": v.value for k, v in ck.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # np.savez stamps entries with the wall clock; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "adaptrec-checkpoint":
            raise ValueError(f"{path}: not a checkpoint")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
        params = {
            k[len("param/"):]: ad.parameter(data[k].copy(), k[len("param/"):])
            for k in data.files
            if k.startswith("param/")
        }
    norm = NormStats.from_dict(meta["norm"]) if meta["norm"] is not None else None
    return Checkpoint(params, ModelConfig(**meta["model"]), norm, RwrConfig(**meta["rwr"]), meta["extra"])
