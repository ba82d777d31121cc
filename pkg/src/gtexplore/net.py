"""Graph Transformer policy and critic over informative graphs.

Every block works on padded batches: node features ``(B, N, d)`` with a node
mask, a block-diagonal directed edge list over the flattened ``B * N`` rows,
and per-sample neighbour slots ``(B, K)`` with a slot mask. A single graph is
simply a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import BeliefGraph, normalize
from .tensor import EdgeIndex, ParamStore, Tensor


@dataclass(frozen=True)
class NetConfig:
    d: int = 128
    layers: int = 3
    m: int = 1  # attention sub-layers per encoder layer
    n: int = 2  # GNN sub-layers per encoder layer
    heads: int = 4
    alpha: float = 0.8
    ffn: int = 0  # MLP hidden width; 0 means d

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")

    @property
    def hidden(self) -> int:
        return self.ffn or self.d


# ------------------------------------------------------------- observations


@dataclass
class Observation:
    feats: np.ndarray  # (N, 4) normalised
    edges: np.ndarray  # (E, 2) undirected, i < j
    current: int
    neighbors: np.ndarray  # ascending node indices

    @classmethod
    def from_graph(cls, graph: BeliefGraph, extent) -> "Observation":
        return cls(
            normalize(graph, extent),
            graph.edges().astype(np.int64),
            int(graph.current_index),
            graph.neighbors(graph.current_index).astype(np.int64),
        )

    @property
    def num_nodes(self) -> int:
        return len(self.feats)


@dataclass
class GraphBatch:
    feats: np.ndarray  # (B, N, 4)
    node_mask: np.ndarray  # (B, N) bool
    edges: EdgeIndex  # over B * N flattened rows
    current: np.ndarray  # (B,) flat row of the current node
    slots: np.ndarray  # (B, K) flat rows of neighbours, padding repeats current
    slot_mask: np.ndarray  # (B, K) bool
    adjacency: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.feats.shape[0]

    @property
    def max_nodes(self) -> int:
        return self.feats.shape[1]

    @classmethod
    def from_observations(cls, obs: list[Observation]) -> "GraphBatch":
        b = len(obs)
        n = max(o.num_nodes for o in obs)
        k = max(1, max(len(o.neighbors) for o in obs))
        feats = np.zeros((b, n, 4))
        node_mask = np.zeros((b, n), dtype=bool)
        current = np.empty(b, dtype=np.int64)
        slots = np.empty((b, k), dtype=np.int64)
        slot_mask = np.zeros((b, k), dtype=bool)
        dst, src = [], []
        for i, o in enumerate(obs):
            base = i * n
            feats[i, : o.num_nodes] = o.feats
            node_mask[i, : o.num_nodes] = True
            current[i] = base + o.current
            slots[i] = base + o.current
            slots[i, : len(o.neighbors)] = base + o.neighbors
            slot_mask[i, : len(o.neighbors)] = True
            if len(o.edges):
                e = o.edges + base
                dst.extend((e[:, 0], e[:, 1]))
                src.extend((e[:, 1], e[:, 0]))
        dst_a = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
        src_a = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
        return cls(feats, node_mask, EdgeIndex(dst_a, src_a, b * n), current, slots, slot_mask)


# ------------------------------------------------------------ param set-up


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_encoder(store: ParamStore, cfg: NetConfig, rng: np.random.Generator, prefix: str = "") -> None:
    d, hid = cfg.d, cfg.hidden
    store.add(prefix + "embed.W", _glorot(rng, 4, d))
    store.add(prefix + "embed.b", np.zeros(d))

    def mlp(p):
        store.add(p + ".W1", _glorot(rng, d, hid))
        store.add(p + ".b1", np.zeros(hid))
        store.add(p + ".W2", _glorot(rng, hid, d))
        store.add(p + ".b2", np.zeros(d))

    def norm(p):
        store.add(p + ".g", np.ones(d))
        store.add(p + ".b", np.zeros(d))

    for layer in range(cfg.layers):
        base = f"{prefix}enc.{layer}"
        for i in range(cfg.m):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                store.add(f"{base}.attn.{i}.{w}", _glorot(rng, d, d))
            norm(f"{base}.attn_norm.{i}")
            mlp(f"{base}.attn_mlp.{i}")
            norm(f"{base}.attn_mlp_norm.{i}")
        for i in range(cfg.n):
            for w in ("W1", "W2", "W3", "W4"):
                store.add(f"{base}.gnn.{i}.{w}", _glorot(rng, d, d))
            norm(f"{base}.gnn_norm.{i}")
            mlp(f"{base}.gnn_mlp.{i}")
            norm(f"{base}.gnn_mlp_norm.{i}")


# ------------------------------------------------------------------ blocks


def embed(store: ParamStore, feats, prefix: str = "") -> Tensor:
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    if feats.shape[-1] != 4:
        raise ValueError(f"node features must have width 4, got {feats.shape[-1]}")
    return T.matmul(feats, store[prefix + "embed.W"]) + store[prefix + "embed.b"]


def mlp(store: ParamStore, p: str, x: Tensor) -> Tensor:
    h = T.relu(T.matmul(x, store[p + ".W1"]) + store[p + ".b1"])
    return T.matmul(h, store[p + ".W2"]) + store[p + ".b2"]


def _norm(store: ParamStore, p: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, store[p + ".g"], store[p + ".b"])


def attention_block(store: ParamStore, p: str, x: Tensor, heads: int, node_mask=None) -> Tensor:
    """All-pair multi-head self-attention; padded nodes are excluded as keys.

    ``x`` is ``(B, N, d)``; ``node_mask`` is ``(B, N)``.
    """
    b, n, d = x.shape
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(T.scale(T.matmul(x, store[p + ".Wq"]), 1.0 / math.sqrt(dh)))
    k = split(T.matmul(x, store[p + ".Wk"]))
    v = split(T.matmul(x, store[p + ".Wv"]))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    mask = None if node_mask is None else np.asarray(node_mask, dtype=bool)[:, None, None, :]
    w = T.softmax_rows(scores, mask)
    h = T.reshape(T.transpose(T.matmul(w, v), (0, 2, 1, 3)), (b, n, d))
    return T.matmul(h, store[p + ".Wo"])


def gnn_block(store: ParamStore, p: str, x: Tensor, edges: EdgeIndex) -> Tensor:
    """Residual gated graph convolution on flattened rows ``(M, d)``."""
    own = T.matmul(x, store[p + ".W1"])
    msg = T.matmul(x, store[p + ".W2"])
    gq = T.matmul(x, store[p + ".W3"])
    gk = T.matmul(x, store[p + ".W4"])
    return own + T.gated_aggregate(gq, gk, msg, edges)


def attention_branch(store: ParamStore, base: str, x: Tensor, cfg: NetConfig, node_mask) -> Tensor:
    h = x
    for i in range(cfg.m):
        h = _norm(store, f"{base}.attn_norm.{i}", h + attention_block(store, f"{base}.attn.{i}", h, cfg.heads, node_mask))
        h = _norm(store, f"{base}.attn_mlp_norm.{i}", h + mlp(store, f"{base}.attn_mlp.{i}", h))
    return h


def gnn_branch(store: ParamStore, base: str, x: Tensor, cfg: NetConfig, edges: EdgeIndex) -> Tensor:
    b, n, d = x.shape
    g = T.reshape(x, (b * n, d))
    for i in range(cfg.n):
        g = _norm(store, f"{base}.gnn_norm.{i}", g + gnn_block(store, f"{base}.gnn.{i}", g, edges))
        g = _norm(store, f"{base}.gnn_mlp_norm.{i}", g + mlp(store, f"{base}.gnn_mlp.{i}", g))
    return T.reshape(g, (b, n, d))


def encoder_layer(store: ParamStore, layer: int, x: Tensor, batch: GraphBatch, cfg: NetConfig, prefix: str = "") -> Tensor:
    base = f"{prefix}enc.{layer}"
    a = attention_branch(store, base, x, cfg, batch.node_mask)
    g = gnn_branch(store, base, x, cfg, batch.edges)
    if cfg.alpha == 0.0:
        return a
    if cfg.alpha == 1.0:
        return g
    return T.scale(a, 1.0 - cfg.alpha) + T.scale(g, cfg.alpha)


def encode(store: ParamStore, batch: GraphBatch, cfg: NetConfig, prefix: str = "") -> Tensor:
    x = embed(store, batch.feats, prefix)
    for layer in range(cfg.layers):
        x = encoder_layer(store, layer, x, batch, cfg, prefix)
    return x


def _gather(x: Tensor, batch: GraphBatch) -> tuple[Tensor, Tensor]:
    b, n, d = x.shape
    flat = T.reshape(x, (b * n, d))
    return T.take(flat, batch.current), T.take(flat, batch.slots)


# ---------------------------------------------------------------- networks


class PolicyNet:
    """Graph Transformer encoder with a single-head pointer decoder."""

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg or NetConfig()
        if store is None:
            rng = np.random.default_rng([int(seed), 1])
            store = ParamStore()
            init_encoder(store, self.cfg, rng)
            store.add("dec.Wq", _glorot(rng, self.cfg.d, self.cfg.d))
            store.add("dec.Wk", _glorot(rng, self.cfg.d, self.cfg.d))
        self.store = store

    def logits(self, batch: GraphBatch) -> Tensor:
        x = encode(self.store, batch, self.cfg)
        return decode_logits(self.store, x, batch)

    def forward(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        """Neighbour probabilities and log-probabilities, both ``(B, K)``."""
        u = self.logits(batch)
        return T.softmax_rows(u, batch.slot_mask), T.log_softmax_rows(u, batch.slot_mask)

    def snapshot(self) -> "PolicyNet":
        return PolicyNet(self.cfg, store=self.store.snapshot())


def decode_logits(store: ParamStore, x: Tensor, batch: GraphBatch) -> Tensor:
    """Bounded pointer scores ``tanh(q k^T / sqrt(d))`` per neighbour slot."""
    if not batch.slot_mask.any(axis=1).all():
        raise ValueError("current node has no neighbour")
    d = x.shape[-1]
    cur, keys = _gather(x, batch)
    q = T.matmul(cur, store["dec.Wq"])  # (B, d)
    k = T.matmul(keys, store["dec.Wk"])  # (B, K, d)
    b = q.shape[0]
    s = T.matmul(k, T.reshape(q, (b, d, 1)))  # (B, K, 1)
    return T.tanh(T.scale(T.reshape(s, (b, -1)), 1.0 / math.sqrt(d)))


class CriticNet:
    """Separate encoder plus an affine head on (current || neighbour) encodings."""

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0, store: ParamStore | None = None):
        self.cfg = cfg or NetConfig()
        if store is None:
            rng = np.random.default_rng([int(seed), 2])
            store = ParamStore()
            init_encoder(store, self.cfg, rng)
            store.add("head.w", _glorot(rng, 2 * self.cfg.d, 1))
            store.add("head.b", np.zeros(1))
        self.store = store

    def forward(self, batch: GraphBatch) -> Tensor:
        """Q values ``(B, K)``; padded slots hold meaningless numbers."""
        if not batch.slot_mask.any(axis=1).all():
            raise ValueError("current node has no neighbour")
        x = encode(self.store, batch, self.cfg)
        return q_head(self.store, x, batch)

    def snapshot(self) -> "CriticNet":
        return CriticNet(self.cfg, store=self.store.snapshot())


def q_head(store: ParamStore, x: Tensor, batch: GraphBatch) -> Tensor:
    d = x.shape[-1]
    cur, keys = _gather(x, batch)
    w = store["head.w"]
    wq = T.take(w, np.arange(d))
    wk = T.take(w, np.arange(d, 2 * d))
    b = cur.shape[0]
    qs = T.matmul(cur, wq)  # (B, 1)
    ks = T.reshape(T.matmul(keys, wk), (b, -1))  # (B, K)
    return ks + qs + store["head.b"]


# ------------------------------------------------------------ conveniences


@dataclass
class PolicyOutput:
    neighbors: np.ndarray
    probs: np.ndarray

    def greedy(self) -> int:
        return int(np.argmax(self.probs))


def policy_output(net: PolicyNet, obs: Observation) -> PolicyOutput:
    if len(obs.neighbors) == 0:
        raise ValueError("current node has no neighbour")
    probs, _ = net.forward(GraphBatch.from_observations([obs]))
    return PolicyOutput(obs.neighbors.copy(), probs.data[0, : len(obs.neighbors)].copy())


def critic_values(net: CriticNet, obs: Observation) -> np.ndarray:
    q = net.forward(GraphBatch.from_observations([obs]))
    return q.data[0, : len(obs.neighbors)].copy()
