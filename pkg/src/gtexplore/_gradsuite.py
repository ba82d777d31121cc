"""Central-difference checks for every differentiable op and both networks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .net import CriticNet, GraphBatch, NetConfig, Observation, PolicyNet
from .tensor import EdgeIndex, Tensor

H = 1e-5


def random_observation(rng: np.random.Generator, n: int = 6) -> Observation:
    """Connected random graph: a shuffled path plus a few chords."""
    order = rng.permutation(n)
    pairs = {tuple(sorted((int(order[i]), int(order[i + 1])))) for i in range(n - 1)}
    for _ in range(n // 2):
        i, j = rng.choice(n, 2, replace=False)
        pairs.add((int(min(i, j)), int(max(i, j))))
    edges = np.array(sorted(pairs), dtype=np.int64)
    cur = int(rng.integers(n))
    nb = np.unique(np.concatenate([edges[edges[:, 0] == cur, 1], edges[edges[:, 1] == cur, 0]]))
    feats = np.column_stack([rng.uniform(size=(n, 2)), rng.uniform(size=n), rng.integers(0, 2, size=n)])
    return Observation(feats, edges, cur, nb.astype(np.int64))


def _probe(shape, rng):
    return Tensor(rng.normal(size=shape))


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (fn, inputs); every fn returns a scalar Tensor."""
    cases = {}

    def unary(name, op, shape=(3, 4), positive=False):
        x = Tensor(rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape))
        w = rng.normal(size=op(x).shape)
        cases[name] = (lambda x: _weighted(op(x), w), [x])

    def binary(name, op, sa, sb):
        a, b = _probe(sa, rng), _probe(sb, rng)
        w = rng.normal(size=op(a, b).shape)
        cases[name] = (lambda a, b: _weighted(op(a, b), w), [a, b])

    binary("add", T.add, (3, 4), (4,))
    binary("sub", T.sub, (3, 4), (3, 1))
    binary("mul", T.mul, (2, 3, 4), (3, 4))
    unary("scale", lambda x: T.scale(x, -1.7))
    unary("tanh", T.tanh)
    unary("sigmoid", T.sigmoid)
    # keep relu inputs away from the kink
    x = Tensor(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.1, 1.0, size=(3, 4)))
    wr = rng.normal(size=(3, 4))
    cases["relu"] = (lambda x: _weighted(T.relu(x), wr), [x])
    unary("exp", T.exp)
    unary("log", T.log, positive=True)
    unary("tsum", lambda x: T.tsum(x, axis=1))
    unary("mean", lambda x: T.mean(x, axis=0, keepdims=True))
    unary("reshape", lambda x: T.reshape(x, (4, 3)))
    unary("transpose", lambda x: T.transpose(x, (1, 0)))
    idx = rng.integers(0, 3, size=5)
    unary("take", lambda x: T.take(x, idx))
    binary("concat", lambda a, b: T.concat([a, b], axis=1), (3, 2), (3, 4))
    binary("matmul_2d", T.matmul, (3, 4), (4, 5))
    binary("matmul_nd_2d", T.matmul, (2, 3, 4), (4, 5))
    binary("matmul_batched", T.matmul, (2, 3, 3, 4), (2, 3, 4, 2))
    mask = np.array([[True, True, False, True], [False, True, True, True], [True, False, False, False]])
    unary("softmax_rows", lambda x: T.softmax_rows(x, mask))
    unary("log_softmax_rows", lambda x: T.log_softmax_rows(x, mask))

    x, g, b = _probe((5, 6), rng), _probe((6,), rng), _probe((6,), rng)
    wl = rng.normal(size=(5, 6))
    cases["layer_norm"] = (lambda x, g, b: _weighted(T.layer_norm(x, g, b), wl), [x, g, b])

    edges = EdgeIndex(np.array([0, 1, 1, 2, 3, 3, 4]), np.array([1, 0, 2, 1, 4, 2, 3]), 6)
    a, bb, c = _probe((6, 3), rng), _probe((6, 3), rng), _probe((6, 3), rng)
    wg = rng.normal(size=(6, 3))
    cases["gated_aggregate"] = (lambda a, b, c: _weighted(T.gated_aggregate(a, b, c, edges), wg), [a, bb, c])
    return cases


def network_cases(rng: np.random.Generator, cfg: NetConfig | None = None) -> dict:
    cfg = cfg or NetConfig(d=8, layers=3, heads=2)
    obs = [random_observation(rng), random_observation(rng)]
    batch = GraphBatch.from_observations(obs)
    policy = PolicyNet(cfg, seed=int(rng.integers(1 << 30)))
    critic = CriticNet(cfg, seed=int(rng.integers(1 << 30)))
    acts = [int(rng.integers(len(o.neighbors))) for o in obs]
    wq = rng.normal(size=(len(obs), batch.slots.shape[1])) * batch.slot_mask

    def logp_loss(*_):
        _, logp = policy.forward(batch)
        return T.tsum(T.take(T.reshape(logp, (-1, 1)), np.arange(len(obs)) * logp.shape[1] + np.array(acts)))

    def q_loss(*_):
        return _weighted(critic.forward(batch), wq)

    return {
        "policy_logprob": (logp_loss, [p for _, p in policy.store.items()]),
        "critic_q": (q_loss, [p for _, p in critic.store.items()]),
    }


def run_all(seed: int = 0, include_network: bool = True) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    if include_network:
        cases.update(network_cases(rng))
    return {name: T.gradcheck(fn, inputs, h=H) for name, (fn, inputs) in cases.items()}
