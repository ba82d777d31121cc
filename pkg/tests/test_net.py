import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtexplore import net as N
from gtexplore import tensor as T
from gtexplore._gradsuite import network_cases, random_observation
from gtexplore.tensor import EdgeIndex, ParamStore, Tensor

SMALL = N.NetConfig(d=8, layers=2, heads=2)


def _softmax(u):
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _store(**arrays):
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k.replace("__", "."), np.asarray(v, dtype=np.float64))
    return s


def _batch(obs):
    return N.GraphBatch.from_observations(obs if isinstance(obs, list) else [obs])


# ------------------------------------------------------------------ blocks


def test_embed_examples():
    rng = np.random.default_rng(0)
    s = _store(embed__W=np.zeros((4, 3)), embed__b=np.zeros(3))
    assert np.all(N.embed(s, rng.normal(size=(5, 4))).data == 0)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    x = rng.normal(size=(2, 4))
    s = _store(embed__W=W, embed__b=b)
    assert np.allclose(N.embed(s, x).data, x @ W + b, atol=1e-14)
    same = N.embed(s, np.tile(x[:1], (3, 1))).data
    assert np.all(same == same[0])
    with pytest.raises(ValueError):
        N.embed(s, np.zeros((2, 3)))


def test_attention_matches_direct_formula():
    rng = np.random.default_rng(1)
    d = 4
    Wq, Wk, Wv, Wo = (rng.normal(size=(d, d)) for _ in range(4))
    s = _store(a__Wq=Wq, a__Wk=Wk, a__Wv=Wv, a__Wo=Wo)
    x = rng.normal(size=(1, 3, d))
    h = x[0]
    u = (h @ Wq) @ (h @ Wk).T / math.sqrt(d)
    want = _softmax(u) @ (h @ Wv) @ Wo
    got = N.attention_block(s, "a", Tensor(x), heads=1).data[0]
    assert np.allclose(got, want, atol=1e-12)


def test_attention_two_heads_concat_then_merge():
    rng = np.random.default_rng(2)
    d, heads = 4, 2
    Wq, Wk, Wv, Wo = (rng.normal(size=(d, d)) for _ in range(4))
    s = _store(a__Wq=Wq, a__Wk=Wk, a__Wv=Wv, a__Wo=Wo)
    h = rng.normal(size=(5, d))
    q, k, v = h @ Wq, h @ Wk, h @ Wv
    parts = []
    for i in range(heads):
        sl = slice(2 * i, 2 * i + 2)
        parts.append(_softmax(q[:, sl] @ k[:, sl].T / math.sqrt(2)) @ v[:, sl])
    want = np.concatenate(parts, axis=1) @ Wo
    assert np.allclose(N.attention_block(s, "a", Tensor(h[None]), heads).data[0], want, atol=1e-12)


def test_attention_single_node_and_identical_keys():
    rng = np.random.default_rng(3)
    d = 4
    Wq, Wk, Wv, Wo = (rng.normal(size=(d, d)) for _ in range(4))
    s = _store(a__Wq=Wq, a__Wk=Wk, a__Wv=Wv, a__Wo=Wo)
    x = rng.normal(size=(1, 1, d))
    assert np.allclose(N.attention_block(s, "a", Tensor(x), 1).data[0, 0], (x[0, 0] @ Wv) @ Wo)
    # identical rows: every query splits weight evenly, so outputs equal the shared value
    x2 = np.tile(x, (1, 2, 1))
    out = N.attention_block(s, "a", Tensor(x2), 1).data[0]
    assert np.allclose(out, (x[0, 0] @ Wv) @ Wo)


def test_attention_padding_is_ignored():
    rng = np.random.default_rng(4)
    d = 4
    s = _store(**{f"a__{w}": rng.normal(size=(d, d)) for w in ("Wq", "Wk", "Wv", "Wo")})
    x = rng.normal(size=(1, 3, d))
    padded = np.concatenate([x, rng.normal(size=(1, 2, d))], axis=1)
    mask = np.array([[True, True, True, False, False]])
    a = N.attention_block(s, "a", Tensor(x), 2).data[0]
    b = N.attention_block(s, "a", Tensor(padded), 2, mask).data[0, :3]
    assert np.allclose(a, b, atol=1e-12)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_gnn_block_matches_per_node_evaluation():
    rng = np.random.default_rng(5)
    d = 3
    W = {f"W{i}": rng.normal(size=(d, d)) for i in range(1, 5)}
    s = _store(**{f"g__{k}": v for k, v in W.items()})
    h = rng.normal(size=(4, d))
    # path 0-1-2, node 3 isolated
    edges = EdgeIndex([0, 1, 1, 2], [1, 0, 2, 1], 4)
    got = N.gnn_block(s, "g", Tensor(h), edges).data
    nbrs = {0: [1], 1: [0, 2], 2: [1], 3: []}
    for i in range(4):
        want = h[i] @ W["W1"]
        for j in nbrs[i]:
            want = want + _sigmoid(h[i] @ W["W3"] + h[j] @ W["W4"]) * (h[j] @ W["W2"])
        assert np.allclose(got[i], want, atol=1e-12)
    assert np.allclose(got[3], h[3] @ W["W1"], atol=0)
    s0 = _store(**{f"g__W{i}": np.zeros((d, d)) for i in range(1, 5)})
    assert np.all(N.gnn_block(s0, "g", Tensor(h), edges).data == 0)


def _encoder_parts(alpha):
    cfg = N.NetConfig(d=8, layers=1, heads=2, alpha=alpha)
    rng = np.random.default_rng(6)
    s = ParamStore()
    N.init_encoder(s, cfg, rng)
    obs = random_observation(rng)
    batch = _batch(obs)
    x = N.embed(s, batch.feats)
    return cfg, s, batch, x


@pytest.mark.parametrize("alpha", [0.0, 1.0])
def test_encoder_layer_endpoints(alpha):
    cfg, s, batch, x = _encoder_parts(alpha)
    out = N.encoder_layer(s, 0, x, batch, cfg).data
    if alpha == 0.0:
        want = N.attention_branch(s, "enc.0", x, cfg, batch.node_mask).data
    else:
        want = N.gnn_branch(s, "enc.0", x, cfg, batch.edges).data
    assert np.array_equal(out, want)


def test_encoder_layer_mix_with_silenced_gnn_branch():
    cfg, s, batch, x = _encoder_parts(0.8)
    # zero gain and bias on the last GNN norm zeroes the whole GNN branch
    last = f"enc.0.gnn_mlp_norm.{cfg.n - 1}"
    s[last + ".g"].data[:] = 0.0
    s[last + ".b"].data[:] = 0.0
    out = N.encoder_layer(s, 0, x, batch, cfg).data
    att = N.attention_branch(s, "enc.0", x, cfg, batch.node_mask).data
    assert np.allclose(out, 0.2 * att, atol=1e-14)


# ------------------------------------------------------------------ decoder


def test_decoder_matches_direct_evaluation():
    rng = np.random.default_rng(7)
    d = 8
    obs = N.Observation(rng.uniform(size=(6, 4)), np.array([[0, 1], [0, 2], [0, 3], [0, 4], [4, 5]]), 0, np.array([1, 2, 3, 4]))
    batch = _batch(obs)
    x = rng.normal(size=(1, 6, d))
    Wq, Wk = rng.normal(size=(d, d)), rng.normal(size=(d, d))
    s = _store(dec__Wq=Wq, dec__Wk=Wk)
    u = N.decode_logits(s, Tensor(x), batch).data[0]
    q = x[0, 0] @ Wq
    want = np.tanh(np.array([(x[0, j] @ Wk) @ q for j in (1, 2, 3, 4)]) / math.sqrt(d))
    assert np.allclose(u, want, atol=1e-12)
    p = T.softmax_rows(Tensor(u[None]), batch.slot_mask).data[0]
    assert np.allclose(p, _softmax(want), atol=1e-12)


def test_decoder_single_and_symmetric_neighbours():
    net = N.PolicyNet(SMALL, seed=0)
    one = N.Observation(np.array([[0.1, 0.1, 1, 0], [0.2, 0.2, 0, 1]], dtype=float), np.array([[0, 1]]), 0, np.array([1]))
    assert N.policy_output(net, one).probs.tolist() == [1.0]
    # nodes 1 and 2 are mirror images around node 0
    feats = np.array([[0.5, 0.5, 0.0, 1], [0.2, 0.5, 1.0, 0], [0.2, 0.5, 1.0, 0]], dtype=float)
    two = N.Observation(feats, np.array([[0, 1], [0, 2]]), 0, np.array([1, 2]))
    assert np.allclose(N.policy_output(net, two).probs, [0.5, 0.5], atol=1e-12)


def test_isolated_current_node_rejected():
    obs = N.Observation(np.zeros((2, 4)), np.zeros((0, 2), dtype=np.int64), 0, np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        N.policy_output(N.PolicyNet(SMALL), obs)
    with pytest.raises(ValueError):
        N.critic_values(N.CriticNet(SMALL), obs)


def test_critic_zero_head_gives_bias():
    c = N.CriticNet(SMALL, seed=1)
    c.store["head.w"].data[:] = 0.0
    c.store["head.b"].data[:] = 0.75
    obs = random_observation(np.random.default_rng(8))
    assert np.all(N.critic_values(c, obs) == 0.75)


def test_critic_head_matches_direct_affine():
    rng = np.random.default_rng(9)
    d = 4
    x = rng.normal(size=(1, 5, d))
    w, b = rng.normal(size=(2 * d, 1)), rng.normal(size=1)
    obs = N.Observation(np.zeros((5, 4)), np.array([[1, 2], [1, 4]]), 1, np.array([2, 4]))
    got = N.q_head(_store(head__w=w, head__b=b), Tensor(x), _batch(obs)).data[0]
    want = [np.concatenate([x[0, 1], x[0, j]]) @ w[:, 0] + b[0] for j in (2, 4)]
    assert np.allclose(got, want, atol=1e-12)


# --------------------------------------------------------------- properties


def _permuted(obs, perm):
    """Relabel node i as perm[i]."""
    feats = np.empty_like(obs.feats)
    feats[perm] = obs.feats
    e = perm[obs.edges]
    e = np.sort(e, axis=1)
    nb = np.sort(perm[obs.neighbors])
    return N.Observation(feats, e, int(perm[obs.current]), nb)


@given(st.integers(0, 2**31 - 1), st.integers(3, 9))
@settings(max_examples=25, deadline=None)
def test_policy_probability_bounds(seed, n):
    rng = np.random.default_rng(seed)
    obs = random_observation(rng, n)
    net = N.PolicyNet(N.NetConfig(d=8, layers=1, heads=2), seed=seed % 1000)
    p = N.policy_output(net, obs).probs
    k = len(p)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert p.min() >= math.exp(-2) / (k * math.exp(2))
    u = net.logits(_batch(obs)).data
    assert np.all(np.abs(u) < 1)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    obs = random_observation(rng, 7)
    perm = rng.permutation(7)
    other = _permuted(obs, perm)
    cfg = N.NetConfig(d=8, layers=2, heads=2)
    policy, critic = N.PolicyNet(cfg, seed=3), N.CriticNet(cfg, seed=4)
    x = N.encode(policy.store, _batch(obs), cfg).data[0]
    y = N.encode(policy.store, _batch(other), cfg).data[0]
    assert np.allclose(y[perm], x, atol=1e-10)
    # neighbour order follows node index, so map the slots through the relabel
    order = np.argsort(perm[obs.neighbors])
    assert np.allclose(N.policy_output(policy, other).probs, N.policy_output(policy, obs).probs[order], atol=1e-10)
    assert np.allclose(N.critic_values(critic, other), N.critic_values(critic, obs)[order], atol=1e-10)


def test_batched_forward_equals_single():
    rng = np.random.default_rng(10)
    obs = [random_observation(rng, n) for n in (4, 7, 5)]
    net = N.PolicyNet(SMALL, seed=2)
    probs, logp = net.forward(_batch(obs))
    for i, o in enumerate(obs):
        k = len(o.neighbors)
        assert np.allclose(probs.data[i, :k], N.policy_output(net, o).probs, atol=1e-12)
        assert np.all(probs.data[i, k:] == 0)
        assert np.allclose(np.exp(logp.data[i, :k]), probs.data[i, :k], atol=1e-12)


@pytest.mark.parametrize("name", ["policy_logprob", "critic_q"])
def test_end_to_end_gradcheck(name):
    fn, inputs = network_cases(np.random.default_rng(11))[name]
    assert T.gradcheck(fn, inputs, h=1e-5) <= 1e-4


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        N.NetConfig(d=10, heads=4)
    with pytest.raises(ValueError):
        N.NetConfig(alpha=1.5)


def test_parameter_names_are_layer_indexed():
    names = [k for k, _ in N.PolicyNet(N.NetConfig(d=8, layers=3, heads=2)).store.items()]
    assert "enc.2.gnn.1.W3" in names
    assert "dec.Wq" in names and "embed.W" in names
