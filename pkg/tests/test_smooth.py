import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from gtexplore import smooth as S


# Brute-force oracle: matrices written out by hand, explicit inverse.
F_ORACLE = np.array([[1.0, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]])
H_ORACLE = np.array([[1.0, 0, 0, 0], [0, 1, 0, 0]])


def oracle_predict(x, P, Q):
    return F_ORACLE @ x, F_ORACLE @ P @ F_ORACLE.T + Q


def oracle_update(x, P, z, R):
    S_ = H_ORACLE @ P @ H_ORACLE.T + R
    K = P @ H_ORACLE.T @ np.linalg.inv(S_)
    x2 = x + K @ (z - H_ORACLE @ x)
    P2 = (np.eye(4) - K @ H_ORACLE) @ P
    return x2, (P2 + P2.T) / 2


def random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T + 0.1 * np.eye(n))


def kf_cfg(Q, R):
    base = S.KfConfig.default()
    return S.KfConfig(base.F, base.H, Q, R)


def test_default_config_matrices():
    cfg = S.KfConfig.default(sigma_z=2.0, sigma_a=0.5)
    assert np.array_equal(cfg.F, F_ORACLE) and np.array_equal(cfg.H, H_ORACLE)
    assert np.array_equal(cfg.R, 4.0 * np.eye(2))
    q = 0.25 * np.array([[0.25, 0, 0.5, 0], [0, 0.25, 0, 0.5], [0.5, 0, 1, 0], [0, 0.5, 0, 1]])
    assert np.allclose(cfg.Q, q, atol=1e-15)
    assert np.all(np.linalg.eigvalsh(cfg.Q) >= -1e-15)


def test_predict_examples():
    cfg = kf_cfg(np.zeros((4, 4)), np.eye(2))
    st_ = S.KfState(np.array([2.0, 3.0, 0.0, 0.0]), np.eye(4))
    out = S.kf_predict(st_, cfg)
    assert np.array_equal(out.mean, F_ORACLE @ st_.mean)
    moving = S.kf_predict(S.KfState([0.0, 0.0, 1.0, 0.0], np.eye(4)), cfg)
    assert moving.mean.tolist() == [1.0, 0.0, 1.0, 0.0]


def test_update_examples():
    cfg = S.KfConfig.default()
    pred = S.KfState([1.0, 2.0, 0.5, -0.5], random_spd(np.random.default_rng(0), 4))
    same = S.kf_update(pred, pred.mean[:2], cfg)
    assert np.allclose(same.mean, pred.mean, atol=1e-15)
    huge = kf_cfg(cfg.Q, 1e12 * np.eye(2))
    far = S.kf_update(pred, [50.0, -40.0], huge)
    assert np.linalg.norm(far.mean - pred.mean) <= 1e-6


def test_singular_innovation_rejected():
    cov = np.zeros((4, 4))
    cov[2, 2] = cov[3, 3] = 1.0
    cfg = kf_cfg(np.zeros((4, 4)), np.zeros((2, 2)))
    with pytest.raises(np.linalg.LinAlgError):
        S.kf_update(S.KfState(np.zeros(4), cov), [0.0, 0.0], cfg)


def run_oracle_cycles(n, seed=0):
    """Predict/update cycles against the oracle; returns worst deviation and PSD/symmetry checks."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    min_eig = np.inf
    asym = 0.0
    state = S.KfState(rng.normal(size=4), random_spd(rng, 4))
    for _ in range(n):
        Q = random_spd(rng, 4, 0.1)
        R = random_spd(rng, 2, 0.5)
        cfg = kf_cfg(Q, R)
        z = rng.normal(size=2) * 3
        x, P = state.mean.copy(), state.cov.copy()
        pred = S.kf_predict(state, cfg)
        xo, Po = oracle_predict(x, P, Q)
        worst = max(worst, np.abs(pred.mean - xo).max(), np.abs(pred.cov - Po).max())
        post = S.kf_update(pred, z, cfg)
        # the oracle gets the implementation's prediction so errors never compound
        xo, Po = oracle_update(pred.mean, pred.cov, z, R)
        worst = max(worst, np.abs(post.mean - xo).max(), np.abs(post.cov - Po).max())
        asym = max(asym, np.abs(post.cov - post.cov.T).max())
        min_eig = min(min_eig, np.linalg.eigvalsh(post.cov).min())
        state = post
    return worst, asym, min_eig


def test_kalman_matches_oracle_over_many_cycles():
    worst, asym, min_eig = run_oracle_cycles(300)
    assert worst <= 1e-10
    assert asym <= 1e-10
    assert min_eig >= -1e-10


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_filter_covariance_stays_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    sm = S.Smoother(rng.normal(size=2), S.KfConfig.default(sigma_z=float(rng.uniform(0.2, 3))))
    for _ in range(12):
        cands = rng.normal(size=(3, 2)) * 2 + sm.state.mean[:2]
        sm.step(rng.dirichlet(np.ones(3)), cands)
        P = sm.state.cov
        assert np.abs(P - P.T).max() <= 1e-10
        assert np.linalg.eigvalsh(P).min() >= -1e-10


# ----------------------------------------------------------------- density


def test_density_examples():
    cov = np.diag([2.0, 0.5, 1, 1])
    st_ = S.KfState([1.0, -1.0, 0, 0], cov)
    d, floored = S.position_density(st_, [1.0, -1.0])
    assert d == pytest.approx(1 / (2 * math.pi * math.sqrt(1.0)), rel=1e-14) and not floored
    unit = S.KfState([0.0, 0.0, 0, 0], np.eye(4))
    d, _ = S.position_density(unit, [2.0, 0.0])
    assert d == pytest.approx(math.exp(-2) / (2 * math.pi), rel=1e-14)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_density_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    cov = random_spd(rng, 4)
    st_ = S.KfState(rng.normal(size=4), cov)
    p = rng.normal(size=2)
    want = multivariate_normal(st_.mean[:2], cov[:2, :2]).pdf(p)
    assert S.position_density(st_, p)[0] == pytest.approx(want, rel=1e-10)


def test_density_floor_for_singular_position_block():
    cov = np.zeros((4, 4))
    cov[2, 2] = cov[3, 3] = 1.0
    d, floored = S.position_density(S.KfState(np.zeros(4), cov), [0.0, 0.0])
    assert floored
    assert d == pytest.approx(1 / (2 * math.pi * 1e-6), rel=1e-12)


# --------------------------------------------------------------------- mix


def test_mix_worked_example_exact():
    probs = [Fraction(6, 10), Fraction(3, 10), Fraction(1, 10)]
    f = [Fraction(1, 10), Fraction(6, 10), Fraction(3, 10)]
    scores = S.mix_scores(probs, f)
    assert list(scores) == [Fraction(7, 10), Fraction(9, 10), Fraction(4, 10)]
    assert int(np.argmax(scores)) == 1
    # any positive rescaling of f gives the same scores
    assert list(S.mix_scores(probs, [x * 37 for x in f])) == list(scores)


def test_mix_policy_worked_example_through_densities():
    # unit covariance, candidates on the x axis whose densities are in ratio 1 : 6 : 3
    w = np.array([0.1, 0.6, 0.3])
    r = np.sqrt(-2 * np.log(w / w.max()))
    cands = np.stack([r, np.zeros(3)], axis=1)
    scores, f, fell = S.mix_policy([0.6, 0.3, 0.1], S.KfState(np.zeros(4), np.eye(4)), cands)
    assert not fell
    assert np.allclose(f / f.sum(), w, atol=1e-15)
    assert np.allclose(scores, [0.7, 0.9, 0.4], atol=1e-15)
    assert int(np.argmax(scores)) == 1


def test_mix_symmetric_tie_takes_lowest_index():
    cands = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    scores, _, _ = S.mix_policy(np.full(3, 1 / 3), S.KfState(np.zeros(4), np.eye(4)), cands)
    assert np.allclose(scores, 2 / 3, atol=1e-15)
    a, _ = S.smoother_step(S.KfState(np.zeros(4), np.eye(4)), np.full(3, 1 / 3), cands, kf_cfg(np.zeros((4, 4)), np.eye(2)))
    assert a == 0


def test_mix_dominant_density_wins():
    st_ = S.KfState([1.0, 0.0, 0, 0], np.eye(4) * 0.01)
    cands = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    scores, _, _ = S.mix_policy(np.full(3, 1 / 3), st_, cands)
    assert int(np.argmax(scores)) == 1


def test_mix_underflow_falls_back_to_policy():
    st_ = S.KfState(np.zeros(4), np.eye(4) * 1e-4)
    probs = np.array([0.2, 0.5, 0.3])
    scores, f, fell = S.mix_policy(probs, st_, np.full((3, 2), 1e3))
    assert fell and np.all(f == 0)
    assert np.array_equal(scores, probs)


def test_mix_length_mismatch_rejected():
    with pytest.raises(ValueError):
        S.mix_policy([0.5, 0.5], S.KfState(np.zeros(4), np.eye(4)), np.zeros((3, 2)))


@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_mix_sum_and_scale_invariance(seed, n, c):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n))
    st_ = S.KfState(rng.normal(size=4), random_spd(rng, 4))
    cands = rng.normal(size=(n, 2))
    scores, f, fell = S.mix_policy(probs, st_, cands)
    assert not fell
    assert abs(scores.sum() - 2.0) <= 1e-9
    assert int(np.argmax(S.mix_scores(probs, c * f))) == int(np.argmax(scores))


# ---------------------------------------------------------------- smoother


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_flat_prior_defers_to_policy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    probs = rng.dirichlet(np.ones(n))
    top = np.sort(probs)
    if top[-1] - top[-2] < 1e-3:
        probs[np.argmax(probs)] += 1e-3
        probs /= probs.sum()
    start = rng.normal(size=2) * 5
    sm = S.Smoother(start, S.KfConfig.default(), p0=1e6)
    assert sm.step(probs, start + rng.normal(size=(n, 2)) * 3) == int(np.argmax(probs))


def test_straight_history_demotes_zigzag():
    cfg = S.KfConfig.default(sigma_z=0.5)
    sm = S.Smoother((0.0, 0.0), cfg)
    # five scripted steps along +x with a single candidate each
    for i in range(1, 6):
        assert sm.step([1.0], [[float(i), 0.0]]) == 0
    # oracle replay of the same filter
    x = np.zeros(4)
    P = 1e6 * np.eye(4)
    for i in range(1, 6):
        x, P = oracle_predict(x, P, cfg.Q)
        x, P = oracle_update(x, P, np.array([float(i), 0.0]), cfg.R)
    assert np.allclose(sm.state.mean, x, atol=1e-9)
    xp, Pp = oracle_predict(x, P, cfg.Q)
    cands = np.array([[6.0, 1.0], [6.0, 0.0]])  # zig-zag first, straight second
    d = [multivariate_normal(xp[:2], Pp[:2, :2]).pdf(c) for c in cands]
    assert d[1] > d[0]
    probs = [0.55, 0.45]
    want = np.array(probs) + np.array(d) / sum(d)
    assert sm.step(probs, cands) == 1
    assert np.allclose(sm.records[-1].scores, want, atol=1e-12)


def oscillating_run(smooth: bool, steps: int = 20):
    """The walk heads +x; the policy alternately prefers left and right diagonals."""
    pos = np.zeros(2)
    path = [pos.copy()]
    sm = S.Smoother(pos, S.KfConfig.default(sigma_z=0.5))
    for t in range(steps):
        cands = pos + np.array([[1.0, 1.0], [1.0, 0.0], [1.0, -1.0]])
        probs = np.array([0.45, 0.35, 0.2]) if t % 2 == 0 else np.array([0.2, 0.35, 0.45])
        a = sm.step(probs, cands) if smooth else int(np.argmax(probs))
        pos = cands[a]
        path.append(pos.copy())
    return S.turn_angle_sum(path)


def test_smoothing_reduces_turning_on_oscillating_policy():
    raw, smoothed = oscillating_run(False), oscillating_run(True)
    assert raw > 0
    assert smoothed <= raw
    assert smoothed < 0.5 * raw


def test_debug_record_json():
    sm = S.Smoother((0.0, 0.0))
    sm.step([0.3, 0.7], [[1.0, 0.0], [0.0, 1.0]])
    rec = json.loads(sm.records[0].to_json())
    assert set(rec) == {"mean", "cov_diag", "densities", "probs", "scores", "chosen", "fallback"}
    assert rec["chosen"] == 1


# -------------------------------------------------------------- turn angles


def test_turn_angle_sum():
    assert S.turn_angle_sum([(0, 0), (1, 0), (2, 0)]) == 0.0
    square = [(0, 0), (1, 0), (1, 1), (0, 1), (0, 0)]
    assert S.turn_angle_sum(square) == pytest.approx(1.5 * math.pi)
    assert S.turn_angle_sum([(0, 0), (1, 0), (1, 0), (1, 1)]) == pytest.approx(math.pi / 2)
    assert S.turn_angle_sum([(0, 0), (1, 0), (0, 0)]) == pytest.approx(math.pi)
    assert S.turn_angle_sum([(0, 0)]) == 0.0
