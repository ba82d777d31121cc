"""Constant-velocity Kalman filter over chosen waypoints, mixed with the policy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_A = 0.5  # m / step^2
SINGULAR_DET = 1e-12
DENSITY_FLOOR = 1e-6


@dataclass
class KfState:
    mean: np.ndarray  # (x, y, vx, vy)
    cov: np.ndarray  # 4 x 4

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(4, 4)

    @classmethod
    def initial(cls, position, p0: float = 1e6) -> "KfState":
        return cls(np.array([position[0], position[1], 0.0, 0.0]), p0 * np.eye(4))

    def copy(self) -> "KfState":
        return KfState(self.mean.copy(), self.cov.copy())


def white_noise_q(sigma_a: float, dt: float = 1.0) -> np.ndarray:
    """Discrete white-noise acceleration covariance for (x, y, vx, vy)."""
    q1 = sigma_a**2 * np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt**2]])
    q = np.zeros((4, 4))
    q[np.ix_([0, 2], [0, 2])] = q1
    q[np.ix_([1, 3], [1, 3])] = q1
    return q


@dataclass
class KfConfig:
    F: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    @classmethod
    def default(cls, sigma_z: float = 1.6, sigma_a: float = SIGMA_A, dt: float = 1.0) -> "KfConfig":
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        return cls(F, H, white_noise_q(sigma_a, dt), sigma_z**2 * np.eye(2))


def kf_predict(state: KfState, cfg: KfConfig) -> KfState:
    return KfState(cfg.F @ state.mean, cfg.F @ state.cov @ cfg.F.T + cfg.Q)


def kf_update(state: KfState, z, cfg: KfConfig) -> KfState:
    z = np.asarray(z, dtype=np.float64).reshape(2)
    s = cfg.H @ state.cov @ cfg.H.T + cfg.R
    if abs(np.linalg.det(s)) < SINGULAR_DET:
        raise np.linalg.LinAlgError("innovation covariance is singular")
    gain = np.linalg.solve(s, cfg.H @ state.cov).T  # P H^T S^-1, S symmetric
    mean = state.mean + gain @ (z - cfg.H @ state.mean)
    cov = (np.eye(4) - gain @ cfg.H) @ state.cov
    return KfState(mean, 0.5 * (cov + cov.T))


def position_density(state: KfState, p) -> tuple[float, bool]:
    """Bivariate normal density of position ``p``; flag is True if Sigma was floored."""
    mu = state.mean[:2]
    sigma = state.cov[:2, :2]
    floored = bool(np.linalg.det(sigma) < SINGULAR_DET)
    if floored:
        sigma = sigma + DENSITY_FLOOR * np.eye(2)
    diff = np.asarray(p, dtype=np.float64) - mu
    m2 = float(diff @ np.linalg.solve(sigma, diff))
    return math.exp(-0.5 * m2) / (2.0 * math.pi * math.sqrt(np.linalg.det(sigma))), floored


def mix_scores(probs, f):
    """``pi + f / sum(f)``; dtype-preserving so exact rationals stay exact."""
    probs = np.asarray(probs)
    f = np.asarray(f)
    return probs + f / f.sum()


def mix_policy(probs, state: KfState, candidates) -> tuple[np.ndarray, np.ndarray, bool]:
    """Scores ``pi + f / sum(f)`` over candidates; returns (scores, f, fell_back)."""
    probs = np.asarray(probs, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 2)
    if len(probs) != len(candidates):
        raise ValueError(f"{len(probs)} probabilities for {len(candidates)} candidates")
    f = np.array([position_density(state, c)[0] for c in candidates])
    total = f.sum()
    if not total > 0.0:
        return probs.copy(), f, True
    return mix_scores(probs, f), f, False


@dataclass
class DebugRecord:
    mean: list
    cov_diag: list
    densities: list
    probs: list
    scores: list
    chosen: int
    fallback: bool

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


class Smoother:
    """Per-episode filter: predict, mix, take argmax, feed the choice back."""

    def __init__(self, start, cfg: KfConfig | None = None, p0: float = 1e6):
        self.cfg = cfg or KfConfig.default()
        self.state = KfState.initial(start, p0)
        self.records: list[DebugRecord] = []

    def step(self, probs, candidates) -> int:
        pred = kf_predict(self.state, self.cfg)
        scores, f, fell_back = mix_policy(probs, pred, candidates)
        a = int(np.argmax(scores))  # first maximum, i.e. lowest index on ties
        self.state = kf_update(pred, np.asarray(candidates, dtype=np.float64)[a], self.cfg)
        self.records.append(DebugRecord(
            pred.mean.tolist(), np.diag(pred.cov).tolist(), f.tolist(),
            np.asarray(probs, dtype=np.float64).tolist(), scores.tolist(), a, fell_back,
        ))
        return a


def smoother_step(state: KfState, probs, candidates, cfg: KfConfig) -> tuple[int, KfState]:
    pred = kf_predict(state, cfg)
    scores, _, _ = mix_policy(probs, pred, candidates)
    a = int(np.argmax(scores))
    return a, kf_update(pred, np.asarray(candidates, dtype=np.float64)[a], cfg)


def turn_angle_sum(points) -> float:
    """Sum of absolute heading changes (radians) along a polyline; repeated points are skipped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return 0.0
    seg = np.diff(pts, axis=0)
    seg = seg[np.hypot(seg[:, 0], seg[:, 1]) > 1e-12]
    if len(seg) < 2:
        return 0.0
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    turn = np.diff(heading)
    turn = (turn + np.pi) % (2 * np.pi) - np.pi
    return float(np.abs(turn).sum())
