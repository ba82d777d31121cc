"""Discrete soft actor-critic over neighbour actions."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .graph import GraphConfig, extract_graph
from .net import CriticNet, GraphBatch, NetConfig, Observation, PolicyNet
from .smooth import SIGMA_A
from .tensor import ParamStore, Tensor
from .world import DungeonParams, EpisodeOutcome, World, parse_map, center_of

log = logging.getLogger(__name__)

BATCH_GROUPS = 4  # forward passes per batch; fewer groups means more padding


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    # SAC
    gamma: float = 1.0
    batch_size: int = 128
    lr_actor: float = 5e-5
    lr_critic: float = 5e-5
    lr_alpha: float = 1e-4
    target_update: int = 64
    iterations: int = 8
    buffer_capacity: int = 10_000
    min_buffer: int = 2000
    entropy_scale: float = 0.05
    init_alpha: float = 0.01
    # run
    episodes: int = 100
    collectors: int = 4
    seed: int = 0
    checkpoint_every: int = 100
    # environment
    env: str = "dungeon"  # or "corridor"
    map_width: int = 64
    map_height: int = 64
    cell_size: float = 0.4
    sensor_range: float = 16.0
    episode_cap: int = 128
    resolution: int = 4
    k: int = 25
    corridor_length: int = 20
    # network
    d: int = 128
    layers: int = 3
    heads: int = 4
    attn_layers: int = 1
    gnn_layers: int = 2
    mix: float = 0.8
    ffn: int = 0
    # waypoint smoothing, process noise of the motion model
    sigma_a: float = SIGMA_A

    def __post_init__(self):
        for name in ("batch_size", "iterations", "target_update", "buffer_capacity", "episode_cap", "k", "collectors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_actor", "lr_critic", "lr_alpha", "init_alpha", "sensor_range", "cell_size", "sigma_a"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.env not in ("dungeon", "corridor"):
            raise ValueError(f"unknown env {self.env!r}")

    @property
    def target_entropy(self) -> float:
        return self.entropy_scale * math.log(self.k)

    def net_config(self) -> NetConfig:
        return NetConfig(d=self.d, layers=self.layers, m=self.attn_layers, n=self.gnn_layers,
                         heads=self.heads, alpha=self.mix, ffn=self.ffn)

    def graph_config(self) -> GraphConfig:
        return GraphConfig(resolution=self.resolution, k=self.k, sensor_range=self.sensor_range)

    def dungeon_params(self) -> DungeonParams:
        return DungeonParams(width=self.map_width, height=self.map_height, cell_size=self.cell_size)


class ConfigError(ValueError):
    pass


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    base = base or TrainConfig()
    types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if types[key] is bool:
                values[key] = val.lower() in ("1", "true", "yes")
            else:
                values[key] = types[key](float(val)) if types[key] is int else types[key](val)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {val!r}") from None
    try:
        return dataclasses.replace(base, **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ------------------------------------------------------------- environments


def corridor_map(length: int = 20):
    """A 1 x ``length`` free strip walled on all sides, 1 m cells."""
    walls = "#" * (length + 2)
    return parse_map("\n".join([walls, "#" + "." * length + "#", walls]), cell_size=1.0)


def make_world(cfg: TrainConfig, seed: int) -> World:
    if cfg.env == "corridor":
        truth = corridor_map(cfg.corridor_length)
        return World(truth, center_of((1, 1), truth.cell_size), cfg.sensor_range, cfg.episode_cap)
    return World.from_seed(seed, cfg.dungeon_params(), sensor_range=cfg.sensor_range, max_steps=cfg.episode_cap)


def corridor_config(**overrides) -> TrainConfig:
    """Micro-environment: graph is a path over the strip, two actions at most."""
    base = dict(env="corridor", corridor_length=20, sensor_range=3.0, resolution=1, k=2, cell_size=1.0,
                d=32, heads=4, collectors=1)
    base.update(overrides)
    return TrainConfig(**base)


# ------------------------------------------------------------------- buffer


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    done: bool

    def __post_init__(self):
        if not 0 <= self.action < len(self.obs.neighbors):
            raise ValueError(f"action {self.action} out of range for {len(self.obs.neighbors)} neighbours")


class ReplayBuffer:
    """Ring buffer of transitions with a seeded uniform sampler."""

    def __init__(self, capacity: int, min_fill: int = 0, seed: int = 0):
        self.capacity = int(capacity)
        self.min_fill = int(min_fill)
        self._items: list[Transition] = []
        self._next = 0
        self.rng = np.random.default_rng([int(seed), 0xB0FF])

    def __len__(self) -> int:
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def extend(self, ts) -> None:
        for t in ts:
            self.push(t)

    def ready(self) -> bool:
        return len(self._items) > self.min_fill

    def sample(self, n: int) -> list[Transition]:
        if not self.ready():
            raise RuntimeError(f"buffer holds {len(self)} transitions, needs more than {self.min_fill}")
        idx = self.rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]

    def oldest(self) -> Transition:
        return self._items[self._next if len(self._items) == self.capacity else 0]


@dataclass
class TransitionBatch:
    obs: GraphBatch
    next_obs: GraphBatch
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    @classmethod
    def from_transitions(cls, ts: list[Transition]) -> "TransitionBatch":
        if not ts:
            raise ValueError("empty batch")
        nxt = [t.next_obs if len(t.next_obs.neighbors) else t.obs for t in ts]
        return cls(
            GraphBatch.from_observations([t.obs for t in ts]),
            GraphBatch.from_observations(nxt),
            np.array([t.action for t in ts], dtype=np.int64),
            np.array([t.reward for t in ts], dtype=np.float64),
            np.array([t.done or not len(t.next_obs.neighbors) for t in ts], dtype=np.float64),
        )


def size_groups(ts: list[Transition], parts: int) -> list[list[Transition]]:
    """Split a batch into ``parts`` near-equal groups ordered by graph size."""
    order = sorted(range(len(ts)), key=lambda i: (ts[i].obs.num_nodes, i))
    return [[ts[i] for i in chunk] for chunk in np.array_split(np.array(order), parts) if len(chunk)]


# ------------------------------------------------------------------- losses


def soft_value(q, probs, alpha: float, logp=None, mask=None):
    """Exact expectation ``sum_a pi(a) (Q(a) - alpha log pi(a))`` over the last axis."""
    q = np.asarray(q, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if q.shape != probs.shape:
        raise ValueError(f"Q and pi misaligned: {q.shape} vs {probs.shape}")
    if mask is None:
        mask = np.ones(q.shape, dtype=bool)
    if logp is None:
        with np.errstate(divide="ignore"):
            logp = np.where(mask, np.log(np.where(mask, probs, 1.0)), 0.0)
    return np.where(mask, probs * (q - alpha * logp), 0.0).sum(axis=-1)


def td_targets(batch: TransitionBatch, policy: PolicyNet, target: CriticNet, alpha: float, gamma: float) -> np.ndarray:
    with T.paused():
        probs, logp = policy.forward(batch.next_obs)
        q_next = target.forward(batch.next_obs)
    v = soft_value(q_next.data, probs.data, alpha, logp.data, batch.next_obs.slot_mask)
    return batch.rewards + gamma * (1.0 - batch.dones) * v


def critic_loss(batch: TransitionBatch, critic: CriticNet, policy: PolicyNet, target: CriticNet,
                alpha: float, gamma: float) -> tuple[Tensor, np.ndarray]:
    """Mean of ``0.5 (Q(o, a) - y)^2``; also returns the full Q table (detached)."""
    y = td_targets(batch, policy, target, alpha, gamma)
    q = critic.forward(batch.obs)
    b = q.shape[0]
    flat = T.reshape(q, (-1, 1))
    chosen = T.reshape(T.take(flat, np.arange(b) * q.shape[1] + batch.actions), (b,))
    err = T.sub(chosen, y)
    return T.scale(T.mean(T.mul(err, err)), 0.5), q.data.copy()


def policy_loss(batch: TransitionBatch, policy: PolicyNet, q_values: np.ndarray, alpha: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Mean over observations of ``sum_a pi(a) (alpha log pi(a) - Q(a))``; Q is a constant."""
    probs, logp = policy.forward(batch.obs)
    mask = batch.obs.slot_mask
    q = np.where(mask, q_values, 0.0)
    inner = T.sub(T.scale(logp, alpha), q)
    per_obs = T.tsum(T.mul(probs, inner), axis=1)
    return T.mean(per_obs), probs.data.copy(), logp.data.copy()


def temperature_loss(log_alpha: Tensor, probs: np.ndarray, logp: np.ndarray, mask: np.ndarray,
                     target_entropy: float) -> Tensor:
    """Mean of ``-alpha sum_a pi(a) (log pi(a) + H_target)`` with alpha = exp(log_alpha)."""
    per_obs = np.where(mask, probs * (logp + target_entropy), 0.0).sum(axis=1)
    return T.mean(T.mul(T.scale(T.exp(log_alpha), -1.0), Tensor(per_obs)))


def entropy(probs: np.ndarray, logp: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return -np.where(mask, probs * logp, 0.0).sum(axis=-1)


# --------------------------------------------------------------- collection


def observe(world: World, gcfg: GraphConfig) -> tuple[Observation, object]:
    g = extract_graph(world.belief, world.state.visited, world.state.position, gcfg)
    return Observation.from_graph(g, world.truth.extent), g


def collect_episode(world: World, policy: PolicyNet, gcfg: GraphConfig, mode: str = "sample",
                    rng: np.random.Generator | None = None) -> tuple[list[Transition], EpisodeOutcome]:
    """Roll one episode; ``mode`` is ``sample``, ``greedy`` or ``uniform``."""
    if mode not in ("sample", "greedy", "uniform"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng or np.random.default_rng(0)
    out: list[Transition] = []
    obs, g = observe(world, gcfg)
    while not world.done:
        if len(obs.neighbors) == 0:
            world.fail()
            break
        n = len(obs.neighbors)
        if mode == "uniform":
            a = int(rng.integers(n))
        else:
            probs, _ = policy.forward(GraphBatch.from_observations([obs]))
            p = probs.data[0, :n]
            a = int(np.argmax(p)) if mode == "greedy" else int(rng.choice(n, p=p / p.sum()))
        _, r, done = world.step(g.coords[obs.neighbors[a]])
        nxt, g = observe(world, gcfg)
        out.append(Transition(obs, a, r, nxt, done))
        obs = nxt
    return out, world.outcome


# ----------------------------------------------------------------- trainer


METRIC_FIELDS = [
    "episode", "seed", "reward", "distance", "steps", "completed", "failed",
    "critic_loss", "policy_loss", "alpha_loss", "alpha", "entropy", "buffer", "train_steps",
]


class Trainer:
    """Single trainer thread; collectors act on read-only policy snapshots."""

    def __init__(self, cfg: TrainConfig, run_dir=None, resume: bool = False):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else None
        ncfg = cfg.net_config()
        self.policy = PolicyNet(ncfg, seed=cfg.seed)
        self.critic = CriticNet(ncfg, seed=cfg.seed)
        self.target = self.critic.snapshot()
        self.alpha_store = ParamStore()
        self.alpha_store.add("log_alpha", np.array([math.log(cfg.init_alpha)]))
        self.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.min_buffer, cfg.seed)
        self.gcfg = cfg.graph_config()
        self.episode = 0
        self.train_steps = 0
        self.metrics: list[dict] = []
        if self.run_dir is not None:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            with open(self.run_dir / "config.txt", "w") as fh:
                fh.write(format_config(cfg))
            if resume:
                latest = latest_checkpoint(self.run_dir)
                if latest is not None:
                    self.load(latest)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.alpha_store["log_alpha"].data[0]))

    def stores(self) -> dict[str, ParamStore]:
        return {"actor": self.policy.store, "critic": self.critic.store, "target": self.target.store,
                "alpha": self.alpha_store}

    # -- persistence

    def save(self, path) -> None:
        T.save_checkpoint(path, self.stores(), {"episode": self.episode, "train_steps": self.train_steps})

    def load(self, path) -> None:
        _, meta = T.load_checkpoint(path, into=self.stores())
        self.episode = int(meta.get("episode", 0))
        self.train_steps = int(meta.get("train_steps", 0))

    # -- learning

    def train_step(self) -> dict:
        """One critic, policy and temperature update on a sampled batch.

        The batch is processed in groups of similar graph size to cut padding;
        each group's mean loss is weighted by its share, so the gradients are
        those of the full-batch mean.
        """
        cfg = self.cfg
        groups = [TransitionBatch.from_transitions(g) for g in size_groups(self.buffer.sample(cfg.batch_size), BATCH_GROUPS)]
        share = [len(g.actions) / cfg.batch_size for g in groups]
        alpha = self.alpha
        stats = dict.fromkeys(("critic_loss", "policy_loss", "alpha_loss", "entropy"), 0.0)

        q_tables = []
        for g, w in zip(groups, share):
            with T.trace():
                closs, q = critic_loss(g, self.critic, self.policy, self.target, alpha, cfg.gamma)
                T.backward(T.scale(closs, w))
            q_tables.append(q)
            stats["critic_loss"] += w * closs.item()
        T.adam_step(self.critic.store, cfg.lr_critic)

        pis = []
        for g, w, q in zip(groups, share, q_tables):
            with T.trace():
                ploss, probs, logp = policy_loss(g, self.policy, q, alpha)
                T.backward(T.scale(ploss, w))
            pis.append((probs, logp, g.obs.slot_mask))
            stats["policy_loss"] += w * ploss.item()
        T.adam_step(self.policy.store, cfg.lr_actor)

        for (probs, logp, mask), w in zip(pis, share):
            with T.trace():
                aloss = temperature_loss(self.alpha_store["log_alpha"], probs, logp, mask, cfg.target_entropy)
                T.backward(T.scale(aloss, w))
            stats["alpha_loss"] += w * aloss.item()
            stats["entropy"] += w * float(entropy(probs, logp, mask).mean())
        T.adam_step(self.alpha_store, cfg.lr_alpha)

        self.train_steps += 1
        if self.train_steps % cfg.target_update == 0:
            self.target.store.copy_values_from(self.critic.store)
        return stats

    # -- loop

    def episode_seed(self, episode: int) -> int:
        return int(self.cfg.seed) * 1_000_003 + episode

    def _collect(self, episode: int, policy: PolicyNet):
        seed = self.episode_seed(episode)
        rng = np.random.default_rng([seed, 0xC011])
        world = make_world(self.cfg, seed)
        ts, outcome = collect_episode(world, policy, self.gcfg, "sample", rng)
        return episode, seed, ts, outcome

    def run(self, episodes: int | None = None, callback: Callable[["Trainer", dict], bool] | None = None) -> list[dict]:
        """Train until ``episodes`` in total have been collected.

        ``callback(trainer, row)`` runs after every episode; returning True stops.
        """
        cfg = self.cfg
        total = cfg.episodes if episodes is None else episodes
        pool = ThreadPoolExecutor(max_workers=cfg.collectors) if cfg.collectors > 1 else None
        try:
            while self.episode < total:
                n = min(cfg.collectors, total - self.episode)
                snap = self.policy.snapshot()
                eps = range(self.episode, self.episode + n)
                if pool is None:
                    results = [self._collect(e, snap) for e in eps]
                else:
                    results = list(pool.map(lambda e: self._collect(e, snap), eps))
                stop = False
                for ep, seed, ts, outcome in results:
                    self.buffer.extend(ts)
                    self.episode = ep + 1
                    row = self._after_episode(ep, seed, outcome)
                    if callback is not None and callback(self, row):
                        stop = True
                if stop:
                    break
        finally:
            if pool is not None:
                pool.shutdown()
        return self.metrics

    def _after_episode(self, ep: int, seed: int, outcome: EpisodeOutcome) -> dict:
        cfg = self.cfg
        stats = []
        if self.buffer.ready():
            stats = [self.train_step() for _ in range(cfg.iterations)]
        row = {
            "episode": ep, "seed": seed, "reward": float(sum(outcome.rewards)),
            "distance": outcome.traveled, "steps": outcome.steps,
            "completed": int(outcome.completed), "failed": int(outcome.failed),
            "alpha": self.alpha, "buffer": len(self.buffer), "train_steps": self.train_steps,
        }
        for key in ("critic_loss", "policy_loss", "alpha_loss", "entropy"):
            row[key] = float(np.mean([s[key] for s in stats])) if stats else float("nan")
        self.metrics.append(row)
        if self.run_dir is not None:
            self._write_metrics(row)
            if cfg.checkpoint_every and self.episode % cfg.checkpoint_every == 0:
                self.save(self.run_dir / "checkpoints" / f"ep_{self.episode:06d}.ckpt")
        return row

    def _write_metrics(self, row: dict) -> None:
        path = self.run_dir / "metrics.csv"
        fresh = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if fresh:
                w.writeheader()
            w.writerow(row)


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted(Path(run_dir, "checkpoints").glob("ep_*.ckpt"))
    return ckpts[-1] if ckpts else None


def train(cfg: TrainConfig, run_dir, resume: bool = False) -> Trainer:
    trainer = Trainer(cfg, run_dir, resume=resume)
    trainer.run()
    trainer.save(Path(run_dir) / "checkpoints" / f"ep_{trainer.episode:06d}.ckpt")
    return trainer


def load_policy(path, cfg: TrainConfig | None = None) -> PolicyNet:
    """Policy network from a trainer checkpoint (config read from the run dir if absent)."""
    path = Path(path)
    if cfg is None:
        cand = path.parent.parent / "config.txt"
        cfg = load_config(cand) if cand.exists() else TrainConfig()
    stores, _ = T.load_checkpoint(path)
    if "actor" not in stores:
        raise T.CheckpointError(f"{path}: no actor store")
    expected = PolicyNet(cfg.net_config()).store
    diff = T._manifest_diff({"actor": {"params": [[k, list(s)] for k, s in stores["actor"].manifest()]}},
                            {"actor": expected})
    if diff:
        raise T.CheckpointError(f"{path}: manifest mismatch:\n" + "\n".join(diff))
    return PolicyNet(cfg.net_config(), store=stores["actor"])
