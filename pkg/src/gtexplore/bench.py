"""Baseline planners, seeded evaluation suites and report files."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .graph import BeliefGraph, GraphConfig, extract_graph
from .learn import TrainConfig, load_policy, make_world
from .net import GraphBatch, Observation, PolicyNet
from .smooth import SIGMA_A, KfConfig, Smoother, turn_angle_sum
from .world import BeliefMap, World

PLANNERS = ("nearest", "utility", "grate-raw", "grate-smoothed", "random")
CSV_VERSION = 1
CSV_FIELDS = ["seed", "planner", "distance", "steps", "completed", "turn_angle_sum"]
UTILITY_DECAY = 0.25  # 1/m


class ExplorationComplete(Exception):
    """No reachable node still sees a frontier."""


def path_lengths(graph: BeliefGraph) -> tuple[np.ndarray, np.ndarray]:
    """Shortest path lengths and predecessors from the current node."""
    e = graph.edges()
    n = len(graph)
    if len(e):
        w = np.hypot(*(graph.coords[e[:, 0]] - graph.coords[e[:, 1]]).T)
        mat = csr_matrix((np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]]))), shape=(n, n))
    else:
        mat = csr_matrix((n, n))
    dist, pred = dijkstra(mat, directed=True, indices=graph.current_index, return_predecessors=True)
    return dist, pred


def first_hop(graph: BeliefGraph, pred: np.ndarray, target: int) -> int:
    """Action index (position in the neighbour list) of the first edge toward ``target``."""
    cur = graph.current_index
    node = target
    while pred[node] != cur:
        node = pred[node]
        if node < 0:
            raise ValueError(f"node {target} unreachable")
    return int(np.searchsorted(graph.neighbors(cur), node))


def _candidates(graph: BeliefGraph, dist: np.ndarray) -> np.ndarray:
    # sensing from a visited spot reveals nothing new, so visited nodes are skipped
    ok = (graph.utility > 0) & np.isfinite(dist) & (graph.guidepost == 0)
    ok[graph.current_index] = False
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        raise ExplorationComplete("no reachable node with positive utility")
    return idx


def nearest_planner(graph: BeliefGraph, belief: BeliefMap | None = None) -> int:
    """First hop toward the positive-utility node at least path distance."""
    dist, pred = path_lengths(graph)
    idx = _candidates(graph, dist)
    target = idx[int(np.argmin(dist[idx]))]  # idx ascending, so ties keep the lower index
    return first_hop(graph, pred, int(target))


def utility_planner(graph: BeliefGraph, belief: BeliefMap | None = None, lam: float = UTILITY_DECAY) -> int:
    """First hop toward the node maximising ``u * exp(-lam * pathdist)``."""
    dist, pred = path_lengths(graph)
    idx = _candidates(graph, dist)
    score = graph.utility[idx] * np.exp(-lam * dist[idx])
    target = idx[int(np.argmax(score))]
    return first_hop(graph, pred, int(target))


def random_planner(graph: BeliefGraph, rng: np.random.Generator) -> int:
    n = len(graph.neighbors(graph.current_index))
    if n == 0:
        raise ValueError("robot node has no neighbours")
    return int(rng.integers(n))


# --------------------------------------------------------------- episodes


@dataclass
class EvalRow:
    seed: int
    planner: str
    distance: float
    steps: int
    completed: bool
    turn_angle_sum: float


@dataclass
class StepTrace:
    step: int
    action: int
    position: list
    target: list
    reward: float
    graph: dict
    smoother: dict | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def _graph_record(g: BeliefGraph) -> dict:
    return {
        "coords": g.coords.tolist(), "utility": g.utility.tolist(), "guidepost": g.guidepost.tolist(),
        "edges": g.edges().tolist(), "current": int(g.current_index),
    }


def eval_cap(cfg: TrainConfig) -> int:
    return 512 if cfg.map_width * cfg.map_height > 64 * 64 else cfg.episode_cap


def run_episode(world: World, planner: str, gcfg: GraphConfig, policy: PolicyNet | None = None,
                seed: int = 0, trace: bool = False, sigma_a: float = SIGMA_A) -> tuple[EvalRow, list[StepTrace]]:
    """Drive ``world`` with ``planner`` until completion, the cap, or a dead end."""
    if planner not in PLANNERS:
        raise ValueError(f"unknown planner {planner!r}; choose from {', '.join(PLANNERS)}")
    if planner.startswith("grate") and policy is None:
        raise ValueError(f"{planner} needs a policy checkpoint")
    rng = np.random.default_rng([int(seed), 0xE7A1])
    smoother = None
    if planner == "grate-smoothed":
        smoother = Smoother(world.state.position, KfConfig.default(sigma_z=gcfg.resolution * world.truth.cell_size, sigma_a=sigma_a))
    path = [world.state.position]
    traces: list[StepTrace] = []
    while not world.done:
        g = extract_graph(world.belief, world.state.visited, world.state.position, gcfg)
        nb = g.neighbors(g.current_index)
        if len(nb) == 0:
            world.fail()
            break
        try:
            # one end condition for every planner: no reachable node still sees a frontier
            _candidates(g, path_lengths(g)[0])
            if planner == "nearest":
                a = nearest_planner(g, world.belief)
            elif planner == "utility":
                a = utility_planner(g, world.belief)
            elif planner == "random":
                a = random_planner(g, rng)
            else:
                obs = Observation.from_graph(g, world.truth.extent)
                probs = policy.forward(GraphBatch.from_observations([obs]))[0].data[0, : len(nb)]
                a = int(np.argmax(probs)) if smoother is None else smoother.step(probs, g.coords[nb])
        except ExplorationComplete:
            world.fail()
            break
        target = g.coords[nb[a]]
        pos = list(world.state.position)
        _, r, _ = world.step(target)
        path.append(world.state.position)
        if trace:
            dbg = smoother.records[-1].__dict__ if smoother is not None else None
            traces.append(StepTrace(world.state.step_index, a, pos, target.tolist(), r, _graph_record(g), dbg))
    out = world.outcome
    row = EvalRow(int(seed), planner, float(out.traveled), int(out.steps), bool(out.completed), turn_angle_sum(path))
    return row, traces


# ----------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def _col(self, name: str) -> np.ndarray:
        return np.array([float(getattr(r, name)) for r in self.rows])

    def mean(self, name: str = "distance") -> float:
        return float(self._col(name).mean()) if self.rows else math.nan

    def std(self, name: str = "distance") -> float:
        return float(self._col(name).std()) if self.rows else math.nan

    @property
    def completion_rate(self) -> float:
        return self.mean("completed")

    def summary(self) -> str:
        return (f"distance {self.mean():.2f} +- {self.std():.2f} m, steps {self.mean('steps'):.1f}, "
                f"completed {100 * self.completion_rate:.0f}%, turn {self.mean('turn_angle_sum'):.2f} rad")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# gtexplore eval report v{CSV_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([r.seed, r.planner, repr(r.distance), r.steps, int(r.completed), repr(r.turn_angle_sum)])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            head = fh.readline()
            if not head.startswith("# gtexplore eval report v"):
                raise ValueError(f"{path}: missing version header")
            rows = [
                EvalRow(int(d["seed"]), d["planner"], float(d["distance"]), int(d["steps"]),
                        bool(int(d["completed"])), float(d["turn_angle_sum"]))
                for d in csv.DictReader(fh)
            ]
        return cls(rows)


def run_eval(seeds, planner: str, cfg: TrainConfig | None = None, checkpoint=None,
             policy: PolicyNet | None = None, workers: int = 1) -> EvalReport:
    """Greedy episode per seed; rows keep the seed order whatever ``workers`` is."""
    cfg = cfg or TrainConfig()
    if planner.startswith("grate") and policy is None:
        if checkpoint is None:
            raise ValueError(f"{planner} needs a checkpoint")
        policy = load_policy(checkpoint, cfg)
    gcfg = cfg.graph_config()
    cap = eval_cap(cfg)

    def one(seed):
        world = make_world(cfg, int(seed))
        world.max_steps = cap
        return run_episode(world, planner, gcfg, policy, int(seed), sigma_a=cfg.sigma_a)[0]

    seeds = [int(s) for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, seeds))
    else:
        rows = [one(s) for s in seeds]
    return EvalReport(rows)


def read_seeds(path) -> list[int]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer seed: {line!r}") from None
    return out
