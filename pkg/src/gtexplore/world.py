"""2D grid exploration world: maps, sensing, frontiers and episode dynamics.

Coordinates: cell ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` in
cell units, so its centre in metres is ``((col + 0.5) * cs, (row + 0.5) * cs)``
with ``x`` along columns and ``y`` along rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _grid
from ._grid import FREE, OCCUPIED, UNKNOWN

# reward constants
FRONTIER_SCALE = 1.0 / 64.0
DISTANCE_SCALE = 1.0 / 50.0
FINISH_REWARD = 20.0
EPISODE_CAP = 128


class MapError(ValueError):
    pass


@dataclass
class GroundTruthMap:
    cells: np.ndarray  # int8, rows x cols, 0 free / 1 occupied
    cell_size: float = 0.4

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.cell_size, self.height * self.cell_size

    def free_mask(self) -> np.ndarray:
        return self.cells == FREE


@dataclass
class BeliefMap:
    cells: np.ndarray  # int8, -1 unknown / 0 free / 1 occupied
    cell_size: float = 0.4

    @classmethod
    def unknown_like(cls, truth: GroundTruthMap) -> "BeliefMap":
        return cls(np.full(truth.cells.shape, UNKNOWN, dtype=np.int8), truth.cell_size)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.cell_size, self.height * self.cell_size

    def copy(self) -> "BeliefMap":
        return BeliefMap(self.cells.copy(), self.cell_size)

    def unknown_count(self) -> int:
        return int(np.count_nonzero(self.cells == UNKNOWN))


def cell_of(pos, cell_size: float) -> tuple[int, int]:
    x, y = pos
    return int(math.floor(y / cell_size)), int(math.floor(x / cell_size))


def center_of(rc, cell_size: float) -> tuple[float, float]:
    r, c = rc
    return ((c + 0.5) * cell_size, (r + 0.5) * cell_size)


# ------------------------------------------------------------------ generator


@dataclass(frozen=True)
class DungeonParams:
    width: int = 64
    height: int = 64
    cell_size: float = 0.4
    min_room: int = 6
    max_room: int = 14
    max_rooms: int = 8
    corridor_width: int = 3
    placement_tries: int = 200
    retries: int = 20

    def validate(self) -> None:
        if self.width < 32 or self.height < 32:
            raise MapError(f"map must be at least 32x32 cells, got {self.width}x{self.height}")
        if self.min_room < 3:
            raise MapError(f"min_room must be >= 3, got {self.min_room}")
        if self.max_room < self.min_room:
            raise MapError("max_room < min_room")
        if self.max_room + 2 > min(self.width, self.height):
            raise MapError("rooms do not fit in the map")
        if not 1 <= self.corridor_width <= self.min_room:
            raise MapError("corridor_width must lie in [1, min_room]")
        if self.cell_size <= 0:
            raise MapError("cell_size must be positive")


def generate_dungeon(seed: int, params: DungeonParams | None = None) -> GroundTruthMap:
    """Rooms joined by L-shaped corridors, carved into solid rock.

    Output is a pure function of ``(seed, params)``.
    """
    params = params or DungeonParams()
    params.validate()
    for attempt in range(params.retries):
        rng = np.random.default_rng([int(seed), attempt])
        cells = _carve(rng, params)
        if cells is not None and is_connected(cells):
            return GroundTruthMap(cells, params.cell_size)
    raise MapError(f"no connected dungeon after {params.retries} attempts (seed={seed})")


def _carve(rng: np.random.Generator, p: DungeonParams) -> np.ndarray | None:
    h, w = p.height, p.width
    cells = np.ones((h, w), dtype=np.int8)
    rooms: list[tuple[int, int, int, int]] = []  # r0, c0, rh, rw (interior)
    for _ in range(p.placement_tries):
        if len(rooms) >= p.max_rooms:
            break
        rh = int(rng.integers(p.min_room, p.max_room + 1))
        rw = int(rng.integers(p.min_room, p.max_room + 1))
        r0 = int(rng.integers(1, h - rh))
        c0 = int(rng.integers(1, w - rw))
        if any(r0 - 1 < r + rr + 1 and r < r0 + rh + 1 and c0 - 1 < c + cw + 1 and c < c0 + rw + 1 for r, c, rr, cw in rooms):
            continue
        rooms.append((r0, c0, rh, rw))
        cells[r0 : r0 + rh, c0 : c0 + rw] = FREE
    if len(rooms) < 2:
        return None

    # chain rooms by centre order of placement; each corridor keeps the region connected
    centres = [(r + rh // 2, c + rw // 2) for r, c, rh, rw in rooms]
    half = p.corridor_width // 2
    lo_r, hi_r = 1, h - 2
    lo_c, hi_c = 1, w - 2
    for (ra, ca), (rb, cb) in zip(centres[:-1], centres[1:]):
        if rng.random() < 0.5:
            bends = [(ra, ca, ra, cb), (ra, cb, rb, cb)]
        else:
            bends = [(ra, ca, rb, ca), (rb, ca, rb, cb)]
        for r1, c1, r2, c2 in bends:
            rs, re = sorted((r1, r2))
            cs, ce = sorted((c1, c2))
            top = max(lo_r, rs - half)
            left = max(lo_c, cs - half)
            bottom = min(hi_r, re - half + p.corridor_width - 1)
            right = min(hi_c, ce - half + p.corridor_width - 1)
            cells[top : bottom + 1, left : right + 1] = FREE
    cells[0, :] = OCCUPIED
    cells[-1, :] = OCCUPIED
    cells[:, 0] = OCCUPIED
    cells[:, -1] = OCCUPIED
    return cells


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def flood_fill(free: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """4-connected component of ``free`` containing ``start`` as a bool mask."""
    if not free[start]:
        return np.zeros_like(free, dtype=bool)
    labels, _ = ndimage.label(free, structure=_FOUR)
    return labels == labels[start]


def is_connected(cells: np.ndarray) -> bool:
    free = cells == FREE
    idx = np.argwhere(free)
    if idx.size == 0:
        return False
    return int(flood_fill(free, tuple(idx[0])).sum()) == int(free.sum())


# ----------------------------------------------------------------- text I/O


def save_map(truth: GroundTruthMap, path) -> None:
    lines = [f"{truth.width} {truth.height} {float(truth.cell_size)!r}"]
    for row in truth.cells:
        lines.append("".join("#" if v == OCCUPIED else "." for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_map(path) -> GroundTruthMap:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise MapError(f"{path}: empty map file")
    try:
        w_s, h_s, cs_s = lines[0].split()
        w, h, cs = int(w_s), int(h_s), float(cs_s)
    except ValueError:
        raise MapError(f"{path}: header must be 'W H cell_size', got {lines[0]!r}") from None
    rows = lines[1:]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise MapError(f"{path}: body does not match header {w}x{h}")
    cells = np.empty((h, w), dtype=np.int8)
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == "#":
                cells[i, j] = OCCUPIED
            elif ch == ".":
                cells[i, j] = FREE
            else:
                raise MapError(f"{path}: unexpected character {ch!r} at row {i}")
    return GroundTruthMap(cells, cs)


def parse_map(text: str, cell_size: float = 1.0) -> GroundTruthMap:
    """Build a map from '#'/'.' rows (no header); handy for fixtures."""
    rows = [r.strip() for r in text.strip().splitlines() if r.strip()]
    cells = np.array([[OCCUPIED if ch == "#" else FREE for ch in r] for r in rows], dtype=np.int8)
    return GroundTruthMap(cells, cell_size)


# ------------------------------------------------------------------ sensing


def sense(truth: GroundTruthMap, belief: BeliefMap, pose, sensor_range: float) -> BeliefMap:
    """Ray-cast from ``pose`` (metres) and reveal every visible cell in range.

    Updates ``belief`` in place and returns it.
    """
    r, c = cell_of(pose, truth.cell_size)
    if not (0 <= r < truth.height and 0 <= c < truth.width) or truth.cells[r, c] != FREE:
        raise MapError(f"cannot sense from non-free pose {pose}")
    _grid.sense_into(truth.cells, belief.cells, r, c, float(sensor_range) / truth.cell_size + 1e-9)
    return belief


def frontiers(belief: BeliefMap) -> set[tuple[int, int]]:
    """Free cells with at least one unknown 4-neighbour."""
    return {(int(r), int(c)) for r, c in frontier_cells(belief.cells)}


def frontier_cells(cells: np.ndarray) -> np.ndarray:
    unknown = cells == UNKNOWN
    near = np.zeros_like(unknown)
    near[1:, :] |= unknown[:-1, :]
    near[:-1, :] |= unknown[1:, :]
    near[:, 1:] |= unknown[:, :-1]
    near[:, :-1] |= unknown[:, 1:]
    return np.argwhere((cells == FREE) & near)


def is_complete(belief: BeliefMap, truth: GroundTruthMap | None = None, robot=None) -> bool:
    """No frontier cell lies in the robot's free component.

    Without a robot position, any remaining frontier counts as reachable.
    ``truth`` is accepted for signature symmetry and not consulted.
    """
    front = frontier_cells(belief.cells)
    if front.size == 0:
        return True
    if robot is None:
        return False
    comp = flood_fill(belief.cells == FREE, cell_of(robot, belief.cell_size))
    return not bool(comp[front[:, 0], front[:, 1]].any())


# ----------------------------------------------------------------- dynamics


@dataclass
class RobotState:
    position: tuple[float, float]
    visited: set = field(default_factory=set)
    traveled: float = 0.0
    step_index: int = 0


@dataclass
class EpisodeOutcome:
    rewards: list = field(default_factory=list)
    traveled: float = 0.0
    completed: bool = False
    steps: int = 0
    failed: bool = False


@dataclass
class StepRecord:
    step: int
    x: float
    y: float
    reward: float
    new_frontiers: int
    traveled: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


def reward(new_frontiers: int, distance: float, completed: bool) -> float:
    return FRONTIER_SCALE * new_frontiers - DISTANCE_SCALE * distance + (FINISH_REWARD if completed else 0.0)


class World:
    """One episode on a fixed ground-truth map, driven by a single caller."""

    def __init__(self, truth: GroundTruthMap, start, sensor_range: float = 16.0, max_steps: int = EPISODE_CAP):
        self.truth = truth
        self.sensor_range = float(sensor_range)
        self.max_steps = int(max_steps)
        self.belief = BeliefMap.unknown_like(truth)
        start = tuple(float(v) for v in start)
        sense(truth, self.belief, start, self.sensor_range)
        self.state = RobotState(start, {cell_of(start, truth.cell_size)})
        self.outcome = EpisodeOutcome()
        self.records: list[StepRecord] = []
        self._frontiers = frontiers(self.belief)
        self.done = self.complete()
        self.outcome.completed = self.done

    @classmethod
    def from_seed(cls, seed: int, params: DungeonParams | None = None, **kw) -> "World":
        truth = generate_dungeon(seed, params)
        return cls(truth, random_start(truth, seed), **kw)

    def complete(self) -> bool:
        return is_complete(self.belief, self.truth, self.state.position)

    def step(self, target) -> tuple[RobotState, float, bool]:
        if self.done:
            raise RuntimeError("episode already finished")
        target = (float(target[0]), float(target[1]))
        r, c = cell_of(target, self.truth.cell_size)
        if not (0 <= r < self.belief.height and 0 <= c < self.belief.width) or self.belief.cells[r, c] != FREE:
            raise MapError(f"target {target} is not a known free cell")
        dist = math.dist(self.state.position, target)
        sense(self.truth, self.belief, target, self.sensor_range)
        now = frontiers(self.belief)
        fresh = len(now - self._frontiers)
        self._frontiers = now

        st = self.state
        st.position = target
        st.visited.add((r, c))
        st.traveled += dist
        st.step_index += 1
        completed = self.complete()
        rew = reward(fresh, dist, completed)
        self.done = completed or st.step_index >= self.max_steps

        out = self.outcome
        out.rewards.append(rew)
        out.traveled = st.traveled
        out.steps = st.step_index
        out.completed = completed
        self.records.append(StepRecord(st.step_index, target[0], target[1], rew, fresh, st.traveled))
        return st, rew, self.done

    def fail(self) -> None:
        """Abort the episode (e.g. the robot node has no usable edge)."""
        self.done = True
        self.outcome.failed = True


def random_start(truth: GroundTruthMap, seed: int, resolution: int = 4) -> tuple[float, float]:
    """A free lattice cell picked by ``seed``; any free cell if the lattice misses."""
    free = truth.free_mask()
    off = resolution // 2
    lattice = np.zeros_like(free)
    lattice[off::resolution, off::resolution] = True
    pool = np.argwhere(free & lattice)
    if pool.size == 0:
        pool = np.argwhere(free)
    rng = np.random.default_rng([int(seed), 0x5EED])
    r, c = pool[int(rng.integers(len(pool)))]
    return center_of((int(r), int(c)), truth.cell_size)
