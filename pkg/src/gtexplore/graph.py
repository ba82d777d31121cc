"""Collision-free informative graph over the known free space of a belief map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _grid
from .world import FREE, BeliefMap, cell_of, center_of, frontier_cells


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    resolution: int = 4  # lattice spacing in cells
    k: int = 25
    sensor_range: float = 16.0  # metres


@dataclass(frozen=True)
class NodeFeature:
    x: float
    y: float
    utility: int
    guidepost: int


@dataclass
class BeliefGraph:
    coords: np.ndarray  # (N, 2) metres, x then y
    cells: np.ndarray  # (N, 2) row, col
    utility: np.ndarray  # (N,) int
    guidepost: np.ndarray  # (N,) 0/1
    connected: np.ndarray  # (N, N) bool, symmetric, False on the diagonal
    current_index: int
    k: int

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def nodes(self) -> list[NodeFeature]:
        return [
            NodeFeature(float(x), float(y), int(u), int(g))
            for (x, y), u, g in zip(self.coords, self.utility, self.guidepost)
        ]

    @property
    def adjacency(self) -> np.ndarray:
        """Adjacency in the 0 = connected convention; the diagonal reads 0."""
        a = np.where(self.connected, 0, 1).astype(np.int8)
        np.fill_diagonal(a, 0)
        return a

    def edges(self) -> np.ndarray:
        """Undirected edges as an (E, 2) array with i < j, sorted."""
        i, j = np.nonzero(np.triu(self.connected, 1))
        return np.stack([i, j], axis=1)

    def neighbors(self, i: int) -> np.ndarray:
        return neighbors(self, i)


def extract_graph(
    belief: BeliefMap,
    visited,
    robot,
    cfg: GraphConfig | None = None,
) -> BeliefGraph:
    """One node per lattice block with known free cells, plus the robot node.

    A block's node sits on its lattice point when that cell is free, otherwise
    on the block's free cell closest to the lattice point. Each node ranks the
    nodes it can reach by a straight segment over free cells and proposes its
    k nearest. A shortest-first spanning forest over clear segments is laid
    down first, then proposals are admitted shortest first; no node ever
    exceeds k edges.
    """
    cfg = cfg or GraphConfig()
    cells = belief.cells
    cs = belief.cell_size
    res = int(cfg.resolution)
    free = cells == FREE
    if not free.any():
        raise GraphError("belief has no free cells")
    rr, rc = cell_of(robot, cs)
    if not (0 <= rr < belief.height and 0 <= rc < belief.width) or not free[rr, rc]:
        raise GraphError(f"robot at {robot} is not in a free cell")

    node_rc = _grid.lattice_nodes(np.ascontiguousarray(free), int(res))

    centres = (node_rc[:, ::-1] + 0.5) * cs
    d_robot = np.hypot(centres[:, 0] - (rc + 0.5) * cs, centres[:, 1] - (rr + 0.5) * cs)
    nearest = int(np.argmin(d_robot))
    if d_robot[nearest] <= 0.5 * res * cs + 1e-9:
        current = nearest
    else:
        node_rc = np.vstack([node_rc, [[rr, rc]]])
        current = len(node_rc) - 1
    coords = (node_rc[:, ::-1] + 0.5) * cs

    front = frontier_cells(cells)
    radius = cfg.sensor_range / cs + 1e-9
    if len(front):
        utility = _grid.visible_counts(cells, node_rc, front.astype(np.int64), radius)
    else:
        utility = np.zeros(len(node_rc), dtype=np.int64)

    guidepost = np.zeros(len(node_rc), dtype=np.int64)
    if visited:
        vis = np.array([center_of(v, cs) for v in visited])
        dv = np.hypot(coords[:, None, 0] - vis[None, :, 0], coords[:, None, 1] - vis[None, :, 1])
        guidepost = (dv.min(axis=1) <= 0.5 * res * cs + 1e-9).astype(np.int64)

    connected = _knn_edges(belief.cells, node_rc, cfg.k)
    return BeliefGraph(coords, node_rc, utility, guidepost, connected, current, cfg.k)


def _knn_edges(cells: np.ndarray, node_rc: np.ndarray, k: int) -> np.ndarray:
    n = len(node_rc)
    if n < 2 or k < 1:
        return np.zeros((n, n), dtype=bool)
    # collision check first so every node ranks only the candidates it can reach
    pairs = np.argwhere(np.triu(np.ones((n, n), dtype=bool), 1))
    pairs = pairs[_grid.pairs_clear(cells, node_rc, pairs)]
    if len(pairs) == 0:
        return np.zeros((n, n), dtype=bool)
    # exact squared cell distances so equal-distance ties fall to the lower index
    d2 = ((node_rc[pairs[:, 0]] - node_rc[pairs[:, 1]]) ** 2).sum(axis=1)
    dist = np.full((n, n), np.iinfo(np.int64).max)
    dist[pairs[:, 0], pairs[:, 1]] = d2
    dist[pairs[:, 1], pairs[:, 0]] = d2
    order = np.argsort(dist, axis=1, kind="stable")[:, : min(k, n - 1)]
    picked = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), order.shape[1])
    cols = order.reshape(-1)
    valid = dist[rows, cols] < np.iinfo(np.int64).max
    picked[rows[valid], cols[valid]] = True
    picked |= picked.T

    # shortest first, never above k per node; a spanning backbone goes in before the
    # k-nearest fill-in so the fill-in cannot strand a room
    rank = np.lexsort((pairs[:, 1], pairs[:, 0], d2))
    return _grid.capped_edges(n, np.ascontiguousarray(pairs[rank]), picked, k)


def neighbors(graph: BeliefGraph, i: int) -> np.ndarray:
    """Connected neighbours of ``i`` in ascending index order (the action order)."""
    if not 0 <= i < len(graph):
        raise IndexError(f"node {i} out of range for {len(graph)} nodes")
    return np.flatnonzero(graph.connected[i])


def normalize(graph: BeliefGraph, extent) -> np.ndarray:
    """Node features ``[x, y, u, g]`` scaled to [0, 1]; ``extent`` is (width_m, height_m)."""
    if len(graph) == 0:
        raise GraphError("empty graph")
    wm, hm = extent
    u = graph.utility.astype(np.float64)
    top = u.max()
    feats = np.empty((len(graph), 4))
    feats[:, 0] = graph.coords[:, 0] / wm
    feats[:, 1] = graph.coords[:, 1] / hm
    feats[:, 2] = u / top if top > 0 else 0.0
    feats[:, 3] = graph.guidepost
    return feats


def dump_graph(graph: BeliefGraph, path) -> None:
    lines = [f"{len(graph)} {graph.k} {graph.current_index}"]
    for (x, y), u, g in zip(graph.coords, graph.utility, graph.guidepost):
        lines.append(f"{float(x)!r} {float(y)!r} {int(u)} {int(g)}")
    for i, j in graph.edges():
        lines.append(f"{i} {j}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path, cell_size: float) -> BeliefGraph:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    n, k, cur = (int(v) for v in lines[0])
    rows = lines[1 : 1 + n]
    coords = np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(n, 2)
    utility = np.array([int(r[2]) for r in rows], dtype=np.int64)
    guidepost = np.array([int(r[3]) for r in rows], dtype=np.int64)
    connected = np.zeros((n, n), dtype=bool)
    for i, j in lines[1 + n :]:
        connected[int(i), int(j)] = connected[int(j), int(i)] = True
    cells = np.floor(coords[:, ::-1] / cell_size).astype(np.int64)
    return BeliefGraph(coords, cells, utility, guidepost, connected, cur, k)
