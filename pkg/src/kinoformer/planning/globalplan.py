"""Traversability costmaps and 8-connected Dijkstra search."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from ..terrainsim import ElevationMap

NEIGHBOURS = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0))


def traversability_costmap(m: ElevationMap, k_grad: float = 10.0, max_grad: float = 1.0) -> np.ndarray:
    """Cell cost 1 + k_grad * |grad h|; cells steeper than ``max_grad`` are impassable (inf)."""
    gy, gx = np.gradient(m.heights, m.resolution)
    g = np.hypot(gx, gy)
    return np.where(g > max_grad, np.inf, 1.0 + k_grad * g)


@dataclass(frozen=True)
class PathResult:
    path: list
    cost: float

    @property
    def found(self) -> bool:
        return bool(self.path)


def edge_cost(costmap: np.ndarray, a: tuple, b: tuple) -> float:
    step = math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)
    return step * 0.5 * (costmap[a] + costmap[b])


def dijkstra_plan(costmap: np.ndarray, start: tuple, goal: tuple) -> PathResult:
    """Minimum-cost 8-connected path; unreachable goals give an empty path and infinite cost."""
    costmap = np.asarray(costmap, dtype=np.float64)
    rows, cols = costmap.shape
    start, goal = tuple(int(v) for v in start), tuple(int(v) for v in goal)
    for name, c in (("start", start), ("goal", goal)):
        if not (0 <= c[0] < rows and 0 <= c[1] < cols):
            raise ValueError(f"{name} cell {c} outside the {rows}x{cols} map")
        if not np.isfinite(costmap[c]):
            raise ValueError(f"{name} cell {c} is impassable")
    dist = {start: 0.0}
    prev = {}
    done = set()
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        if u == goal:
            break
        for dr, dc in NEIGHBOURS:
            v = (u[0] + dr, u[1] + dc)
            if not (0 <= v[0] < rows and 0 <= v[1] < cols) or v in done or not np.isfinite(costmap[v]):
                continue
            nd = d + edge_cost(costmap, u, v)
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    if goal not in done:
        return PathResult([], math.inf)
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return PathResult(path[::-1], dist[goal])


def path_cost(costmap: np.ndarray, path) -> float:
    return float(sum(edge_cost(costmap, tuple(a), tuple(b)) for a, b in zip(path[:-1], path[1:])))
