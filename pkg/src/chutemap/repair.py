"""Nearest-valid-mapping repair as an exact min-cost flow.

The repair problem (each chute gets exactly one destination, destination j
gets between 1 and floor(U_j) chutes, minimise the number of chutes whose
destination changes) has a totally unimodular constraint matrix, so the
min-cost flow optimum below is the exact integer optimum.

Network::

    source -> chute i              cap 1, cost 0
    chute i -> dest(orig_i)        cap 1, cost 0   (keep the current destination)
    chute i -> hub                 cap 1, cost 1   (reassign)
    hub -> dest j                  cap M, cost 0
    dest j -> sink                 cap 1, cost -B  (lower bound of one chute)
    dest j -> sink                 cap floor(U_j) - 1, cost 0

With B > M every max flow of minimum cost saturates all lower-bound arcs
whenever a feasible mapping exists.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .taskmap import DestinationProfile, TaskMapping

DEFAULT_DELTA = 1.5


class InfeasibleBoundsError(ValueError):
    pass


class MinCostFlow:
    """Primal-dual min-cost flow with integer costs.

    Each phase runs Dijkstra on reduced costs, then pushes a blocking flow
    over the zero-reduced-cost arcs. Handles negative arc costs as long as
    the initial residual graph has no negative cycle.
    """

    def __init__(self, n: int):
        self.n = n
        self.head: list[list[int]] = [[] for _ in range(n)]
        self.to: list[int] = []
        self.cap: list[int] = []
        self.cost: list[int] = []

    def add_edge(self, u: int, v: int, cap: int, cost: int) -> int:
        eid = len(self.to)
        self.to += [v, u]
        self.cap += [cap, 0]
        self.cost += [cost, -cost]
        self.head[u].append(eid)
        self.head[v].append(eid + 1)
        return eid

    def flow_on(self, eid: int) -> int:
        return self.cap[eid ^ 1]

    def _initial_potential(self, s: int) -> list[int]:
        # Bellman-Ford (queue based); unreachable nodes keep 0.
        inf = math.inf
        dist = [inf] * self.n
        dist[s] = 0
        queue = deque([s])
        inq = [False] * self.n
        inq[s] = True
        while queue:
            u = queue.popleft()
            inq[u] = False
            du = dist[u]
            for e in self.head[u]:
                if self.cap[e] > 0:
                    v = self.to[e]
                    nd = du + self.cost[e]
                    if nd < dist[v]:
                        dist[v] = nd
                        if not inq[v]:
                            inq[v] = True
                            queue.append(v)
        return [0 if d == inf else int(d) for d in dist]

    def solve(self, s: int, t: int, max_flow: int | None = None) -> tuple[int, int]:
        limit = math.inf if max_flow is None else max_flow
        h = self._initial_potential(s)
        flow = 0
        total_cost = 0
        to, cap, cost, head = self.to, self.cap, self.cost, self.head
        while flow < limit:
            dist = [math.inf] * self.n
            dist[s] = 0
            done = [False] * self.n
            heap = [(0, s)]
            while heap:
                d, u = heapq.heappop(heap)
                if done[u]:
                    continue
                done[u] = True
                if u == t:
                    break
                hu = h[u]
                for e in head[u]:
                    if cap[e] > 0:
                        v = to[e]
                        nd = d + cost[e] + hu - h[v]
                        if nd < dist[v]:
                            dist[v] = nd
                            heapq.heappush(heap, (nd, v))
            if not done[t]:
                break
            dt = dist[t]
            for v in range(self.n):
                h[v] += dist[v] if dist[v] < dt and done[v] else dt
            # blocking flows over admissible (zero reduced cost) arcs
            while flow < limit:
                level = self._levels(s, t, h)
                if level[t] < 0:
                    break
                it = [0] * self.n
                pushed_any = False
                while flow < limit:
                    got = self._dfs(s, t, limit - flow, level, it, h)
                    if not got:
                        break
                    pushed_any = True
                    flow += got
                    total_cost += got * (h[t] - h[s])
                if not pushed_any:
                    break
        return flow, total_cost

    def _admissible(self, e: int, u: int, h: list[int]) -> bool:
        return self.cap[e] > 0 and self.cost[e] + h[u] - h[self.to[e]] == 0

    def _levels(self, s: int, t: int, h: list[int]) -> list[int]:
        level = [-1] * self.n
        level[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for e in self.head[u]:
                v = self.to[e]
                if level[v] < 0 and self._admissible(e, u, h):
                    level[v] = level[u] + 1
                    queue.append(v)
        return level

    def _dfs(self, s: int, t: int, limit, level: list[int], it: list[int], h: list[int]) -> int:
        # iterative DFS along the level graph; returns the amount pushed
        path: list[int] = []
        u = s
        while True:
            if u == t:
                amount = min([limit] + [self.cap[e] for e in path])
                for e in path:
                    self.cap[e] -= amount
                    self.cap[e ^ 1] += amount
                return amount
            edges = self.head[u]
            advanced = False
            while it[u] < len(edges):
                e = edges[it[u]]
                v = self.to[e]
                if level[v] == level[u] + 1 and self._admissible(e, u, h):
                    path.append(e)
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                if u == s:
                    return 0
                level[u] = -1  # dead end
                e = path.pop()
                u = self.to[e ^ 1]
                it[u] += 1


def compute_upper_bounds(volumes, n_chutes: int, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Real-valued per-destination chute caps ``max(1, delta * M * v_j / sum(v))``."""
    v = np.asarray(volumes, dtype=float)
    if np.any(v < 0) or v.sum() <= 0:
        raise ValueError("volumes must be non-negative with a positive total")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return np.maximum(1.0, delta * n_chutes * v / v.sum())


def integer_bounds(upper: np.ndarray, n_chutes: int) -> np.ndarray:
    bounds = np.floor(np.asarray(upper, dtype=float) + 1e-9).astype(np.int64)
    if len(bounds) > n_chutes:
        raise InfeasibleBoundsError(f"{len(bounds)} destinations cannot each get a chute with only {n_chutes} chutes")
    if bounds.sum() < n_chutes:
        raise InfeasibleBoundsError(
            f"sum of integer upper bounds {int(bounds.sum())} < {n_chutes} chutes; increase delta"
        )
    return bounds


@dataclass(frozen=True)
class RepairReport:
    changed: int
    counts_before: np.ndarray
    counts_after: np.ndarray


def repair_assignment(assignment, bounds) -> tuple[np.ndarray, int]:
    """Closest assignment (fewest changed chutes) meeting ``1 <= count_j <= bounds[j]``.

    ``assignment`` entries outside ``0..len(bounds)-1`` count as unassigned.
    Returns the repaired assignment and the number of changed chutes.
    """
    orig = np.asarray(assignment, dtype=np.int64)
    bounds = np.asarray(bounds, dtype=np.int64)
    m, k = len(orig), len(bounds)
    integer_bounds(bounds, m)  # feasibility check

    counts = np.bincount(orig[(orig >= 0) & (orig < k)], minlength=k)
    if np.all(orig >= 0) and np.all(orig < k) and np.all(counts >= 1) and np.all(counts <= bounds):
        return orig.copy(), 0

    src, hub, sink = 0, m + 1, m + 2 + k
    dest0 = m + 2
    net = MinCostFlow(m + k + 3)
    keep_arcs = []
    move_arcs = []
    for i in range(m):
        net.add_edge(src, 1 + i, 1, 0)
        j = orig[i]
        keep_arcs.append(net.add_edge(1 + i, dest0 + j, 1, 0) if 0 <= j < k else -1)
        move_arcs.append(net.add_edge(1 + i, hub, 1, 1))
    hub_arcs = [net.add_edge(hub, dest0 + j, m, 0) for j in range(k)]
    big = m + 1
    for j in range(k):
        net.add_edge(dest0 + j, sink, 1, -big)
        if bounds[j] > 1:
            net.add_edge(dest0 + j, sink, int(bounds[j]) - 1, 0)
    flow, _ = net.solve(src, sink, m)
    if flow != m:
        raise InfeasibleBoundsError("no feasible assignment under the given bounds")

    # Chutes sharing an original destination are interchangeable, so only the
    # number leaving each group matters. Canonical choice: the lowest chute ids
    # leave, and movers fill destinations in ascending id order.
    leaving = np.zeros(k + 1, dtype=np.int64)  # slot k collects unassigned chutes
    for i in range(m):
        if net.flow_on(move_arcs[i]):
            leaving[orig[i] if 0 <= orig[i] < k else k] += 1
    moved = []
    for i in range(m):
        g = orig[i] if 0 <= orig[i] < k else k
        if leaving[g] > 0:
            moved.append(i)
            leaving[g] -= 1
    slots = []
    for j in range(k):
        slots += [j] * net.flow_on(hub_arcs[j])
    out = orig.copy()
    for i, j in zip(moved, slots):
        out[i] = j
    changed = int(np.sum(out != orig))
    return out, changed


def repair(m: TaskMapping, bounds) -> TaskMapping:
    """Nearest valid mapping to ``m`` under integer per-destination caps ``bounds``."""
    fixed, _ = repair_assignment(m.assignment, bounds)
    return TaskMapping(fixed, m.n_dest)


def repair_with_report(m: TaskMapping, bounds) -> tuple[TaskMapping, RepairReport]:
    fixed, changed = repair_assignment(m.assignment, bounds)
    out = TaskMapping(fixed, m.n_dest)
    k = m.n_dest + 1
    before = np.bincount(m.assignment[(m.assignment >= 0) & (m.assignment < k)], minlength=k)
    return out, RepairReport(changed, before, out.counts())


def profile_bounds(profile: DestinationProfile, n_chutes: int, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Integer caps for all ``N + 1`` destinations (recirculation included)."""
    return integer_bounds(compute_upper_bounds(profile.all_volumes, n_chutes, delta), n_chutes)
