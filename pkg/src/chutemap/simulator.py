"""Timestep simulation of a robotic sorting floor.

Robots shuttle packages from workstations to endpoints beside the chutes of
the package's destination, coordinated by PIBT and a greedy target-assignment
(TA) rule. Chutes close after ``capacity`` drops for a stochastic period that
grows with how scattered the destination's chutes are. When every chute of a
destination is closed, packages go to a recirculation chute and return to the
workstation queue.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernel as K
from .floorplan import CellKind, Floorplan, distance_table
from .taskmap import DestinationProfile, TaskMapping, centroid_distance, validate

EVENT_NAMES = {
    K.EV_PICKUP: "pickup",
    K.EV_DROP_SORTED: "drop_sorted",
    K.EV_DROP_RECIRC: "drop_recirc",
    K.EV_CLOSE: "close",
    K.EV_REOPEN: "reopen",
    K.EV_RETARGET: "retarget",
}


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_agents: int = 100
    horizon: int = 5000
    alpha: float = 8.0
    capacity: int = 50
    beta: float = 100.0
    s_quadratic: float = 2.0
    s_constant: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 0 or self.horizon < 1:
            raise ValueError("need n_agents >= 0 and horizon >= 1")
        if self.capacity < 1 or self.alpha < 0 or self.beta < 0:
            raise ValueError("capacity must be >= 1; alpha and beta non-negative")


@dataclass
class SimResult:
    throughput: float
    recirculation_rate: float
    sorted_count: int
    recirculated_count: int
    closures: int
    collision_count: int
    seed: int
    horizon: int
    n_agents: int
    chute_drops: np.ndarray = field(repr=False)
    events: np.ndarray | None = field(default=None, repr=False)
    positions: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput,
            "recirculation_rate": self.recirculation_rate,
            "sorted": self.sorted_count,
            "recirculated": self.recirculated_count,
            "closures": self.closures,
            "collisions": self.collision_count,
            "seed": self.seed,
            "N_T": self.horizon,
            "N_a": self.n_agents,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def metrics(sorted_count: int, recirculated_count: int, horizon: int) -> tuple[float, float]:
    """(throughput, recirculation rate); the rate is 0 when nothing was dropped."""
    total = sorted_count + recirculated_count
    return sorted_count / horizon, (recirculated_count / total if total else 0.0)


def closed_duration(x_c: float, cfg: SimConfig, rng=None, eps: float | None = None) -> int:
    """CLOSED period ``floor(s_quadratic * x_c**2 + s_constant + eps)``, ``eps ~ Exp(mean=beta)``.

    Pass ``eps`` to force the exponential term; otherwise ``rng`` (anything
    with ``random()``) supplies it.
    """
    if x_c < 0:
        raise ValueError("centroid distance must be non-negative")
    if eps is None:
        eps = -cfg.beta * math.log(1.0 - rng.random()) if cfg.beta > 0 else 0.0
    return int(K.closed_time(float(x_c), cfg.s_quadratic, cfg.s_constant, float(eps)))


@dataclass
class ChuteState:
    chute: int
    is_recirc: bool
    x_c: float
    open: bool = True
    fill_count: int = 0
    reopen_at: int = 0


def on_drop(state: ChuteState, now: int, cfg: SimConfig, rng=None, eps: float | None = None) -> str:
    """Apply one drop to ``state``; returns ``"sorted"`` or ``"recirculated"``."""
    if not state.open:
        raise SimulationError(f"drop into CLOSED chute {state.chute} at t={now}")
    if state.is_recirc:
        return "recirculated"
    state.fill_count += 1
    if state.fill_count >= cfg.capacity:
        state.open = False
        state.fill_count = 0
        state.reopen_at = now + closed_duration(state.x_c, cfg, rng, eps)
    return "sorted"


def tick(state: ChuteState, now: int) -> None:
    """Reopen a CLOSED chute once ``now`` reaches its reopen time."""
    if not state.open and state.reopen_at <= now:
        state.open = True


# ---------------------------------------------------------------------------
# static floor data shared by every run on the same map


class FloorIndex:
    """Flat-index view of a floorplan with a target distance table."""

    def __init__(self, fp: Floorplan):
        self.fp = fp
        w = fp.width
        self.n_cells = fp.height * w
        mask = fp.traversable_mask
        nb = np.full((self.n_cells, 4), -1, dtype=np.int64)
        for r in range(fp.height):
            for c in range(w):
                if not mask[r, c]:
                    continue
                for q, (nr, nc) in enumerate(((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))):
                    if 0 <= nr < fp.height and 0 <= nc < w and mask[nr, nc]:
                        nb[r * w + c, q] = nr * w + nc
        self.neighbors = nb
        self.targets = list(fp.workstations) + list(fp.endpoints)
        self.n_ws = len(fp.workstations)
        self.target_cell = np.array([r * w + c for r, c in self.targets], dtype=np.int64)
        self.target_of = {cell: k for k, cell in enumerate(self.targets)}
        self.dist = distance_table(fp, self.targets).astype(np.int64)
        ptr = [0]
        eps: list[int] = []
        for adj in fp.chute_adjacency:
            eps += [self.target_of[e] for e in adj]
            ptr.append(len(eps))
        self.ep_ptr = np.array(ptr, dtype=np.int64)
        self.ep_targets = np.array(eps, dtype=np.int64)
        start = (mask & (fp.cells != CellKind.ENDPOINT)).ravel()
        self.start_cells = np.flatnonzero(start).astype(np.int64)

    def flat(self, cell) -> int:
        return cell[0] * self.fp.width + cell[1]

    def cell(self, flat: int) -> tuple[int, int]:
        return divmod(int(flat), self.fp.width)


@lru_cache(maxsize=8)
def floor_index(fp: Floorplan) -> FloorIndex:
    return FloorIndex(fp)


def mapping_arrays(m: TaskMapping, fp: Floorplan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dest_ptr, dest_chutes, chute centroid distance) for the kernel."""
    order = np.argsort(m.assignment, kind="stable")
    counts = m.counts()
    ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    xc_dest = np.array([centroid_distance(m.chutes_of(d), fp) if counts[d] else 0.0 for d in range(m.n_dest + 1)])
    return ptr, order.astype(np.int64), xc_dest[m.assignment]


def run(fp: Floorplan, m: TaskMapping, profile: DestinationProfile, cfg: SimConfig, log: bool = False) -> SimResult:
    """Simulate ``cfg.horizon`` timesteps and report throughput metrics."""
    problems = validate(m, fp.n_chutes, profile.n_dest)
    if problems:
        raise SimulationError("invalid task mapping: " + "; ".join(problems))
    idx = floor_index(fp)
    if cfg.n_agents > len(idx.start_cells):
        raise SimulationError(f"{cfg.n_agents} robots exceed {len(idx.start_cells)} free start cells")
    dest_ptr, dest_chutes, xc = mapping_arrays(m, fp)
    out = K.simulate(
        idx.neighbors, idx.dist, idx.target_cell, idx.n_ws, idx.ep_ptr, idx.ep_targets,
        dest_ptr, dest_chutes, m.assignment.astype(np.int64), xc, profile.cumulative.astype(np.float64),
        idx.start_cells, cfg.n_agents, cfg.horizon, float(cfg.alpha), cfg.capacity, float(cfg.beta),
        float(cfg.s_quadratic), float(cfg.s_constant), _kernel_seed(cfg.seed), log,
    )
    sorted_count, recirc_count, closures, conflicts, drops, events, positions = out
    thr, rate = metrics(int(sorted_count), int(recirc_count), cfg.horizon)
    return SimResult(
        throughput=thr,
        recirculation_rate=rate,
        sorted_count=int(sorted_count),
        recirculated_count=int(recirc_count),
        closures=int(closures),
        collision_count=int(conflicts),
        seed=cfg.seed,
        horizon=cfg.horizon,
        n_agents=cfg.n_agents,
        chute_drops=drops,
        events=events if log else None,
        positions=positions if log else None,
    )


def _kernel_seed(seed: int) -> int:
    # numba's np.random.seed takes a uint32
    return int(np.random.SeedSequence(int(seed)).generate_state(1)[0])


def event_log_lines(result: SimResult, fp: Floorplan) -> list[str]:
    """Line-delimited event records: ``t robot event row col [chute]``.

    Movement records (``move``/``wait``) come from the position log; pickups,
    drops and chute closures from the kernel's event table.
    """
    if result.events is None or result.positions is None:
        raise SimulationError("run with log=True to export events")
    w = fp.width
    lines = []
    pos = result.positions
    for t in range(result.horizon):
        for i in range(result.n_agents):
            a, b = pos[t, i], pos[t + 1, i]
            kind = "wait" if a == b else "move"
            lines.append(f"{t} {i} {kind} {b // w} {b % w}")
    for t, robot, kind, cell, chute in result.events:
        name = EVENT_NAMES[int(kind)]
        if name in ("close", "reopen"):
            lines.append(f"{t} -1 {name} - - {chute}")
        else:
            lines.append(f"{t} {robot} {name} {cell // w} {cell % w} {chute}")
    return lines


# ---------------------------------------------------------------------------
# single-decision helpers, sharing the kernel's rules


def ta_select(current, targets, en_route, alpha: float, dist) -> tuple[int, int]:
    """Target minimising ``dist(current, g) + alpha * en_route[g]``.

    ``targets`` is a sequence of cells, ``en_route`` a parallel sequence of
    robot counts and ``dist(a, b)`` a path-length callable. Ties go to the
    shorter path, then to the row-major smaller cell.
    """
    if not targets:
        raise ValueError("empty target set")
    best = None
    for g, n_r in zip(targets, en_route):
        d = dist(current, g)
        key = (d + alpha * n_r, d, tuple(g))
        if best is None or key < best[0]:
            best = (key, g)
    return best[1]


def assign_drop_target(cell, dest: int, m: TaskMapping, closed, fp: Floorplan, en_route=None,
                       alpha: float = 8.0) -> tuple[tuple[int, int], int]:
    """(endpoint cell, chute) chosen for a package of ``dest`` picked up at ``cell``.

    ``closed`` is a per-chute boolean sequence and ``en_route`` an optional
    mapping from endpoint cell to robot count.
    """
    idx = floor_index(fp)
    counts = np.zeros(len(idx.targets), dtype=np.int64)
    for c, n in (en_route or {}).items():
        counts[idx.target_of[tuple(c)]] = n
    dest_ptr, dest_chutes, _ = mapping_arrays(m, fp)
    g, c = K.pick_drop(idx.flat(cell), dest, m.recirc, dest_ptr, dest_chutes, idx.ep_ptr, idx.ep_targets,
                       np.asarray(closed, dtype=np.bool_), counts, float(alpha), idx.dist, idx.target_cell)
    return idx.targets[g], int(c)


def pibt_step(fp: Floorplan, positions, goals, priorities=None, seed: int = 0) -> list[tuple[int, int]]:
    """One collision-free PIBT joint move for robots at ``positions`` heading to ``goals``."""
    idx = floor_index(fp)
    n = len(positions)
    pos = np.array([idx.flat(p) for p in positions], dtype=np.int64)
    if len(set(pos.tolist())) != n:
        raise SimulationError("robots must occupy distinct cells")
    goal_cells = [tuple(g) for g in goals]
    uniq = sorted(set(goal_cells))
    table = distance_table(fp, uniq).astype(np.int64)
    goal = np.array([uniq.index(g) for g in goal_cells], dtype=np.int64)
    prio = np.asarray(priorities if priorities is not None else np.arange(n)[::-1] / max(n, 1), dtype=np.float64)
    occ_now = np.full(idx.n_cells, -1, dtype=np.int64)
    occ_now[pos] = np.arange(n)
    occ_next = np.full(idx.n_cells, -1, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    K.seed_rng(_kernel_seed(seed))
    K.plan_step(pos, goal, prio, table, idx.neighbors, occ_now, occ_next, nxt)
    return [idx.cell(v) for v in nxt]
