"""Task-mapping search: greedy initializers, (1+lambda) EA and MAP-Elites.

Every candidate gets its randomness up front (mutation stream and simulation
seeds are derived from ``(seed, candidate counter)``), so results do not
depend on how evaluations are spread over worker processes.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .floorplan import Floorplan
from .repair import DEFAULT_DELTA, profile_bounds, repair
from .simulator import SimConfig, run
from .taskmap import DestinationProfile, TaskMapping, measures, points_centroid_distance, validate

log = logging.getLogger(__name__)

# stream tags for seed derivation
_SAMPLE, _MUTATE, _EVAL, _SELECT = 1, 2, 3, 4


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


# ---------------------------------------------------------------------------
# initializers


def _volume_order(volumes: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(volumes, dtype=float), kind="stable")


def min_dist_assign(access: Sequence[float], volumes: Sequence[float]) -> np.ndarray:
    """Min-dist greedy: nearest chutes go to the highest-volume destinations.

    ``access[c]`` is chute ``c``'s distance to its nearest workstation and
    ``volumes[j]`` destination ``j``'s volume. Each destination in descending
    volume order takes up to ``floor(v/sum(v) * M) + 1`` of the nearest
    remaining chutes while leaving one chute for every later destination.
    """
    access = np.asarray(access, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    m, n = len(access), len(volumes)
    if n > m:
        raise ValueError(f"{n} destinations need at least as many chutes (have {m})")
    chutes = np.argsort(access, kind="stable")
    total = volumes.sum()
    out = np.full(m, -1, dtype=np.int64)
    i = 0
    for k, d in enumerate(_volume_order(volumes), start=1):
        cap = math.floor(volumes[d] / total * m + 1e-9) + 1
        taken = 0
        while taken < cap and m - i > n - k:
            out[chutes[i]] = d
            i += 1
            taken += 1
    if i < m:  # cannot happen: the caps always sum past M
        raise AssertionError("min-dist greedy left chutes unassigned")
    return out


def cluster_assign(coords: Sequence[Sequence[float]], volumes: Sequence[float]) -> np.ndarray:
    """Cluster greedy: grow compact chute groups seeded far from earlier groups.

    The first destination seeds at chute 0 (top-left in row-major order);
    later ones seed at the free chute farthest from every existing group
    centroid. Each group then absorbs the free chute closest to its current
    centroid until it holds ``min(cap, remaining - destinations_left)``
    chutes. Ties go to the lowest chute index.
    """
    pts = np.asarray(coords, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    m, n = len(pts), len(volumes)
    if n > m:
        raise ValueError(f"{n} destinations need at least as many chutes (have {m})")
    total = volumes.sum()
    out = np.full(m, -1, dtype=np.int64)
    free = np.ones(m, dtype=bool)
    centroids: list[np.ndarray] = []
    remaining = m
    nearest_centroid = np.full(m, np.inf)
    for k, d in enumerate(_volume_order(volumes), start=1):
        cap = math.floor(volumes[d] / total * m + 1e-9) + 1
        take = min(cap, max(remaining - (n - k), 0))
        if not centroids:
            first = 0
        else:
            score = np.where(free, nearest_centroid, -np.inf)
            first = int(np.argmax(score))
        members = [first]
        free[first] = False
        for _ in range(take - 1):
            centre = pts[members].mean(axis=0)
            dist = np.linalg.norm(pts - centre, axis=1)
            dist[~free] = np.inf
            c = int(np.argmin(dist))
            members.append(c)
            free[c] = False
        out[members] = d
        remaining -= take
        centre = pts[members].mean(axis=0)
        centroids.append(centre)
        nearest_centroid = np.minimum(nearest_centroid, np.linalg.norm(pts - centre, axis=1))
    if remaining:
        raise AssertionError("cluster greedy left chutes unassigned")
    return out


def init_min_dist(fp: Floorplan, profile: DestinationProfile) -> TaskMapping:
    return TaskMapping(min_dist_assign(fp.chute_access, profile.all_volumes), profile.n_dest)


def init_cluster(fp: Floorplan, profile: DestinationProfile) -> TaskMapping:
    return TaskMapping(cluster_assign(fp.chutes, profile.all_volumes), profile.n_dest)


def sample_assignment(profile: DestinationProfile, n_chutes: int, rng: np.random.Generator) -> np.ndarray:
    """Independent per-chute destination draws weighted by volume; may leave destinations empty."""
    w = profile.all_volumes / profile.all_volumes.sum()
    return rng.choice(len(w), size=n_chutes, p=w)


def init_sampled(fp: Floorplan, profile: DestinationProfile, rng: np.random.Generator,
                 bounds: np.ndarray | None = None) -> TaskMapping:
    """Draw each chute's destination by volume (recirculation included), then repair."""
    raw = TaskMapping(sample_assignment(profile, fp.n_chutes, rng), profile.n_dest)
    if bounds is None:
        bounds = profile_bounds(profile, fp.n_chutes)
    return repair(raw, bounds)


def sample_k(rng: np.random.Generator, n_chutes: int, p: float = 0.5) -> int:
    return min(int(rng.geometric(p)), n_chutes)


def mutate(m: TaskMapping, rng: np.random.Generator, p: float = 0.5) -> TaskMapping:
    """Reassign ``k ~ Geometric(p)`` distinct chutes to uniformly random destinations.

    The result may be invalid; callers repair it.
    """
    k = sample_k(rng, m.n_chutes, p)
    chutes = rng.choice(m.n_chutes, size=k, replace=False)
    a = m.assignment.copy()
    a[chutes] = rng.integers(0, m.n_dest + 1, size=k)
    return TaskMapping(a, m.n_dest)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Candidate:
    mapping: TaskMapping
    objective: float
    measures: tuple[float, float]
    eval_seeds: tuple[int, ...]
    recirculation_rate: float = 0.0
    throughputs: tuple[float, ...] = ()
    origin: str = "sampled"


def evaluate(m: TaskMapping, fp: Floorplan, profile: DestinationProfile, cfg: SimConfig,
             seeds: Sequence[int] | None = None, n_e: int = 1) -> Candidate:
    """Mean throughput over one simulation per seed (default ``cfg.seed + 0..n_e-1``)."""
    if seeds is None:
        seeds = [cfg.seed + r for r in range(n_e)]
    results = [run(fp, m, profile, replace(cfg, seed=int(s))) for s in seeds]
    thr = tuple(r.throughput for r in results)
    return Candidate(
        mapping=m,
        objective=float(np.mean(thr)),
        measures=measures(m, profile, fp),
        eval_seeds=tuple(int(s) for s in seeds),
        recirculation_rate=float(np.mean([r.recirculation_rate for r in results])),
        throughputs=thr,
    )


_WORKER: dict = {}


def _worker_init(fp_text: str, profile: DestinationProfile, cfg: SimConfig) -> None:
    from .floorplan import parse_map

    _WORKER.update(fp=parse_map(fp_text), profile=profile, cfg=cfg)


def _worker_eval(job):
    assignment, n_dest, seeds = job
    c = evaluate(TaskMapping(assignment, n_dest), _WORKER["fp"], _WORKER["profile"], _WORKER["cfg"], seeds)
    return c.objective, c.measures, c.recirculation_rate, c.throughputs


class Evaluator:
    """Evaluates batches of mappings, in-process or across worker processes."""

    def __init__(self, fp: Floorplan, profile: DestinationProfile, cfg: SimConfig, workers: int = 1):
        self.fp, self.profile, self.cfg = fp, profile, cfg
        self.workers = max(1, int(workers))
        self._pool = None
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(
                self.workers, initializer=_worker_init, initargs=(fp.serialize(), profile, cfg)
            )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def batch(self, mappings: Sequence[TaskMapping], seeds: Sequence[Sequence[int]],
              origins: Sequence[str] | None = None) -> list[Candidate]:
        for m in mappings:
            problems = validate(m, self.fp.n_chutes, self.profile.n_dest)
            if problems:
                raise ValueError("refusing to evaluate an invalid mapping: " + "; ".join(problems))
        origins = origins or ["sampled"] * len(mappings)
        if self._pool is None:
            out = [evaluate(m, self.fp, self.profile, self.cfg, s) for m, s in zip(mappings, seeds)]
        else:
            jobs = [(m.assignment, m.n_dest, list(s)) for m, s in zip(mappings, seeds)]
            out = []
            for m, s, (obj, meas, rate, thr) in zip(mappings, seeds, self._pool.map(_worker_eval, jobs)):
                out.append(Candidate(m, obj, meas, tuple(int(x) for x in s), rate, thr))
        for c, o in zip(out, origins):
            c.origin = o
        return out


# ---------------------------------------------------------------------------
# (1 + lambda) EA


@dataclass(frozen=True)
class EAConfig:
    n_eval: int = 10_000
    lam: int = 100
    n_e: int = 5
    use_greedy_init: bool = True
    seed: int = 0
    workers: int = 1
    delta: float = DEFAULT_DELTA
    mutation_p: float = 0.5
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_agents=600, horizon=5000))

    def __post_init__(self):
        if self.lam < 1 or self.n_e < 1:
            raise ValueError("need lam >= 1 and n_e >= 1")
        if self.n_eval < self.lam:
            raise ValueError(f"evaluation budget {self.n_eval} is smaller than the population size {self.lam}")
        if self.use_greedy_init and self.lam < 2:
            raise ValueError("greedy initialization needs lam >= 2")


@dataclass
class EAResult:
    best: Candidate
    history: list[dict]
    n_evals: int
    initial: list[Candidate]


class _Search:
    """Shared bookkeeping for the EA and MAP-Elites loops."""

    def __init__(self, fp: Floorplan, profile: DestinationProfile, cfg: EAConfig):
        self.fp, self.profile, self.cfg = fp, profile, cfg
        self.bounds = profile_bounds(profile, fp.n_chutes, cfg.delta)
        self.counter = 0

    def seeds_for(self, counter: int) -> list[int]:
        return [derive_seed(self.cfg.seed, _EVAL, counter, r) for r in range(self.cfg.n_e)]

    def initial_mappings(self) -> tuple[list[TaskMapping], list[str]]:
        lam = self.cfg.lam
        maps, origins = [], []
        if self.cfg.use_greedy_init:
            maps += [init_min_dist(self.fp, self.profile), init_cluster(self.fp, self.profile)]
            origins += ["min-dist", "cluster"]
        for k in range(lam - len(maps)):
            maps.append(init_sampled(self.fp, self.profile, _rng(self.cfg.seed, _SAMPLE, k), self.bounds))
            origins.append("sampled")
        return maps, origins

    def child(self, parent: TaskMapping, counter: int) -> TaskMapping:
        rng = _rng(self.cfg.seed, _MUTATE, counter)
        return repair(mutate(parent, rng, self.cfg.mutation_p), self.bounds)

    def evaluate(self, ev: Evaluator, maps: list[TaskMapping], origins: list[str]) -> list[Candidate]:
        ids = range(self.counter, self.counter + len(maps))
        self.counter += len(maps)
        return ev.batch(maps, [self.seeds_for(i) for i in ids], origins)


def ea_run(fp: Floorplan, profile: DestinationProfile, cfg: EAConfig,
           progress: Callable[[dict], None] | None = None) -> EAResult:
    """(1+lambda) EA: mutate the best-so-far mapping lambda times per generation."""
    search = _Search(fp, profile, cfg)
    history: list[dict] = []
    with Evaluator(fp, profile, cfg.sim, cfg.workers) as ev:
        maps, origins = search.initial_mappings()
        initial = search.evaluate(ev, maps, origins)
        best = _argmax(initial)
        gen = 0

        def record():
            row = {"generation": gen, "evals_used": search.counter, "best_objective": best.objective,
                   "best_amdw": best.measures[0], "best_acd": best.measures[1]}
            history.append(row)
            if progress:
                progress(row)

        record()
        while search.counter < cfg.n_eval:
            gen += 1
            n = min(cfg.lam, cfg.n_eval - search.counter)
            kids = [search.child(best.mapping, search.counter + q) for q in range(n)]
            for c in search.evaluate(ev, kids, ["mutant"] * n):
                if c.objective > best.objective:
                    best = c
            record()
    return EAResult(best, history, search.counter, initial)


def _argmax(cands: Sequence[Candidate]) -> Candidate:
    best = cands[0]
    for c in cands[1:]:
        if c.objective > best.objective:
            best = c
    return best


# ---------------------------------------------------------------------------
# MAP-Elites


def archive_cell(values: Sequence[float], bounds: Sequence[tuple[float, float]],
                 resolution: Sequence[int]) -> tuple[int, ...]:
    """Uniform bin index per axis, clamped into ``0..res-1``."""
    idx = []
    for x, (lo, hi), res in zip(values, bounds, resolution):
        if res < 1:
            raise ValueError("resolution must be >= 1 per axis")
        frac = (x - lo) / (hi - lo)
        idx.append(int(min(max(math.floor(frac * res), 0), res - 1)))
    return tuple(idx)


def default_measure_bounds(fp: Floorplan) -> tuple[tuple[float, float], tuple[float, float]]:
    """AMDW in [1, farthest chute access distance]; ACD in [0, half the floor diagonal]."""
    return (1.0, float(np.max(fp.chute_access))), (0.0, 0.5 * math.hypot(fp.height, fp.width))


class Archive:
    """Grid archive over (AMDW, ACD) keeping the best candidate per cell."""

    def __init__(self, bounds, resolution=(25, 25)):
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        self.resolution = tuple(int(r) for r in resolution)
        for lo, hi in self.bounds:
            if not hi > lo:
                raise ValueError(f"empty measure range [{lo}, {hi}]")
        if any(r < 1 for r in self.resolution):
            raise ValueError("resolution must be >= 1 per axis")
        self.cells: dict[tuple[int, ...], Candidate] = {}

    def cell_of(self, values) -> tuple[int, ...]:
        return archive_cell(values, self.bounds, self.resolution)

    def add(self, cand: Candidate) -> bool:
        """Insert if the cell is empty or ``cand`` strictly beats the incumbent."""
        cell = self.cell_of(cand.measures)
        old = self.cells.get(cell)
        if old is None or cand.objective > old.objective:
            self.cells[cell] = cand
            return True
        return False

    def qd_score(self) -> float:
        return float(sum(c.objective for c in self.cells.values()))

    def best(self) -> Candidate:
        return _argmax([self.cells[k] for k in sorted(self.cells)])

    def occupied(self) -> list[tuple[int, ...]]:
        return sorted(self.cells)

    def __len__(self) -> int:
        return len(self.cells)


@dataclass
class QDResult:
    archive: Archive
    history: list[dict]
    n_evals: int


def map_elites_run(fp: Floorplan, profile: DestinationProfile, cfg: EAConfig,
                   resolution=(25, 25), bounds=None,
                   progress: Callable[[dict], None] | None = None) -> QDResult:
    """MAP-Elites over (AMDW, ACD), seeded like the greedy-initialized EA.

    Each batch draws ``lam`` parents uniformly (with replacement) from the
    occupied cells.
    """
    cfg = replace(cfg, use_greedy_init=True) if cfg.lam >= 2 else cfg
    search = _Search(fp, profile, cfg)
    archive = Archive(bounds or default_measure_bounds(fp), resolution)
    history: list[dict] = []
    with Evaluator(fp, profile, cfg.sim, cfg.workers) as ev:
        maps, origins = search.initial_mappings()
        for c in search.evaluate(ev, maps, origins):
            archive.add(c)
        batch = 0

        def record():
            row = {"batch": batch, "evals_used": search.counter, "qd_score": archive.qd_score(),
                   "cells": len(archive), "best_objective": archive.best().objective}
            history.append(row)
            if progress:
                progress(row)

        record()
        while search.counter < cfg.n_eval:
            batch += 1
            n = min(cfg.lam, cfg.n_eval - search.counter)
            occupied = archive.occupied()
            picks = _rng(cfg.seed, _SELECT, batch).integers(0, len(occupied), size=n)
            kids = [search.child(archive.cells[occupied[p]].mapping, search.counter + q) for q, p in enumerate(picks)]
            for c in search.evaluate(ev, kids, ["mutant"] * n):
                archive.add(c)
            record()
    return QDResult(archive, history, search.counter)


def default_workers() -> int:
    env = os.environ.get("CHUTEMAP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
