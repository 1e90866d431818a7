"""Task mappings, destination volume profiles and the geometric diversity measures.

Destinations are 0-based: shipping destinations are ``0..N-1`` in descending
volume order and index ``N`` is the recirculation pseudo-destination.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .floorplan import DistanceField, Floorplan, chute_access_distance

RECIRC_TOKEN = "RECIRC"
MAPPING_HEADER = "# chutemap task-mapping v1"


class MappingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TaskMapping:
    """Chute -> destination assignment. ``assignment[c]`` is in ``0..n_dest``."""

    assignment: np.ndarray
    n_dest: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @property
    def recirc(self) -> int:
        return self.n_dest

    @property
    def n_chutes(self) -> int:
        return len(self.assignment)

    def chutes_of(self, dest: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == dest)

    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_dest + 1)

    def key(self) -> bytes:
        return self.assignment.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskMapping):
            return NotImplemented
        return self.n_dest == other.n_dest and np.array_equal(self.assignment, other.assignment)

    def __hash__(self) -> int:
        return hash((self.n_dest, self.key()))

    def __repr__(self) -> str:
        return f"TaskMapping(M={self.n_chutes}, N={self.n_dest})"


@dataclass(frozen=True, eq=False)
class DestinationProfile:
    """Package volume profile for ``N`` shipping destinations.

    ``volumes`` are the sampling probabilities (sorted descending, summing to
    1). ``recirc_volume`` is only consulted by initializers and repair bounds.
    """

    volumes: np.ndarray
    recirc_volume: float
    groups: tuple[int, int, int]

    @property
    def n_dest(self) -> int:
        return len(self.volumes)

    @property
    def all_volumes(self) -> np.ndarray:
        """Volumes for destinations ``0..N`` with recirculation last."""
        return np.append(self.volumes, self.recirc_volume)

    @property
    def cumulative(self) -> np.ndarray:
        cum = np.cumsum(self.volumes)
        cum[-1] = 1.0
        return cum

    def top_destinations(self, share: float = 0.05) -> np.ndarray:
        """The ``ceil(share * N)`` highest-volume destinations (at least one)."""
        k = max(1, math.ceil(share * self.n_dest - 1e-9))
        order = np.argsort(-self.volumes, kind="stable")
        return np.sort(order[:k])


def group_sizes(n: int) -> tuple[int, int, int]:
    high = math.ceil(0.1 * n - 1e-9)
    mid = math.ceil(0.2 * n - 1e-9)
    return high, mid, n - high - mid


def make_profile(n_dest: int, recirc_share: float = 0.05) -> DestinationProfile:
    """7:2:1 profile: 10% of destinations draw 70% of packages, 20% draw 20%, the rest 10%."""
    if n_dest < 2:
        raise ValueError("need at least 2 destinations for a 7:2:1 profile")
    if recirc_share <= 0:
        raise ValueError("recirc_share must be positive")
    high, mid, low = group_sizes(n_dest)
    shares = [(high, 0.7), (mid, 0.2), (low, 0.1)]
    present = [(size, mass) for size, mass in shares if size > 0]
    total = sum(mass for _, mass in present)
    probs = np.concatenate([np.full(size, mass / total / size) for size, mass in present])
    return DestinationProfile(volumes=probs, recirc_volume=recirc_share * probs.sum(), groups=(high, mid, low))


def sample_destination(profile: DestinationProfile, rng, size: int | None = None):
    """Draw destination(s) in ``0..N-1`` by inverse CDF.

    ``rng`` only needs a ``random()`` method (``numpy.random.Generator`` or
    ``random.Random``); pass ``size`` with a numpy generator for bulk draws.
    """
    cum = profile.cumulative
    if size is None:
        return min(int(np.searchsorted(cum, rng.random(), side="right")), profile.n_dest - 1)
    u = rng.random(size)
    return np.minimum(np.searchsorted(cum, u, side="right"), profile.n_dest - 1)


def centroid_distance(chute_set: Sequence[int], fp: Floorplan) -> float:
    """Mean Euclidean distance from each chute to the set's centroid."""
    if len(chute_set) == 0:
        raise ValueError("centroid distance of an empty chute set")
    pts = np.array([fp.chutes[c] for c in chute_set], dtype=float)
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean())


def points_centroid_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise ValueError("centroid distance of an empty chute set")
    return float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean())


def measure_acd(m: TaskMapping, profile: DestinationProfile, fp: Floorplan) -> float:
    """Average centroid distance over the top-5% destinations."""
    return float(np.mean([centroid_distance(m.chutes_of(d), fp) for d in profile.top_destinations()]))


def measure_amdw(
    m: TaskMapping,
    profile: DestinationProfile,
    fp: Floorplan,
    workstation_field: DistanceField | None = None,
) -> float:
    """Average nearest-workstation access distance over chutes of the top-5% destinations."""
    chutes = np.concatenate([m.chutes_of(d) for d in profile.top_destinations()])
    if workstation_field is None:
        access = fp.chute_access
        return float(np.mean(access[chutes]))
    return float(np.mean([chute_access_distance(fp, int(c), workstation_field) for c in chutes]))


def measures(m: TaskMapping, profile: DestinationProfile, fp: Floorplan) -> tuple[float, float]:
    """(AMDW, ACD)."""
    return measure_amdw(m, profile, fp), measure_acd(m, profile, fp)


def validate(m: TaskMapping, n_chutes: int | None = None, n_dest: int | None = None) -> list[str]:
    """Validity findings; an empty list means the mapping is valid."""
    problems = []
    if n_chutes is not None and m.n_chutes != n_chutes:
        problems.append(f"mapping covers {m.n_chutes} chutes, map has {n_chutes}")
    if n_dest is not None and m.n_dest != n_dest:
        problems.append(f"mapping has {m.n_dest} destinations, profile has {n_dest}")
    a = m.assignment
    if len(a) and (a.min() < 0 or a.max() > m.n_dest):
        problems.append(f"destination ids must lie in 0..{m.n_dest}")
        return problems
    for d in np.flatnonzero(m.counts() == 0):
        name = RECIRC_TOKEN if d == m.n_dest else f"dest {d}"
        problems.append(f"{name} empty")
    return problems


def is_valid(m: TaskMapping) -> bool:
    return not validate(m)


def format_mapping(m: TaskMapping) -> str:
    """Text form with 1-based chute and destination ids; recirculation is ``RECIRC``."""
    lines = [MAPPING_HEADER, f"M {m.n_chutes} N {m.n_dest}"]
    for c, d in enumerate(m.assignment):
        lines.append(f"{c + 1} {RECIRC_TOKEN if d == m.n_dest else d + 1}")
    return "\n".join(lines) + "\n"


def parse_mapping(text: str) -> TaskMapping:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise MappingError("empty mapping file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "M" or head[2] != "N":
        raise MappingError(f"bad mapping header {lines[0]!r}; expected 'M <chutes> N <destinations>'")
    n_chutes, n_dest = int(head[1]), int(head[3])
    assignment = np.full(n_chutes, -1, dtype=np.int64)
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise MappingError(f"bad mapping record {ln!r}")
        cid = int(parts[0]) - 1
        if not 0 <= cid < n_chutes:
            raise MappingError(f"chute id {parts[0]} outside 1..{n_chutes}")
        if assignment[cid] != -1:
            raise MappingError(f"chute {parts[0]} assigned twice")
        d = n_dest if parts[1] == RECIRC_TOKEN else int(parts[1]) - 1
        if not 0 <= d < n_dest + (parts[1] == RECIRC_TOKEN):
            raise MappingError(f"destination {parts[1]} outside 1..{n_dest}")
        assignment[cid] = d
    missing = np.flatnonzero(assignment < 0)
    if len(missing):
        raise MappingError(f"{len(missing)} chutes have no destination (first: chute {missing[0] + 1})")
    return TaskMapping(assignment, n_dest)


def load_mapping(path) -> TaskMapping:
    with open(path, encoding="utf-8") as fh:
        return parse_mapping(fh.read())


def save_mapping(m: TaskMapping, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_mapping(m))


PROFILE_VERSION = 1


def profile_to_dict(profile: DestinationProfile) -> dict:
    return {
        "format": "chutemap-profile",
        "version": PROFILE_VERSION,
        "n_dest": profile.n_dest,
        "groups": list(profile.groups),
        "recirc_volume": profile.recirc_volume,
        "volumes": [float(v) for v in profile.volumes],
    }


def profile_from_dict(data: dict) -> DestinationProfile:
    if data.get("format") != "chutemap-profile":
        raise MappingError("not a chutemap profile document")
    volumes = np.asarray(data["volumes"], dtype=float)
    if np.any(volumes <= 0) or np.any(np.diff(volumes) > 0):
        raise MappingError("profile volumes must be positive and non-increasing")
    volumes = volumes / volumes.sum()
    return DestinationProfile(volumes, float(data["recirc_volume"]), tuple(data.get("groups", (0, 0, 0))))


def save_profile(profile: DestinationProfile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(profile_to_dict(profile), fh, indent=2)
        fh.write("\n")


def load_profile(path) -> DestinationProfile:
    with open(path, encoding="utf-8") as fh:
        return profile_from_dict(json.load(fh))
