"""Sortation-floor grid maps: parsing, validation, generation and BFS distance fields.

Coordinates are ``(row, col)`` tuples. Chute and workstation indices used by
the rest of the package are 0-based positions in :attr:`Floorplan.chutes` /
:attr:`Floorplan.workstations` (row-major scan order); map files never store
them explicitly.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

Cell = tuple[int, int]

_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MapError(ValueError):
    """Raised for malformed or invalid map files and infeasible generator parameters."""


class MapFormatError(MapError):
    """The map text itself is malformed (header, row lengths, cell codes)."""


class CellKind(enum.IntEnum):
    TRAVERSABLE = 0
    OBSTACLE = 1
    WORKSTATION = 2
    ENDPOINT = 3
    CHUTE = 4


CODES = {
    ".": CellKind.TRAVERSABLE,
    "@": CellKind.OBSTACLE,
    "w": CellKind.WORKSTATION,
    "e": CellKind.ENDPOINT,
    "c": CellKind.CHUTE,
}
_CHARS = {kind: ch for ch, kind in CODES.items()}


@dataclass(frozen=True)
class DistanceField:
    """Multi-source shortest-path lengths over the traversable subgraph.

    ``dist`` has shape ``(height, width)``; unreachable and non-traversable
    cells hold ``inf``.
    """

    sources: tuple[Cell, ...]
    dist: np.ndarray

    def __getitem__(self, cell: Cell) -> float:
        return float(self.dist[cell])


class Floorplan:
    """An immutable sortation floor.

    Build one with :func:`parse_map` or :func:`generate_map`; the constructor
    validates every structural invariant and raises :class:`MapError` on the
    first violation.
    """

    def __init__(self, cells: np.ndarray):
        cells = np.asarray(cells, dtype=np.int8).copy()
        if cells.ndim != 2 or cells.size == 0:
            raise MapError("map must be a non-empty 2-D grid")
        cells.setflags(write=False)
        self.cells = cells
        self.height, self.width = cells.shape

        self.chutes: tuple[Cell, ...] = _cells_of(cells, CellKind.CHUTE)
        self.workstations: tuple[Cell, ...] = _cells_of(cells, CellKind.WORKSTATION)
        self.endpoints: tuple[Cell, ...] = _cells_of(cells, CellKind.ENDPOINT)
        self.chute_adjacency: tuple[tuple[Cell, ...], ...] = tuple(
            tuple(n for n in self._grid_neighbors(c) if cells[n] == CellKind.ENDPOINT)
            for c in self.chutes
        )
        self._validate()

    @property
    def n_chutes(self) -> int:
        return len(self.chutes)

    def is_traversable(self, cell: Cell) -> bool:
        r, c = cell
        if not (0 <= r < self.height and 0 <= c < self.width):
            return False
        return self.cells[r, c] not in (CellKind.OBSTACLE, CellKind.CHUTE)

    def neighbors(self, cell: Cell) -> list[Cell]:
        """4-adjacent traversable cells."""
        return [n for n in self._grid_neighbors(cell) if self.is_traversable(n)]

    def _grid_neighbors(self, cell: Cell) -> Iterable[Cell]:
        r, c = cell
        for dr, dc in _DIRS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < self.height and 0 <= nc < self.width:
                yield (nr, nc)

    @cached_property
    def traversable_mask(self) -> np.ndarray:
        mask = (self.cells != CellKind.OBSTACLE) & (self.cells != CellKind.CHUTE)
        mask.setflags(write=False)
        return mask

    def _validate(self) -> None:
        if not self.workstations:
            raise MapError("map has no workstations")
        if not self.chutes:
            raise MapError("map has no chutes")
        for cid, adj in enumerate(self.chute_adjacency):
            if not adj:
                raise MapError(f"chute unreachable: chute {cid} at {self.chutes[cid]} has no adjacent endpoint")
        free = np.argwhere(self.traversable_mask)
        start = tuple(int(x) for x in free[0])
        reach = _bfs(self, [start])
        unreachable = int(np.isinf(reach[self.traversable_mask]).sum())
        if unreachable:
            raise MapError(f"traversable cells are disconnected ({unreachable} cells unreachable)")

    def serialize(self) -> str:
        lines = [f"{self.height} {self.width}"]
        lines += ["".join(_CHARS[CellKind(v)] for v in row) for row in self.cells]
        return "\n".join(lines) + "\n"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Floorplan):
            return NotImplemented
        return self.cells.shape == other.cells.shape and bool(np.array_equal(self.cells, other.cells))

    def __hash__(self) -> int:
        return hash((self.cells.shape, self.cells.tobytes()))

    def __repr__(self) -> str:
        return (
            f"Floorplan({self.height}x{self.width}, chutes={self.n_chutes}, "
            f"workstations={len(self.workstations)}, endpoints={len(self.endpoints)})"
        )

    @cached_property
    def workstation_field(self) -> DistanceField:
        return distance_field(self, self.workstations)

    @cached_property
    def chute_access(self) -> np.ndarray:
        """Access distance from the nearest workstation for every chute."""
        field = self.workstation_field
        out = np.array([chute_access_distance(self, i, field) for i in range(self.n_chutes)])
        out.setflags(write=False)
        return out


def _cells_of(cells: np.ndarray, kind: CellKind) -> tuple[Cell, ...]:
    return tuple((int(r), int(c)) for r, c in np.argwhere(cells == kind))


def _bfs(fp: Floorplan, sources: Sequence[Cell]) -> np.ndarray:
    dist = np.full((fp.height, fp.width), np.inf)
    queue: deque[Cell] = deque()
    for s in sources:
        if dist[s] != 0:
            dist[s] = 0
            queue.append(s)
    mask = fp.traversable_mask
    h, w = fp.height, fp.width
    while queue:
        r, c = queue.popleft()
        nd = dist[r, c] + 1
        for dr, dc in _DIRS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and dist[nr, nc] > nd:
                dist[nr, nc] = nd
                queue.append((nr, nc))
    return dist


def parse_map(text: str) -> Floorplan:
    lines = text.splitlines()
    if not lines:
        raise MapFormatError("empty map file")
    try:
        height, width = (int(x) for x in lines[0].split())
    except ValueError:
        raise MapFormatError(f"bad header line {lines[0]!r}; expected 'height width'") from None
    rows = lines[1 : 1 + height]
    if len(rows) != height or any(line.strip() for line in lines[1 + height :]):
        raise MapFormatError(f"expected exactly {height} grid rows")
    cells = np.empty((height, width), dtype=np.int8)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise MapFormatError(f"row {r} has length {len(row)}, expected {width} (non-rectangular grid)")
        for c, ch in enumerate(row):
            try:
                cells[r, c] = CODES[ch]
            except KeyError:
                raise MapFormatError(f"unknown cell code {ch!r} at ({r}, {c})") from None
    return Floorplan(cells)


def load_map(path) -> Floorplan:
    with open(path, encoding="utf-8") as fh:
        return parse_map(fh.read())


def save_map(fp: Floorplan, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(fp.serialize())


def distance_field(fp: Floorplan, sources: Iterable[Cell]) -> DistanceField:
    """Multi-source BFS over the 4-connected traversable cells."""
    srcs = tuple((int(r), int(c)) for r, c in sources)
    for s in srcs:
        if not fp.is_traversable(s):
            raise MapError(f"distance source {s} is not traversable")
    dist = _bfs(fp, srcs)
    dist.setflags(write=False)
    return DistanceField(srcs, dist)


def chute_access_distance(fp: Floorplan, chute_id: int, field: DistanceField) -> float:
    """1 + the smallest field distance over the chute's adjacent endpoints."""
    return 1.0 + min(float(field.dist[e]) for e in fp.chute_adjacency[chute_id])


def distance_table(fp: Floorplan, sources: Sequence[Cell]) -> np.ndarray:
    """Single-source distances from each cell in ``sources``.

    Returns an int32 array of shape ``(len(sources), height * width)`` indexed
    by flat cell index; unreachable cells hold ``-1``.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import shortest_path

    h, w = fp.height, fp.width
    mask = fp.traversable_mask
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    horiz = mask[:, :-1] & mask[:, 1:]
    rows.append(idx[:, :-1][horiz])
    cols.append(idx[:, 1:][horiz])
    vert = mask[:-1, :] & mask[1:, :]
    rows.append(idx[:-1, :][vert])
    cols.append(idx[1:, :][vert])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(h * w, h * w)).tocsr()
    flat = [s[0] * w + s[1] for s in sources]
    d = shortest_path(graph, directed=False, unweighted=True, indices=flat)
    d = np.atleast_2d(d)
    out = np.where(np.isinf(d), -1, d).astype(np.int32)
    return out


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class MapParams:
    """Parameters for :func:`generate_map`.

    Chutes are laid out in ``block_rows x block_cols`` rectangles, each ringed
    by endpoints, with ``corridor`` free cells between neighbouring rings.
    ``margin`` free columns separate the block field from the workstation
    walls. When ``chute_target`` is set, randomly chosen chutes (by ``seed``)
    are removed until exactly that many remain.
    """

    width: int
    height: int
    block_rows: int = 1
    block_cols: int = 4
    corridor: int = 1
    margin: int = 3
    workstation_count: int = 16
    chute_target: int | None = None
    seed: int = 0


def generate_map(params: MapParams) -> Floorplan:
    p = params
    if min(p.block_rows, p.block_cols) > 2:
        raise MapError("blocks thicker than 2 chutes leave interior chutes with no endpoint")
    if p.width < 2 * p.margin + 5 or p.height < 5:
        raise MapError("floor too small for the requested margins")
    if p.workstation_count < 1:
        raise MapError("need at least one workstation")

    # Perimeter columns stay traversable: a workstation with a single free
    # neighbour is a dead end where PIBT can lock a robot in place.
    grid = np.full((p.height, p.width), CellKind.TRAVERSABLE, dtype=np.int8)

    # workstations alternate between the left and right walls, spread evenly
    left = (p.workstation_count + 1) // 2
    right = p.workstation_count - left
    for col, count in ((0, left), (p.width - 1, right)):
        if count > p.height - 2:
            raise MapError("too many workstations for the wall length")
        for k in range(count):
            row = 1 + int((k + 0.5) * (p.height - 2) / count)
            grid[row, col] = CellKind.WORKSTATION

    top, bottom = 1, p.height - 1
    lo, hi = 1 + p.margin, p.width - 1 - p.margin
    fh, fw = p.block_rows + 2, p.block_cols + 2
    n_r = (bottom - top + p.corridor) // (fh + p.corridor)
    n_c = (hi - lo + p.corridor) // (fw + p.corridor)
    if n_r < 1 or n_c < 1:
        raise MapError("chute blocks exceed the floor area")
    used_h = n_r * fh + (n_r - 1) * p.corridor
    used_w = n_c * fw + (n_c - 1) * p.corridor
    r0 = top + (bottom - top - used_h) // 2
    c0 = lo + (hi - lo - used_w) // 2
    for br in range(n_r):
        for bc in range(n_c):
            rr = r0 + br * (fh + p.corridor) + 1
            cc = c0 + bc * (fw + p.corridor) + 1
            grid[rr : rr + p.block_rows, cc : cc + p.block_cols] = CellKind.CHUTE

    if p.chute_target is not None:
        chutes = np.argwhere(grid == CellKind.CHUTE)
        if not 1 <= p.chute_target <= len(chutes):
            raise MapError(f"chute_target {p.chute_target} outside 1..{len(chutes)}")
        rng = np.random.default_rng(p.seed)
        drop = rng.choice(len(chutes), size=len(chutes) - p.chute_target, replace=False)
        for r, c in chutes[np.sort(drop)]:
            grid[r, c] = CellKind.TRAVERSABLE

    # endpoints: free cells 4-adjacent to a chute
    chute = grid == CellKind.CHUTE
    near = np.zeros_like(chute)
    near[1:, :] |= chute[:-1, :]
    near[:-1, :] |= chute[1:, :]
    near[:, 1:] |= chute[:, :-1]
    near[:, :-1] |= chute[:, 1:]
    grid[near & (grid == CellKind.TRAVERSABLE)] = CellKind.ENDPOINT
    return Floorplan(grid)


# Reference floor sizes; block shapes chosen so chute counts land near
# 253 / 105 / 703 / 325.
PRESETS: dict[str, dict] = {
    "setup1": dict(map=dict(height=33, width=57, block_rows=2, block_cols=3, corridor=1, margin=5,
                            workstation_count=16), n_dest=99, n_robots=600),
    "setup2": dict(map=dict(height=33, width=57, block_rows=1, block_cols=3, corridor=2, margin=5,
                            workstation_count=16), n_dest=41, n_robots=600),
    "setup3": dict(map=dict(height=50, width=86, block_rows=2, block_cols=3, corridor=1, margin=3,
                            workstation_count=24), n_dest=299, n_robots=1200),
    "setup4": dict(map=dict(height=50, width=86, block_rows=1, block_cols=3, corridor=2, margin=3,
                            workstation_count=24), n_dest=138, n_robots=1200),
    # laptop-scale variant for quick experiments: the dense block pattern
    # squeezed into the middle of a 33x57 floor (108 chutes)
    "desk-dense": dict(map=dict(height=33, width=57, block_rows=2, block_cols=3, corridor=1, margin=18,
                                workstation_count=16), n_dest=41, n_robots=150),
}


def preset_params(name: str, seed: int = 0) -> MapParams:
    try:
        entry = PRESETS[name]
    except KeyError:
        raise MapError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return MapParams(seed=seed, **entry["map"])
