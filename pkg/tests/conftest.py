"""Shared fixtures and the acceptance summary printed at the end of a run."""
from __future__ import annotations

import numpy as np
import pytest

from chutemap.floorplan import MapParams, generate_map, parse_map

ACCEPTANCE_LINES: list[str] = []


def single_robot_map_text(size: int = 20, ws_row: int = 10, ep: tuple[int, int] = (10, 10)) -> str:
    """Open floor, one workstation on the left wall and one endpoint serving three chutes.

    The endpoint is reachable only from its left neighbour, so the one-way
    path length between workstation and endpoint is ``ep[1]`` steps.
    """
    grid = [["."] * size for _ in range(size)]
    grid[ws_row][0] = "w"
    r, c = ep
    grid[r][c] = "e"
    for cr, cc in ((r - 1, c), (r + 1, c), (r, c + 1)):
        grid[cr][cc] = "c"
    for cr, cc in ((r - 2, c), (r - 1, c - 1), (r - 1, c + 1), (r + 2, c), (r + 1, c - 1),
                   (r + 1, c + 1), (r, c + 2)):
        grid[cr][cc] = "@"
    return f"{size} {size}\n" + "\n".join("".join(row) for row in grid) + "\n"


@pytest.fixture(scope="session")
def single_robot_fp():
    return parse_map(single_robot_map_text())


@pytest.fixture(scope="session")
def small_fp():
    """20x20 generated floor used by fast simulator and optimizer tests."""
    return generate_map(small_params())


def small_params(seed: int = 0) -> MapParams:
    return MapParams(width=20, height=20, block_rows=1, block_cols=3, corridor=1, margin=2,
                     workstation_count=4, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def scan_moves(positions, fp) -> dict:
    """Independent safety scan over a ``(T+1, N)`` flat-cell position log.

    Counts vertex conflicts (two robots in one cell), swap conflicts (two
    robots trading cells in one step) and illegal moves (anything other than
    a wait or a step to a 4-adjacent traversable cell).
    """
    pos = np.asarray(positions)
    w = fp.width
    mask = fp.traversable_mask.ravel()
    vertex = sum(len(row) - len(set(row.tolist())) for row in pos)
    swaps = 0
    illegal = 0
    for t in range(len(pos) - 1):
        a, b = pos[t], pos[t + 1]
        moved = a != b
        ra, ca = np.divmod(a, w)
        rb, cb = np.divmod(b, w)
        step = np.abs(ra - rb) + np.abs(ca - cb)
        illegal += int(np.sum(moved & (step != 1))) + int(np.sum(~mask[b]))
        start = {int(c): i for i, c in enumerate(a)}
        for i in np.flatnonzero(moved):
            j = start.get(int(b[i]))
            if j is not None and j != i and b[j] == a[i]:
                swaps += 1
    return {"vertex": vertex, "swap": swaps // 2, "illegal": illegal}
