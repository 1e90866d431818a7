import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chutemap.repair import (
    InfeasibleBoundsError,
    MinCostFlow,
    compute_upper_bounds,
    integer_bounds,
    profile_bounds,
    repair,
    repair_assignment,
    repair_with_report,
)
from chutemap.taskmap import TaskMapping, make_profile, validate


def brute_force_min_changes(assignment, bounds):
    """Minimum Hamming distance over every assignment meeting 1 <= count <= bound."""
    k = len(bounds)
    best = None
    for cand in itertools.product(range(k), repeat=len(assignment)):
        counts = np.bincount(cand, minlength=k)
        if np.all(counts >= 1) and np.all(counts <= bounds):
            cost = sum(a != b for a, b in zip(cand, assignment))
            best = cost if best is None else min(best, cost)
    return best


def random_instance(rng):
    """Random (assignment, bounds) with M <= 7, N_total <= 3 and feasible bounds."""
    while True:
        m = int(rng.integers(2, 8))
        k = int(rng.integers(2, 4))
        vol = rng.random(k) + 0.01
        try:
            bounds = integer_bounds(compute_upper_bounds(vol, m, 1.5), m)
        except InfeasibleBoundsError:
            continue
        return rng.integers(0, k, size=m), bounds


class TestBounds:
    def test_example(self):
        u = compute_upper_bounds([7, 2, 1], 10, 1.5)
        assert u == pytest.approx([10.5, 3.0, 1.5])
        assert list(integer_bounds(u, 10)) == [10, 3, 1]

    def test_uniform_tight(self):
        u = compute_upper_bounds(np.ones(6), 6, 1.5)
        assert u == pytest.approx([1.5] * 6)
        assert list(integer_bounds(u, 6)) == [1] * 6

    def test_clamp(self):
        assert compute_upper_bounds([1.0, 1e-12], 4, 1.5)[1] == 1.0

    def test_infeasible_sum(self):
        with pytest.raises(InfeasibleBoundsError, match="increase delta"):
            integer_bounds(compute_upper_bounds(np.ones(4), 10, 1.0), 10)

    def test_too_many_destinations(self):
        with pytest.raises(InfeasibleBoundsError):
            integer_bounds(np.ones(5), 3)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            compute_upper_bounds([0, 0], 3)
        with pytest.raises(ValueError):
            compute_upper_bounds([1, 1], 3, delta=0)

    def test_profile_bounds_include_recirc(self):
        b = profile_bounds(make_profile(10), 40)
        assert len(b) == 11
        assert b.sum() >= 40


class TestMinCostFlow:
    def test_prefers_cheap_path(self):
        net = MinCostFlow(4)
        net.add_edge(0, 1, 1, 5)
        net.add_edge(0, 2, 1, 1)
        net.add_edge(1, 3, 1, 0)
        e = net.add_edge(2, 3, 1, 0)
        assert net.solve(0, 3, 1) == (1, 1)
        assert net.flow_on(e) == 1

    def test_negative_arc(self):
        net = MinCostFlow(3)
        net.add_edge(0, 1, 2, 0)
        net.add_edge(1, 2, 1, -4)
        net.add_edge(1, 2, 1, 0)
        assert net.solve(0, 2) == (2, -4)


class TestRepair:
    def test_valid_input_unchanged(self):
        out, changed = repair_assignment([0, 1, 1, 2], [2, 2, 1])
        assert changed == 0 and list(out) == [0, 1, 1, 2]

    def test_all_on_one_destination(self):
        out, changed = repair_assignment([0, 0, 0], [2, 2])
        assert changed == 1
        assert sorted(np.bincount(out, minlength=2)) == [1, 2]
        assert brute_force_min_changes([0, 0, 0], np.array([2, 2])) == 1

    def test_tie_break_is_deterministic(self):
        # lowest chute id moves to the lowest destination id that needs it
        out, _ = repair_assignment([0, 0, 0], [2, 2])
        assert list(out) == [1, 0, 0]
        out, _ = repair_assignment([1, 1, 1, 0], [2, 2])
        assert list(out) == [0, 1, 1, 0]

    def test_unassigned_entries(self):
        out, changed = repair_assignment([-1, 0, 5], [2, 2])
        assert sorted(np.bincount(out, minlength=2)) == [1, 2]
        assert changed == 2

    def test_infeasible(self):
        with pytest.raises(InfeasibleBoundsError):
            repair_assignment([0, 0, 0], [1, 1])

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(150):
            a, b = random_instance(rng)
            out, changed = repair_assignment(a, b)
            assert changed == brute_force_min_changes(a, b)
            counts = np.bincount(out, minlength=len(b))
            assert np.all(counts >= 1) and np.all(counts <= b)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_idempotent_and_valid(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        m = int(rng.integers(n + 1, 40))
        p = make_profile(n)
        bounds = profile_bounds(p, m)
        raw = TaskMapping(rng.integers(0, n + 1, size=m), n)
        once = repair(raw, bounds)
        assert validate(once, m, n) == []
        assert np.all(once.counts() <= bounds)
        assert repair(once, bounds) == once

    def test_report(self):
        m = TaskMapping([0, 0, 0, 0], 2)
        fixed, rep = repair_with_report(m, [2, 2, 2])
        assert rep.changed == 2
        assert list(rep.counts_before) == [4, 0, 0]
        assert list(rep.counts_after) == list(fixed.counts())

    def test_large_instance_is_fast(self):
        import time

        rng = np.random.default_rng(0)
        p = make_profile(299)
        bounds = profile_bounds(p, 702)
        raw = TaskMapping(rng.integers(0, 300, size=702), 299)
        t0 = time.perf_counter()
        out = repair(raw, bounds)
        assert time.perf_counter() - t0 < 5
        assert validate(out) == []
