"""Compiled inner loop of the sortation simulator.

All state lives in flat numpy arrays; cells are flat indices ``row * width + col``.
Targets (workstations first, then endpoints) are indexed into a distance
table ``dist[target, cell]``. Randomness comes from numba's internal
generator, reseeded at the start of every run.
"""
import math

import numpy as np
from numba import njit

EV_PICKUP = 0
EV_DROP_SORTED = 1
EV_DROP_RECIRC = 2
EV_CLOSE = 3
EV_REOPEN = 4
EV_RETARGET = 5


@njit(cache=True)
def seed_rng(seed):
    np.random.seed(seed)


@njit(cache=True)
def closed_time(xc, s_quad, s_const, eps):
    return int(math.floor(s_quad * xc * xc + s_const + eps))


@njit(cache=True)
def better(score, d, cell, best_score, best_d, best_cell):
    if best_cell < 0:
        return True
    if score != best_score:
        return score < best_score
    if d != best_d:
        return d < best_d
    return cell < best_cell


@njit(cache=True)
def ta_pick(cell, cands, n_cands, en_route, alpha, dist, target_cell):
    """Index into ``cands`` minimising dist + alpha * en_route (ties: dist, cell)."""
    best = -1
    best_score = 0.0
    best_d = 0
    best_cell = -1
    for k in range(n_cands):
        g = cands[k]
        d = dist[g, cell]
        score = d + alpha * en_route[g]
        if better(score, d, target_cell[g], best_score, best_d, best_cell):
            best = k
            best_score = score
            best_d = d
            best_cell = target_cell[g]
    return best


@njit(cache=True)
def pick_drop(cell, dest, recirc, dest_ptr, dest_chutes, ep_ptr, ep_targets, closed,
              en_route, alpha, dist, target_cell):
    """Best (endpoint target, chute) for a package of ``dest`` seen from ``cell``.

    Candidates are endpoints around OPEN chutes of the destination, falling
    back to the recirculation chutes when all of them are CLOSED.
    """
    for pass_dest in (dest, recirc):
        best_t = -1
        best_c = -1
        best_score = 0.0
        best_d = 0
        best_cell = -1
        for k in range(dest_ptr[pass_dest], dest_ptr[pass_dest + 1]):
            c = dest_chutes[k]
            if closed[c]:
                continue
            for q in range(ep_ptr[c], ep_ptr[c + 1]):
                g = ep_targets[q]
                d = dist[g, cell]
                score = d + alpha * en_route[g]
                if better(score, d, target_cell[g], best_score, best_d, best_cell):
                    best_t = g
                    best_c = c
                    best_score = score
                    best_d = d
                    best_cell = target_cell[g]
        if best_t >= 0:
            return best_t, best_c
    return -1, -1


@njit(cache=True)
def _fill_candidates(i, pos, goal, dist, neighbors, cand_row):
    """Stay + neighbours of robot ``i``, ascending by distance to goal, random ties."""
    v = pos[i]
    key = np.empty(5, dtype=np.float64)
    n = 0
    gi = goal[i]
    width = neighbors.shape[1]
    for q in range(width + 1):
        c = v if q == width else neighbors[v, q]
        if c < 0:
            continue
        k = dist[gi, c] + 0.5 * np.random.random()
        p = n
        while p > 0 and key[p - 1] > k:
            key[p] = key[p - 1]
            cand_row[p] = cand_row[p - 1]
            p -= 1
        key[p] = k
        cand_row[p] = c
        n += 1
    return n


@njit(cache=True)
def _pibt(root, pos, nxt, occ_now, occ_next, goal, dist, neighbors,
          st_agent, st_pusher, st_cand, st_n, st_q):
    """Priority inheritance with backtracking from ``root``, using an explicit stack.

    A frame tries its robot's candidate cells in order; reserving a cell held
    by an unplanned robot pushes a child frame for that robot (inheritance).
    A failed child makes the parent try its next candidate (backtracking); a
    frame out of candidates stays put and reports failure.
    """
    depth = 0
    st_agent[0] = root
    st_pusher[0] = -1
    st_n[0] = _fill_candidates(root, pos, goal, dist, neighbors, st_cand[0])
    st_q[0] = 0
    ret = -1  # -1: fresh frame, 0: child failed, 1: child succeeded
    while depth >= 0:
        i = st_agent[depth]
        j = st_pusher[depth]
        if ret == 1:
            depth -= 1
            continue
        if ret == 0:
            st_q[depth] += 1
        ret = -1
        pushed = False
        while st_q[depth] < st_n[depth]:
            c = st_cand[depth, st_q[depth]]
            if occ_next[c] != -1 or (j != -1 and pos[j] == c):
                st_q[depth] += 1
                continue
            occ_next[c] = i
            nxt[i] = c
            k = occ_now[c]
            if k != -1 and k != i and nxt[k] == -1:
                depth += 1
                st_agent[depth] = k
                st_pusher[depth] = i
                st_n[depth] = _fill_candidates(k, pos, goal, dist, neighbors, st_cand[depth])
                st_q[depth] = 0
                pushed = True
            else:
                ret = 1
            break
        if pushed:
            continue
        if ret == 1:
            depth -= 1
            continue
        v = pos[i]
        nxt[i] = v
        occ_next[v] = i
        ret = 0
        depth -= 1


@njit(cache=True)
def plan_step(pos, goal, prio, dist, neighbors, occ_now, occ_next, nxt):
    """One PIBT joint move. ``occ_now`` must mirror ``pos``; fills ``nxt``."""
    n = pos.shape[0]
    st_agent = np.empty(n + 1, dtype=np.int64)
    st_pusher = np.empty(n + 1, dtype=np.int64)
    st_cand = np.empty((n + 1, 5), dtype=np.int64)
    st_n = np.empty(n + 1, dtype=np.int64)
    st_q = np.empty(n + 1, dtype=np.int64)
    for i in range(n):
        nxt[i] = -1
    order = np.argsort(-prio)
    for q in range(n):
        i = order[q]
        if nxt[i] == -1:
            _pibt(i, pos, nxt, occ_now, occ_next, goal, dist, neighbors,
                  st_agent, st_pusher, st_cand, st_n, st_q)
    for i in range(n):
        occ_next[nxt[i]] = -1


@njit(cache=True)
def count_conflicts(pos, nxt, occ_now, seen):
    """Vertex plus swap conflicts of a joint move (independent of the planner)."""
    bad = 0
    n = pos.shape[0]
    for i in range(n):
        c = nxt[i]
        if seen[c] != -1:
            bad += 1
        seen[c] = i
        k = occ_now[c]
        if k != -1 and k != i and nxt[k] == pos[i]:
            bad += 1
    for i in range(n):
        seen[nxt[i]] = -1
    return bad


@njit(cache=True)
def simulate(
    neighbors, dist, target_cell, n_ws, ep_ptr, ep_targets, dest_ptr, dest_chutes,
    chute_dest, chute_xc, cum_probs, start_cells,
    n_agents, horizon, alpha, capacity, beta, s_quad, s_const, seed, log,
):
    seed_rng(seed)
    n_cells = neighbors.shape[0]
    n_chutes = chute_dest.shape[0]
    n_dest = cum_probs.shape[0]
    recirc = n_dest

    ev_cap = 3 * n_agents * horizon + 1 if log else 1
    ev = np.zeros((ev_cap, 5), dtype=np.int64)  # t, robot, kind, cell, chute
    n_ev = 0
    pos_log = np.zeros((horizon + 1 if log else 1, max(n_agents, 1)), dtype=np.int64)

    closed = np.zeros(n_chutes, dtype=np.bool_)
    fill = np.zeros(n_chutes, dtype=np.int64)
    reopen_at = np.zeros(n_chutes, dtype=np.int64)
    drops = np.zeros(n_chutes, dtype=np.int64)
    en_route = np.zeros(target_cell.shape[0], dtype=np.int64)

    pos = np.empty(n_agents, dtype=np.int64)
    goal = np.empty(n_agents, dtype=np.int64)
    carrying = np.full(n_agents, -1, dtype=np.int64)
    pkg_recirc = np.zeros(n_agents, dtype=np.int64)
    intended = np.full(n_agents, -1, dtype=np.int64)
    prio = np.empty(n_agents, dtype=np.float64)
    eps = np.empty(n_agents, dtype=np.float64)
    occ_now = np.full(n_cells, -1, dtype=np.int64)
    occ_next = np.full(n_cells, -1, dtype=np.int64)
    seen = np.full(n_cells, -1, dtype=np.int64)
    nxt = np.empty(n_agents, dtype=np.int64)

    # recirculated packages waiting at the workstations (FIFO)
    q_dest = np.empty(n_agents * horizon + 1, dtype=np.int64)
    q_cnt = np.empty(n_agents * horizon + 1, dtype=np.int64)
    q_head = 0
    q_tail = 0

    ws_targets = np.arange(n_ws)
    perm = np.random.permutation(start_cells.shape[0])
    for i in range(n_agents):
        pos[i] = start_cells[perm[i]]
        occ_now[pos[i]] = i
        eps[i] = i / (n_agents + 1.0)
        prio[i] = eps[i]
    for i in range(n_agents):
        k = ta_pick(pos[i], ws_targets, n_ws, en_route, alpha, dist, target_cell)
        goal[i] = k
        en_route[k] += 1
    if log:
        for i in range(n_agents):
            pos_log[0, i] = pos[i]

    sorted_count = 0
    recirc_count = 0
    closures = 0
    conflicts = 0

    for t in range(horizon):
        for c in range(n_chutes):
            if closed[c] and reopen_at[c] <= t:
                closed[c] = False
                if log:
                    ev[n_ev, 0] = t; ev[n_ev, 1] = -1; ev[n_ev, 2] = EV_REOPEN; ev[n_ev, 3] = -1; ev[n_ev, 4] = c
                    n_ev += 1

        for i in range(n_agents):
            cell = pos[i]
            if cell != target_cell[goal[i]]:
                continue
            if carrying[i] < 0:
                # pickup at a workstation
                if q_head < q_tail:
                    carrying[i] = q_dest[q_head]
                    pkg_recirc[i] = q_cnt[q_head]
                    q_head += 1
                else:
                    u = np.random.random()
                    d = np.searchsorted(cum_probs, u, side="right")
                    carrying[i] = min(d, n_dest - 1)
                    pkg_recirc[i] = 0
                en_route[goal[i]] -= 1
                g, c = pick_drop(cell, carrying[i], recirc, dest_ptr, dest_chutes, ep_ptr, ep_targets,
                                 closed, en_route, alpha, dist, target_cell)
                goal[i] = g
                intended[i] = c
                en_route[g] += 1
                prio[i] = eps[i]
                if log:
                    ev[n_ev, 0] = t; ev[n_ev, 1] = i; ev[n_ev, 2] = EV_PICKUP; ev[n_ev, 3] = cell; ev[n_ev, 4] = carrying[i]
                    n_ev += 1
                continue

            # at a drop endpoint
            en_route[goal[i]] -= 1
            c = intended[i]
            if closed[c]:
                g, c = pick_drop(cell, carrying[i], recirc, dest_ptr, dest_chutes, ep_ptr, ep_targets,
                                 closed, en_route, alpha, dist, target_cell)
                if log:
                    ev[n_ev, 0] = t; ev[n_ev, 1] = i; ev[n_ev, 2] = EV_RETARGET; ev[n_ev, 3] = cell; ev[n_ev, 4] = c
                    n_ev += 1
                if target_cell[g] != cell:
                    goal[i] = g
                    intended[i] = c
                    en_route[g] += 1
                    continue
            drops[c] += 1
            if chute_dest[c] == recirc:
                recirc_count += 1
                q_dest[q_tail] = carrying[i]
                q_cnt[q_tail] = pkg_recirc[i] + 1
                q_tail += 1
                kind = EV_DROP_RECIRC
            else:
                sorted_count += 1
                fill[c] += 1
                kind = EV_DROP_SORTED
            if log:
                ev[n_ev, 0] = t; ev[n_ev, 1] = i; ev[n_ev, 2] = kind; ev[n_ev, 3] = cell; ev[n_ev, 4] = c
                n_ev += 1
            if kind == EV_DROP_SORTED and fill[c] >= capacity:
                extra = np.random.exponential(beta) if beta > 0 else 0.0
                closed[c] = True
                reopen_at[c] = t + closed_time(chute_xc[c], s_quad, s_const, extra)
                fill[c] = 0
                closures += 1
                if log:
                    ev[n_ev, 0] = t; ev[n_ev, 1] = -1; ev[n_ev, 2] = EV_CLOSE; ev[n_ev, 3] = reopen_at[c]; ev[n_ev, 4] = c
                    n_ev += 1
            carrying[i] = -1
            intended[i] = -1
            k = ta_pick(cell, ws_targets, n_ws, en_route, alpha, dist, target_cell)
            goal[i] = k
            en_route[k] += 1
            prio[i] = eps[i]

        if n_agents > 0:
            plan_step(pos, goal, prio, dist, neighbors, occ_now, occ_next, nxt)
            conflicts += count_conflicts(pos, nxt, occ_now, seen)
            for i in range(n_agents):
                occ_now[pos[i]] = -1
            for i in range(n_agents):
                pos[i] = nxt[i]
                occ_now[pos[i]] = i
                if pos[i] != target_cell[goal[i]]:
                    prio[i] += 1.0
        if log:
            for i in range(n_agents):
                pos_log[t + 1, i] = pos[i]

    return sorted_count, recirc_count, closures, conflicts, drops, ev[:n_ev], pos_log
