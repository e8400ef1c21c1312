"""Hot inner loops, each with a numba loop body and a vectorised numpy twin.

The public functions dispatch on :func:`rdpfusion._accel.use_numba`; the
``*_loop`` and ``*_numpy`` variants are exported so tests and the benchmark
can compare them directly.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit, use_numba

AUDIT_GUARD = 1e-12


# --------------------------------------------------------------------------
# trajectory audit


def _audit_loop_py(gains, budgets, alpha, d, guard):
    n, k_steps, m = gains.shape
    totals = np.zeros(n)
    first_bad = np.full(n, -1, dtype=np.int64)
    for b in range(n):
        spent = 0.0
        for k in range(k_steps):
            g = 0.0
            for i in range(m):
                a = abs(gains[b, k, i])
                if a > g:
                    g = a
            loss = 0.5 * alpha * d * g * g
            # compare in loss units: near exhaustion the square root of the
            # clip bound would turn 1e-16 rounding into 1e-8 of gain
            remaining = budgets[b] - spent
            if first_bad[b] < 0 and (loss > remaining + guard or g != g):
                first_bad[b] = k
            spent += loss
        totals[b] = spent
    return totals, first_bad


_audit_loop = njit(_audit_loop_py)


def audit_gains_numpy(gains, budgets, alpha, d, guard=AUDIT_GUARD):
    gains = np.asarray(gains, dtype=np.float64)
    gb = np.max(np.abs(gains), axis=2)
    losses = 0.5 * alpha * d * gb * gb
    spent_before = np.concatenate([np.zeros((gains.shape[0], 1)), np.cumsum(losses, axis=1)[:, :-1]], axis=1)
    remaining = np.asarray(budgets, dtype=np.float64)[:, None] - spent_before
    bad = (losses > remaining + guard) | np.isnan(gb)
    first_bad = np.where(bad.any(axis=1), bad.argmax(axis=1), -1).astype(np.int64)
    # sequential sum so totals match the loop bit for bit
    totals = np.zeros(gains.shape[0])
    for k in range(losses.shape[1]):
        totals = totals + losses[:, k]
    return totals, first_bad


def audit_gains_loop(gains, budgets, alpha, d, guard=AUDIT_GUARD):
    return _audit_loop(
        np.ascontiguousarray(gains, dtype=np.float64),
        np.ascontiguousarray(budgets, dtype=np.float64),
        float(alpha),
        float(d),
        float(guard),
    )


def audit_gains(gains, budgets, alpha, d, guard=AUDIT_GUARD):
    """Recompute per-episode leakage from clipped gains of shape (B, K, m).

    Returns ``(totals, first_bad)`` where ``first_bad[b]`` is the first step
    whose loss exceeds the recomputed remaining budget by more than
    ``guard`` (equivalently, whose gain breaks the clip bound), or -1.
    """
    if use_numba():
        return audit_gains_loop(gains, budgets, alpha, d, guard)
    return audit_gains_numpy(gains, budgets, alpha, d, guard)


# --------------------------------------------------------------------------
# vehicle counting


def _count_loop_py(positions, lo, hi):
    t_steps, v = positions.shape
    out = np.zeros(t_steps, dtype=np.int64)
    for t in range(t_steps):
        c = 0
        for j in range(v):
            p = positions[t, j]
            if p >= lo and p < hi:  # NaN compares false
                c += 1
        out[t] = c
    return out


_count_loop = njit(_count_loop_py)


def count_in_segment_numpy(positions, lo, hi):
    p = np.asarray(positions, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.sum((p >= lo) & (p < hi), axis=1).astype(np.int64)


def count_in_segment_loop(positions, lo, hi):
    return _count_loop(np.ascontiguousarray(positions, dtype=np.float64), float(lo), float(hi))


def count_in_segment(positions, lo, hi):
    """Per-row count of finite positions in ``[lo, hi)``; NaN marks absence."""
    if use_numba():
        return count_in_segment_loop(positions, lo, hi)
    return count_in_segment_numpy(positions, lo, hi)


# --------------------------------------------------------------------------
# reporter slot assignment


def _slots_loop_py(inside, m):
    k_steps, v = inside.shape
    slots = np.full((k_steps, m), -1, dtype=np.int64)
    # state: 0 never seen, 1 holding a slot, 2 finished or dropped
    state = np.zeros(v, dtype=np.int64)
    current = np.full(m, -1, dtype=np.int64)
    for k in range(k_steps):
        for s in range(m):
            j = current[s]
            if j >= 0 and not inside[k, j]:
                current[s] = -1
                state[j] = 2
        for j in range(v):
            if inside[k, j] and state[j] == 0:
                placed = False
                for s in range(m):
                    if current[s] < 0:
                        current[s] = j
                        state[j] = 1
                        placed = True
                        break
                if not placed:
                    state[j] = 2
        for s in range(m):
            slots[k, s] = current[s]
    return slots


_slots_loop = njit(_slots_loop_py)


def assign_slots_loop(inside, m):
    return _slots_loop(np.ascontiguousarray(inside, dtype=np.bool_), int(m))


def assign_slots_numpy(inside, m):
    """Same rule as the loop, with per-step vector bookkeeping."""
    inside = np.asarray(inside, dtype=bool)
    k_steps, v = inside.shape
    slots = np.full((k_steps, m), -1, dtype=np.int64)
    if v == 0:
        return slots
    state = np.zeros(v, dtype=np.int64)
    current = np.full(m, -1, dtype=np.int64)
    for k in range(k_steps):
        held = current >= 0
        gone = held & ~inside[k, np.where(held, current, 0)]
        state[current[gone]] = 2
        current[gone] = -1
        entrants = np.flatnonzero(inside[k] & (state == 0))
        free = np.flatnonzero(current < 0)
        n = min(len(free), len(entrants))
        current[free[:n]] = entrants[:n]
        state[entrants[:n]] = 1
        state[entrants[n:]] = 2
        slots[k] = current
    return slots


def assign_slots(inside, m):
    """Map vehicles to ``m`` reporting slots over an episode.

    ``inside`` is (K, V) with vehicle columns in tie-break order. A vehicle
    takes the lowest free slot on entry, keeps it while inside, frees it on
    exit and never reports again; entrants finding no free slot are dropped
    for the rest of the episode. Returns (K, m) column indices, -1 = empty.
    """
    if use_numba():
        return assign_slots_loop(inside, m)
    return assign_slots_numpy(inside, m)


# --------------------------------------------------------------------------
# Monte Carlo rollout of a tabular policy tree


def _tree_mc_loop_py(u, prior_cdf, trans_cdf, obs_cdf, menu_cdf, choice, estimate, cost, n_y, n_z, level_offset):
    n, k_steps, _ = u.shape
    m = obs_cdf.shape[0]
    n_x = prior_cdf.shape[0]
    out = np.zeros(n)
    for s in range(n):
        x = 0
        while x < n_x - 1 and u[s, 0, 0] > prior_cdf[x]:
            x += 1
        prefix = 0
        total = 0.0
        for k in range(k_steps):
            if k > 0:
                nx = 0
                while nx < n_x - 1 and u[s, k, 0] > trans_cdf[x, nx]:
                    nx += 1
                x = nx
            y = 0
            for i in range(m):
                yi = 0
                while yi < n_y - 1 and u[s, k, 1 + i] > obs_cdf[i, x, yi]:
                    yi += 1
                y = y * n_y + yi
            node = level_offset[k] + prefix
            c = choice[node]
            z = 0
            while z < n_z - 1 and u[s, k, 1 + m] > menu_cdf[c, y, z]:
                z += 1
            total += cost[x, estimate[node, z]]
            prefix = prefix * n_z + z
        out[s] = total
    return out


_tree_mc_loop = njit(_tree_mc_loop_py)


def _inverse_cdf(cdf_rows, u):
    # cdf_rows (..., n), u (...) -> index of first cdf >= u, capped at n-1
    idx = np.sum(u[..., None] > cdf_rows, axis=-1)
    return np.minimum(idx, cdf_rows.shape[-1] - 1)


def tree_mc_numpy(u, prior_cdf, trans_cdf, obs_cdf, menu_cdf, choice, estimate, cost, n_y, n_z, level_offset):
    n, k_steps, _ = u.shape
    m = obs_cdf.shape[0]
    x = _inverse_cdf(np.broadcast_to(prior_cdf, (n, prior_cdf.shape[0])), u[:, 0, 0])
    prefix = np.zeros(n, dtype=np.int64)
    total = np.zeros(n)
    for k in range(k_steps):
        if k > 0:
            x = _inverse_cdf(trans_cdf[x], u[:, k, 0])
        y = np.zeros(n, dtype=np.int64)
        for i in range(m):
            y = y * n_y + _inverse_cdf(obs_cdf[i, x], u[:, k, 1 + i])
        node = level_offset[k] + prefix
        c = choice[node]
        z = _inverse_cdf(menu_cdf[c, y], u[:, k, 1 + m])
        total = total + cost[x, estimate[node, z]]
        prefix = prefix * n_z + z
    return total


def tree_mc_loop(*args):
    return _tree_mc_loop(*args)


def tree_mc(*args):
    """Per-sample cumulative cost of a policy tree driven by uniforms ``u``.

    ``u`` has shape (N, K, 2 + m): column 0 drives the state draw, 1..m the
    per-sensor measurements, m+1 the released symbol.
    """
    if use_numba():
        return tree_mc_loop(*args)
    return tree_mc_numpy(*args)
