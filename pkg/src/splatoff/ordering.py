"""Microbatch ordering strategies and the Adam finalization schedule.

Reordering the views of a batch changes how much of each working set S_i
survives into S_{i+1}; the symmetric difference |S_i xor S_j| is exactly the
record traffic a transition costs, so minimizing an open Hamiltonian path over
that distance minimizes transfers. Exact search (Held-Karp) is provided as a
small-n oracle; production ordering uses nearest-neighbor construction plus
2-opt/3-opt local search under a time or move budget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .culling import SparsitySet
from .scene import CameraView

ORDER_STRATEGIES = ("random", "camera", "gscount", "tsp")

HELD_KARP_MAX_N = 15


@dataclass
class DistanceMatrix:
    """Pairwise symmetric-difference sizes |S_i xor S_j|."""

    m: np.ndarray  # (B,B) int64, zero diagonal, symmetric

    @property
    def n(self) -> int:
        return self.m.shape[0]


@dataclass
class Tour:
    """Open path over view indices; length has no return edge."""

    order: list[int]
    length: float


def tour_length(order: list[int] | np.ndarray, dm: DistanceMatrix) -> float:
    order = list(order)
    return float(sum(dm.m[order[i], order[i + 1]] for i in range(len(order) - 1)))


def distance_matrix(sets: list[SparsitySet]) -> DistanceMatrix:
    if not sets:
        raise ValueError("need at least one sparsity set")
    n_total = sets[0].n_total
    for s in sets:
        if s.n_total != n_total:
            raise ValueError("sparsity sets disagree on the Gaussian count")
    b = len(sets)
    m = np.zeros((b, b), dtype=np.int64)
    sizes = [s.size for s in sets]
    for i in range(b):
        for j in range(i + 1, b):
            inter = np.intersect1d(sets[i].indices, sets[j].indices, assume_unique=True).size
            m[i, j] = m[j, i] = sizes[i] + sizes[j] - 2 * inter
    return DistanceMatrix(m=m)


def nearest_neighbor_init(dm: DistanceMatrix, start: int) -> Tour:
    """Greedy chain from `start`, ties broken by lowest index."""
    n = dm.n
    if not (0 <= start < n):
        raise ValueError("start index out of range")
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = dm.m[order[-1]].astype(np.float64)
        row[visited] = np.inf
        nxt = int(np.argmin(row))  # argmin returns the lowest index on ties
        order.append(nxt)
        visited[nxt] = True
    return Tour(order=order, length=tour_length(order, dm))


def _two_opt_delta(order, m, i, j, n):
    """Length change from reversing order[i..j] on an open path."""
    a = order[i - 1] if i > 0 else -1
    b = order[j + 1] if j < n - 1 else -1
    delta = 0
    if a >= 0:
        delta += m[a, order[j]] - m[a, order[i]]
    if b >= 0:
        delta += m[order[i], b] - m[order[j], b]
    return delta


def _oropt_delta(order, m, i, seg, k, n):
    """Length change from moving segment order[i:i+seg] to sit after position k.

    k indexes the tour after removal; k == -1 prepends. Part of the 3-opt move
    class (three edges cut, segment relocated).
    """
    a = order[i - 1] if i > 0 else -1
    b = order[i + seg] if i + seg < n else -1
    s0, s1 = order[i], order[i + seg - 1]
    removed = 0.0
    if a >= 0:
        removed += m[a, s0]
    if b >= 0:
        removed += m[s1, b]
    bridged = m[a, b] if (a >= 0 and b >= 0) else 0.0

    rest = order[:i] + order[i + seg:]
    p = rest[k] if k >= 0 else -1
    q = rest[k + 1] if k + 1 < len(rest) else -1
    broken = m[p, q] if (p >= 0 and q >= 0) else 0.0
    added = 0.0
    if p >= 0:
        added += m[p, s0]
    if q >= 0:
        added += m[s1, q]
    return (bridged + added) - (removed + broken)


def local_search(
    tour: Tour,
    dm: DistanceMatrix,
    time_budget: float = 1e-3,
    seed: int = 0,
    max_moves: int | None = None,
) -> Tour:
    """First-improvement 2-opt and 3-opt (segment relocation) descent.

    Stops at a local optimum or when the budget runs out. The budget is
    wall-clock seconds by default; passing max_moves switches to a move-count
    budget, which makes the result deterministic for a given seed.
    """
    n = dm.n
    order = list(tour.order)
    if sorted(order) != list(range(n)):
        raise ValueError("tour is not a permutation")
    if n < 3:
        return Tour(order=order, length=tour_length(order, dm))

    m = dm.m
    rng = np.random.default_rng(seed)
    deadline = None if max_moves is not None else time.perf_counter() + time_budget
    moves_left = max_moves if max_moves is not None else -1

    def budget_ok():
        if moves_left >= 0:
            return True  # checked where moves are spent
        return time.perf_counter() < deadline

    improved = True
    while improved and budget_ok() and moves_left != 0:
        improved = False

        # 2-opt sweep over segment reversals, scanned in a seeded random order
        pairs = [(i, j) for i in range(n - 1) for j in range(i + 1, n)
                 if not (i == 0 and j == n - 1)]  # full reversal is a no-op
        rng.shuffle(pairs)
        for i, j in pairs:
            if moves_left == 0 or not budget_ok():
                break
            if _two_opt_delta(order, m, i, j, n) < 0:
                order[i:j + 1] = reversed(order[i:j + 1])
                improved = True
                if moves_left > 0:
                    moves_left -= 1

        # 3-opt relocation sweep: short segments re-homed anywhere
        cands = [(i, seg) for seg in (1, 2, 3) for i in range(n - seg + 1) if n - seg >= 2]
        rng.shuffle(cands)
        for i, seg in cands:
            if moves_left == 0 or not budget_ok():
                break
            best_k, best_delta = None, 0
            for k in range(-1, n - seg):
                if k == i - 1:  # reinsertion in place
                    continue
                delta = _oropt_delta(order, m, i, seg, k, n)
                if delta < best_delta:
                    best_k, best_delta = k, delta
                    break  # first improvement
            if best_k is not None:
                segment = order[i:i + seg]
                rest = order[:i] + order[i + seg:]
                order = rest[:best_k + 1] + segment + rest[best_k + 1:]
                improved = True
                if moves_left > 0:
                    moves_left -= 1

    return Tour(order=order, length=tour_length(order, dm))


def held_karp_exact(dm: DistanceMatrix) -> Tour:
    """Optimal open Hamiltonian path by subset DP; oracle for small instances."""
    n = dm.n
    if n > HELD_KARP_MAX_N:
        raise ValueError(f"held_karp_exact is capped at n <= {HELD_KARP_MAX_N}")
    if n == 1:
        return Tour(order=[0], length=0.0)

    m = dm.m.astype(np.float64)
    size = 1 << n
    dp = np.full((size, n), np.inf)
    parent = np.full((size, n), -1, dtype=np.int16)
    for i in range(n):
        dp[1 << i, i] = 0.0

    all_idx = np.arange(n)
    for mask in range(1, size):
        members = all_idx[(mask >> all_idx) & 1 == 1]
        finite = members[np.isfinite(dp[mask, members])]
        if finite.size == 0 or mask == size - 1:
            continue
        others = all_idx[(mask >> all_idx) & 1 == 0]
        # candidate costs for extending any finite `last` to each unvisited j
        cand = dp[mask, finite][:, None] + m[np.ix_(finite, others)]
        best = cand.argmin(axis=0)
        best_cost = cand[best, np.arange(others.size)]
        new_masks = mask | (1 << others)
        better = best_cost < dp[new_masks, others]
        dp[new_masks[better], others[better]] = best_cost[better]
        parent[new_masks[better], others[better]] = finite[best[better]]

    full = size - 1
    last = int(np.argmin(dp[full]))
    length = float(dp[full, last])
    order = [last]
    mask = full
    while parent[mask, order[-1]] >= 0:
        prev = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(prev)
    order.reverse()
    return Tour(order=order, length=length)


@dataclass
class FinalizationSchedule:
    """L_g per Gaussian and the preimage partition F_0..F_B.

    L_g is the last microbatch (1-based) whose working set contains g, or 0
    when no view in the batch touches g. After microbatch L_g retires g's
    gradient, its optimizer update may run immediately.
    """

    last_touch: np.ndarray  # (N,) int32
    f_sets: list[np.ndarray]  # f_sets[i] = sorted indices with last_touch == i

    @property
    def n_microbatches(self) -> int:
        return len(self.f_sets) - 1

    @property
    def n_total(self) -> int:
        return int(self.last_touch.size)


def finalization_schedule(ordered_sets: list[SparsitySet], n: int) -> FinalizationSchedule:
    """Compute L_g = max{ i : g in S_i } over sets already in execution order."""
    last_touch = np.zeros(n, dtype=np.int32)
    for i, s in enumerate(ordered_sets, start=1):
        if s.n_total != n:
            raise ValueError("sparsity set does not match the Gaussian count")
        last_touch[s.indices] = i  # later microbatches overwrite earlier ones
    f_sets = [np.nonzero(last_touch == i)[0].astype(np.uint32)
              for i in range(len(ordered_sets) + 1)]
    return FinalizationSchedule(last_touch=last_touch, f_sets=f_sets)


def order_views(
    sets: list[SparsitySet],
    strategy: str,
    views: list[CameraView],
    rng_seed: int = 0,
    budget: float = 1e-3,
    max_moves: int | None = None,
    aabb: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[int]:
    """Permutation of batch positions under one of the four strategies.

    random: seeded shuffle. camera: sort camera centers along the principal
    (longest) axis -- of the scene box when given, else of the camera cloud.
    gscount: working-set size descending, view id breaking ties. tsp:
    nearest-neighbor from a seeded start, then local search.
    """
    b = len(sets)
    if b != len(views):
        raise ValueError("one camera view per sparsity set required")
    name = strategy.lower()
    if name not in ORDER_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {ORDER_STRATEGIES}")
    if b == 1:
        return [0]

    if name == "random":
        rng = np.random.default_rng(rng_seed)
        return [int(i) for i in rng.permutation(b)]

    if name == "camera":
        centers = np.stack([v.camera_center() for v in views])
        if aabb is not None:
            extent = np.asarray(aabb[1], dtype=np.float64) - np.asarray(aabb[0], dtype=np.float64)
        else:
            extent = centers.max(axis=0) - centers.min(axis=0)
        axis = int(np.argmax(extent))
        return [int(i) for i in np.argsort(centers[:, axis], kind="stable")]

    if name == "gscount":
        return sorted(range(b), key=lambda i: (-sets[i].size, sets[i].view_id))

    dm = distance_matrix(sets)
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(b))
    tour = nearest_neighbor_init(dm, start)
    tour = local_search(tour, dm, time_budget=budget, seed=rng_seed, max_moves=max_moves)
    return list(tour.order)
