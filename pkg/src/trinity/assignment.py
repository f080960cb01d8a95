"""Minimum-cost bipartite assignment between prediction slots and ground-truth regions.

Cost matrices are laid out ``[n_pred, n_gt]`` with ``n_pred >= n_gt``; every
ground-truth column is matched to a distinct prediction row.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidCostError, ShapeError, SizeLimitError

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (pred_index, gt_index), ordered by gt_index
    total_cost: float

    def pred_for_gt(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}

    def __len__(self):
        return len(self.pairs)


def _check(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        if c.size == 0:
            return c.reshape(c.shape[0] if c.ndim == 1 else 0, 0)
        raise ShapeError(f"cost matrix must be 2-D, got shape {c.shape}")
    if np.isnan(c).any():
        raise InvalidCostError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise InvalidCostError("cost matrix contains infinite entries")
    n_pred, n_gt = c.shape
    if n_gt > n_pred:
        raise ShapeError(f"{n_gt} ground-truth columns exceed {n_pred} prediction rows")
    return c


def _total(c: np.ndarray, pairs) -> float:
    total = 0.0
    for p, g in pairs:
        total += float(c[p, g])
    return total


def hungarian(costs) -> Assignment:
    """Globally optimal assignment in O(n_gt² · n_pred).

    Shortest-augmenting-path Hungarian method with row/column potentials. The
    ground-truth side plays the rows; the surplus prediction slots behave like
    zero-cost dummy rows of a padded square problem, so they never appear in
    the output. Ties resolve towards the lowest prediction index encountered
    during each augmentation, which makes the result deterministic.
    """
    c = _check(costs)
    n_pred, n_gt = c.shape
    if n_gt == 0:
        return Assignment((), 0.0)
    a = c.T  # rows: gt, columns: pred
    n, m = n_gt, n_pred
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # first minimum: lowest index wins ties
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j])
    pairs.sort(key=lambda pg: pg[1])
    return Assignment(tuple(pairs), _total(c, pairs))


def brute_force_assignment(costs) -> Assignment:
    """Exact minimum by enumerating every injective gt -> pred map.

    The first optimum in lexicographic order of the per-gt prediction indices
    is kept, so lower prediction indices win ties.
    """
    c = _check(costs)
    n_pred, n_gt = c.shape
    if n_pred > BRUTE_FORCE_LIMIT:
        raise SizeLimitError(f"brute force limited to {BRUTE_FORCE_LIMIT} prediction rows, got {n_pred}")
    best = None
    best_cost = np.inf
    for perm in itertools.permutations(range(n_pred), n_gt):
        pairs = [(p, g) for g, p in enumerate(perm)]
        total = _total(c, pairs)
        if total < best_cost:
            best, best_cost = pairs, total
    if best is None:
        return Assignment((), 0.0)
    return Assignment(tuple(best), best_cost)
