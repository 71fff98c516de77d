"""Space-filling designs on [-1, 1]^d, optionally restricted to a region.

Membership predicates are vectorised: they take an ``(m, d)`` array of unit
points and return an ``(m,)`` boolean array.  They may be called from several
threads, so they must not mutate shared state.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

logger = logging.getLogger(__name__)

Membership = Callable[[np.ndarray], np.ndarray]

# candidate budget is oversample * n * REJECTION_BUDGET_FACTOR
REJECTION_BUDGET_FACTOR = 100


class EmptyRegionError(RuntimeError):
    """No candidate satisfied the membership predicate.

    In history matching this means the non-implausible region may be empty,
    which usually points at a problem with the simulator or the data.
    """

    def __init__(self, candidates: int):
        self.candidates = candidates
        super().__init__(
            f"no point out of {candidates} candidates satisfied the membership predicate; "
            "the non-implausible region may be empty (check the simulator, the observations "
            "and the uncertainty budget)"
        )


@dataclass
class DesignMatrix:
    points: np.ndarray
    seed: int
    requested: int = 0
    candidates: int = 0
    accepted: int = 0
    short: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size and (np.abs(self.points) > 1.0).any():
            raise ValueError("design points must lie in [-1, 1]^d")
        if not self.requested:
            self.requested = len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.candidates if self.candidates else float("nan")


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def strata(points: np.ndarray, n: int | None = None) -> np.ndarray:
    """Stratum index (0..n-1) of every coordinate for an n-point LHS."""
    points = np.atleast_2d(points)
    n = len(points) if n is None else n
    idx = np.floor((points + 1.0) * 0.5 * n).astype(int)
    return np.clip(idx, 0, n - 1)


def is_latin(points: np.ndarray) -> bool:
    s = strata(points)
    n = len(points)
    return all(np.array_equal(np.sort(s[:, k]), np.arange(n)) for k in range(s.shape[1]))


def min_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return math.inf
    return float(pdist(points).min())


def _lhs_array(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    perms = np.argsort(rng.random((d, n)), axis=1).T
    u = (perms + rng.random((n, d))) / n
    return np.clip(2.0 * u - 1.0, -1.0, 1.0)


def latin_hypercube(n: int, d: int, seed: int) -> DesignMatrix:
    if n < 1 or d < 1:
        raise ValueError("latin_hypercube needs n >= 1 and d >= 1")
    return DesignMatrix(_lhs_array(n, d, _rng(seed, 0)), seed=seed)


def maximin_improve(design: DesignMatrix, iterations: int, seed: int) -> DesignMatrix:
    """Coordinate swaps between two runs, kept when the minimum distance does not drop.

    Swapping within a column leaves every column's set of values intact, so
    Latin stratification survives.
    """
    pts = design.points.copy()
    n, d = pts.shape
    if iterations <= 0 or n < 3:
        # with two points every swap just relabels the pair
        return DesignMatrix(pts, seed=design.seed, requested=design.requested, meta=dict(design.meta))
    rng = _rng(seed, 1)
    best = min_distance(pts)
    for _ in range(iterations):
        k = rng.integers(d)
        i, j = rng.choice(n, size=2, replace=False)
        pts[[i, j], k] = pts[[j, i], k]
        trial = min_distance(pts)
        if trial >= best:
            best = trial
        else:
            pts[[i, j], k] = pts[[j, i], k]
    return DesignMatrix(pts, seed=design.seed, requested=design.requested, meta=dict(design.meta))


def space_filling(n: int, d: int, seed: int, iterations: int = 100) -> DesignMatrix:
    return maximin_improve(latin_hypercube(n, d, seed), iterations, seed)


def _farthest_point_subset(pool: np.ndarray, n: int) -> np.ndarray:
    if len(pool) <= n:
        return pool
    chosen = [0]
    dist = np.sum((pool - pool[0]) ** 2, axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((pool - pool[nxt]) ** 2, axis=1))
    return pool[np.sort(chosen)]


def constrained_design(
    n: int,
    membership: Membership,
    d: int,
    oversample: float = 2.0,
    seed: int = 0,
    batch_size: int = 4096,
) -> DesignMatrix:
    """Rejection-sample a space-filling design inside ``membership``.

    LHS candidate batches are screened until ``oversample * n`` members are
    collected or the ``oversample * n * 100`` candidate budget runs out; the
    design is then thinned to ``n`` points by farthest-point selection.
    """
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    want = int(math.ceil(oversample * n))
    budget = int(math.ceil(oversample * n * REJECTION_BUDGET_FACTOR))
    batch = max(1, min(budget, max(want, batch_size)))

    accepted: list[np.ndarray] = []
    n_acc = 0
    seen = 0
    b = 0
    while n_acc < want and seen < budget:
        m = min(batch, budget - seen)
        cand = _lhs_array(m, d, _rng(seed, 2, b))
        keep = np.asarray(membership(cand), dtype=bool)
        if keep.shape != (m,):
            raise ValueError("membership predicate must return one boolean per candidate row")
        accepted.append(cand[keep])
        n_acc += int(keep.sum())
        seen += m
        b += 1

    if n_acc == 0:
        raise EmptyRegionError(seen)
    pool = np.concatenate(accepted)[:want]
    pts = _farthest_point_subset(pool, n)
    short = len(pts) < n
    if short:
        warnings.warn(
            f"constrained design: only {len(pts)} of {n} points found in {seen} candidates "
            f"(acceptance rate {n_acc / seen:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return DesignMatrix(pts, seed=seed, requested=n, candidates=seen, accepted=n_acc, short=short)
