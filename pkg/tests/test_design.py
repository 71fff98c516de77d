import numpy as np
import pytest

from histmatch.design import (
    EmptyRegionError,
    constrained_design,
    is_latin,
    latin_hypercube,
    maximin_improve,
    min_distance,
    strata,
)


def test_single_point():
    d = latin_hypercube(1, 3, seed=0)
    assert d.points.shape == (1, 3)
    assert np.all(np.abs(d.points) <= 1)


def test_strata_are_permutations():
    d = latin_hypercube(10, 2, seed=4)
    s = strata(d.points)
    for k in range(2):
        assert sorted(s[:, k]) == list(range(10))


def test_deterministic():
    a = latin_hypercube(20, 4, seed=9).points
    b = latin_hypercube(20, 4, seed=9).points
    assert np.array_equal(a, b)
    assert not np.array_equal(a, latin_hypercube(20, 4, seed=10).points)


def test_maximin_zero_iterations_is_identity():
    d = latin_hypercube(15, 3, seed=1)
    assert np.array_equal(maximin_improve(d, 0, seed=2).points, d.points)


def test_maximin_never_worse_and_stays_latin():
    d = latin_hypercube(30, 4, seed=1)
    base = min_distance(d.points)
    for it in (10, 50, 200):
        out = maximin_improve(d, it, seed=2)
        assert is_latin(out.points)
        assert min_distance(out.points) >= base


def test_two_points_in_opposite_strata():
    # with n=2 every stratum permutation puts the points in different halves
    for seed in range(10):
        out = maximin_improve(latin_hypercube(2, 1, seed), 50, seed)
        assert sorted(strata(out.points)[:, 0]) == [0, 1]
        assert out.points[0, 0] * out.points[1, 0] <= 0


def test_always_true_membership():
    d = constrained_design(25, lambda X: np.ones(len(X), bool), 3, seed=5)
    assert d.points.shape == (25, 3)


def test_predicate_respected():
    d = constrained_design(40, lambda X: X[:, 0] > 0, 4, seed=5)
    assert len(d) == 40
    assert np.all(d.points[:, 0] > 0)


def test_empty_region():
    with pytest.raises(EmptyRegionError):
        constrained_design(5, lambda X: np.zeros(len(X), bool), 2, oversample=1.0, seed=0)


def test_oversample_validation():
    with pytest.raises(ValueError):
        constrained_design(5, lambda X: np.ones(len(X), bool), 2, oversample=0.5)


def test_small_region_acceptance_matches_grid_volume():
    # a square holding 1.6% of [-1,1]^2: (2 * half)^2 = 0.016 * 4
    half = np.sqrt(0.016)
    def member(X):
        return np.all(np.abs(X[:, :2] - 0.3) < half, axis=1)
    g = np.linspace(-1, 1, 2001)
    gx, gy = np.meshgrid(0.5 * (g[1:] + g[:-1]), 0.5 * (g[1:] + g[:-1]))
    brute = member(np.column_stack([gx.ravel(), gy.ravel()])).mean()
    d = constrained_design(50, member, 3, oversample=2.0, seed=11)
    rate = d.accepted / d.candidates
    se = np.sqrt(brute * (1 - brute) / d.candidates)
    assert abs(rate - brute) <= 3 * se
    assert np.all(member(d.points))


def test_short_design_warns():
    # region so small that the candidate budget yields fewer points than asked
    with pytest.warns(RuntimeWarning, match="only"):
        d = constrained_design(50, lambda X: X[:, 0] > 0.999, 2, oversample=1.0, seed=3)
    assert d.short and 0 < len(d) < 50
