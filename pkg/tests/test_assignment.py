import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trinity.assignment import BRUTE_FORCE_LIMIT, brute_force_assignment, hungarian
from trinity.errors import InvalidCostError, ShapeError, SizeLimitError


def exhaustive_min(c):
    """Minimum over every injective gt -> pred map, independent of the library."""
    n_pred, n_gt = c.shape
    best = np.inf
    for rows in itertools.permutations(range(n_pred), n_gt):
        best = min(best, sum(c[r, g] for g, r in enumerate(rows)))
    return best


def check_valid(a, n_pred, n_gt, c):
    gts = [g for _, g in a.pairs]
    preds = [p for p, _ in a.pairs]
    assert sorted(gts) == list(range(n_gt))
    assert len(set(preds)) == len(preds) and all(0 <= p < n_pred for p in preds)
    assert a.total_cost == pytest.approx(sum(c[p, g] for p, g in a.pairs), abs=1e-9)


def test_identity_favouring():
    c = 1 - np.eye(3)
    a = hungarian(c)
    assert set(a.pairs) == {(0, 0), (1, 1), (2, 2)}
    assert a.total_cost == 0.0


def test_no_ground_truth():
    a = hungarian(np.zeros((4, 0)))
    assert a.pairs == () and a.total_cost == 0.0
    assert hungarian(np.zeros((0, 0))).pairs == ()


def test_brute_force_small_cases():
    assert brute_force_assignment([[5.0]]).total_cost == 5.0
    a = brute_force_assignment([[1, 2], [2, 1]])
    assert set(a.pairs) == {(0, 0), (1, 1)} and a.total_cost == 2


def test_hand_rectangular_case():
    # three slots, two regions; slot 2 fits region 0 best, slot 0 fits region 1
    c = np.array([[0.9, 0.1], [0.5, 0.6], [0.2, 0.8]])
    a = hungarian(c)
    assert a.pred_for_gt() == {0: 2, 1: 0}
    assert a.total_cost == pytest.approx(0.3)


@pytest.mark.parametrize("shape", [(6, 6), (7, 4), (7, 7), (5, 1), (3, 2)])
def test_matches_exhaustive_minimum(shape):
    for seed in range(200):
        c = np.random.default_rng(seed).random(shape)
        a = hungarian(c)
        check_valid(a, *shape, c)
        assert a.total_cost == exhaustive_min(c)


def test_agrees_with_brute_force_on_integer_ties():
    # small integer costs produce many equal-cost optima
    for seed in range(300):
        r = np.random.default_rng(seed)
        n_pred = int(r.integers(1, 7))
        n_gt = int(r.integers(0, n_pred + 1))
        c = r.integers(0, 3, size=(n_pred, n_gt)).astype(float)
        assert hungarian(c).total_cost == brute_force_assignment(c).total_cost


def test_tie_break_prefers_low_prediction_index():
    a = hungarian(np.zeros((4, 2)))
    assert a.pairs == ((0, 0), (1, 1))
    b = hungarian(np.ones((5, 1)))
    assert b.pairs == ((0, 0),)


def test_deterministic():
    c = np.random.default_rng(1).integers(0, 2, size=(6, 5)).astype(float)
    assert hungarian(c) == hungarian(c.copy())


def test_errors():
    with pytest.raises(InvalidCostError):
        hungarian([[0.0, np.nan], [1.0, 2.0]])
    with pytest.raises(InvalidCostError):
        hungarian([[0.0, np.inf], [1.0, 2.0]])
    with pytest.raises(ShapeError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(SizeLimitError):
        brute_force_assignment(np.zeros((BRUTE_FORCE_LIMIT + 1, 2)))


costs = st.integers(1, 6).flatmap(
    lambda n: st.integers(0, n).flatmap(
        lambda m: st.lists(st.floats(-10, 10, allow_nan=False), min_size=n * m, max_size=n * m).map(
            lambda v: np.array(v, dtype=float).reshape(n, m))))


@settings(max_examples=150, deadline=None)
@given(costs, st.randoms(use_true_random=False))
def test_row_permutation_equivariance(c, rnd):
    perm = list(range(c.shape[0]))
    rnd.shuffle(perm)
    a = hungarian(c)
    b = hungarian(c[perm])
    assert b.total_cost == pytest.approx(a.total_cost, abs=1e-9)
    # the permuted problem's pairing maps back to an optimal pairing of the original
    back = sum(c[perm[p], g] for p, g in b.pairs)
    assert back == pytest.approx(a.total_cost, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(costs, st.floats(-5, 5, allow_nan=False))
def test_shift_invariance(c, shift):
    c = np.round(c, 3)  # keep shifted entries exactly representable relative to the gaps
    a = hungarian(c)
    b = hungarian(c + shift)
    assert b.total_cost == pytest.approx(a.total_cost + c.shape[1] * shift, abs=1e-7)
    assert sum(c[p, g] for p, g in b.pairs) == pytest.approx(a.total_cost, abs=1e-7)


@settings(max_examples=100, deadline=None)
@given(costs)
def test_brute_force_is_a_valid_optimum(c):
    a = brute_force_assignment(c)
    check_valid(a, *c.shape, c)
    assert a.total_cost == pytest.approx(exhaustive_min(c) if c.shape[1] else 0.0, abs=1e-9)


def test_shift_keeps_pairing_on_generic_matrices():
    for seed in range(100):
        c = np.random.default_rng(seed).random((6, 4))
        assert hungarian(c + 3.0).pairs == hungarian(c).pairs
