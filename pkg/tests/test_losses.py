import itertools

import numpy as np
import pytest

from surt import losses
from surt.errors import BadMatrix
from surt.losses import (
    IDENTITY,
    SWAPPED,
    assignment_accuracy,
    assignment_correct,
    heat_loss,
    pit_loss_2ch,
    pit_loss_lsa,
)


def table_loss(table):
    """channel_loss stub reading a 2x2 cost table: rows refs, cols channels."""

    def fn(y, ch):
        return table[y][ch]

    return fn


class TestFixedAssignment:
    def test_diagonal_sum(self):
        fn = table_loss([[1.0, 0.5], [0.4, 2.0]])
        assert heat_loss(fn, 0, 1, 0, 1) == pytest.approx(3.0)

    def test_identical_channels_double(self):
        fn = table_loss([[1.3, 1.3], [1.3, 1.3]])
        assert heat_loss(fn, 0, 1, 0, 0) == pytest.approx(2.6)


class TestPermutationInvariant:
    def test_prefers_cheaper_swap(self):
        fn = table_loss([[1.0, 0.5], [0.4, 2.0]])
        value, perm = pit_loss_2ch(fn, 0, 1, 0, 1)
        assert value == pytest.approx(0.9)
        assert perm == SWAPPED

    def test_channel_swap_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = rng.uniform(0.0, 3.0, size=(2, 2))
            fn = table_loss(t)
            v1, _ = pit_loss_2ch(fn, 0, 1, 0, 1)
            swapped = table_loss(t[:, ::-1])
            v2, _ = pit_loss_2ch(swapped, 0, 1, 0, 1)
            assert v1 == pytest.approx(v2)

    def test_never_exceeds_fixed_assignment(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            t = rng.uniform(0.0, 5.0, size=(2, 2))
            fn = table_loss(t)
            pit, perm = pit_loss_2ch(fn, 0, 1, 0, 1)
            fixed = heat_loss(fn, 0, 1, 0, 1)
            assert pit <= fixed + 1e-12
            if perm == IDENTITY:
                assert pit == pytest.approx(fixed)
            else:
                assert t[0][1] + t[1][0] < t[0][0] + t[1][1]

    def test_tie_breaks_to_identity(self):
        fn = table_loss([[1.0, 1.0], [1.0, 1.0]])
        _, perm = pit_loss_2ch(fn, 0, 1, 0, 1)
        assert perm == IDENTITY


class TestLinearSumAssignment:
    def test_single_entry(self):
        value, cols = pit_loss_lsa(np.array([[3.5]]))
        assert value == pytest.approx(3.5) and cols == (0,)

    def test_constructed_permutation_optimum(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            perm = rng.permutation(n)
            costs = np.ones((n, n))
            costs[np.arange(n), perm] = 0.0
            value, cols = pit_loss_lsa(costs)
            assert value == 0.0
            assert np.array_equal(cols, perm)

    def test_matches_factorial_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 8))
            costs = rng.uniform(0.0, 10.0, size=(n, n))
            value, cols = pit_loss_lsa(costs)
            brute = min(
                costs[np.arange(n), list(p)].sum()
                for p in itertools.permutations(range(n))
            )
            assert value == brute  # same summation order: exact equality

    def test_polynomial_scaling_sanity(self):
        import time

        rng = np.random.default_rng(4)
        big = rng.uniform(size=(200, 200))
        t0 = time.perf_counter()
        pit_loss_lsa(big)
        assert time.perf_counter() - t0 < 2.0

    def test_rejects_nonsquare(self):
        with pytest.raises(BadMatrix):
            pit_loss_lsa(np.zeros((2, 3)))
        with pytest.raises(BadMatrix):
            pit_loss_lsa(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestAssignmentAccuracy:
    def test_exact_match_correct(self):
        assert assignment_correct(([1, 2], [3]), ([1, 2], [3]))

    def test_swapped_incorrect(self):
        assert not assignment_correct(([3], [1, 2]), ([1, 2], [3]))

    def test_ties_count_correct(self):
        # identical channels cannot be told apart; the comparison is <=
        assert assignment_correct(([1, 2], [1, 2]), ([1, 2], [3]))

    def test_batch_fraction(self):
        pairs = [
            ((([1], [2])), (([1], [2]))),
            ((([2], [1])), (([1], [2]))),
        ]
        assert assignment_accuracy(pairs) == pytest.approx(0.5)

    def test_gradient_flows_through_winner_only(self):
        from surt import autograd as ag

        a = ag.leaf(np.array(2.0))
        b = ag.leaf(np.array(3.0))
        c = ag.leaf(np.array(0.25))
        d = ag.leaf(np.array(0.5))
        table = {(0, 0): a, (1, 1): b, (0, 1): c, (1, 0): d}
        value, perm = pit_loss_2ch(lambda y, ch: table[(y, ch)], 0, 1, 0, 1)
        assert perm == SWAPPED
        ag.backward(value)
        assert c.grad is not None and d.grad is not None
        assert a.grad is None and b.grad is None
