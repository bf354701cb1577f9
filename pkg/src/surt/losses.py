"""Session-level channel-assignment losses and diagnostics.

Channel losses are supplied as a callable ``channel_loss(labels, channel)``
so the same machinery serves tape nodes during training and plain floats in
tests. The fixed-assignment loss sums the diagonal of the reference-by-
channel cost matrix; the permutation-invariant variant takes the cheaper of
both assignments and only the winning branch carries gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from .errors import BadMatrix
from .scoring import edit_distance

IDENTITY = (0, 1)
SWAPPED = (1, 0)


def _as_float(x) -> float:
    return float(x.value) if isinstance(x, ag.Node) else float(x)


def _combine(a, b):
    if isinstance(a, ag.Node):
        return ag.add_n([a, b])
    return a + b


def heat_loss(channel_loss, ch1, ch2, y1, y2):
    """Fixed first-comes-first assignment: loss(y1, ch1) + loss(y2, ch2).

    Callers guarantee y1 is the channel-1 reference (its first utterance
    starts no later than y2's); that ordering is what makes the fixed sum a
    meaningful training signal.
    """
    return _combine(channel_loss(y1, ch1), channel_loss(y2, ch2))


def pit_loss_2ch(channel_loss, ch1, ch2, y1, y2):
    """Two-channel permutation-invariant loss.

    Evaluates both assignments, returns the smaller sum plus the chosen
    permutation. Ties go to the identity assignment, so a symmetric start
    settles into the same orientation the fixed-assignment loss trains.
    Gradient flows only through the winning branch.
    """
    l11 = channel_loss(y1, ch1)
    l22 = channel_loss(y2, ch2)
    l12 = channel_loss(y1, ch2)
    l21 = channel_loss(y2, ch1)
    straight = _as_float(l11) + _as_float(l22)
    crossed = _as_float(l12) + _as_float(l21)
    if straight <= crossed:
        return _combine(l11, l22), IDENTITY
    return _combine(l12, l21), SWAPPED


def pit_loss_lsa(costs: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Minimum-cost perfect matching over an N x N cost matrix.

    The Hungarian solve is polynomial (cubic) in N; entry (i, j) is the loss
    of reference i against channel j and the value is the matched sum.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
        raise BadMatrix(f"cost matrix must be square, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise BadMatrix("cost matrix must be finite")
    rows, cols = linear_sum_assignment(costs)
    return float(costs[rows, cols].sum()), tuple(int(c) for c in cols)


def assignment_correct(hyps, refs) -> bool:
    """True when the decoded channels sit at least as close to their own
    references as to the swapped ones (token edit distance)."""
    (h1, h2), (y1, y2) = hyps, refs
    straight = edit_distance(y1, h1)[0] + edit_distance(y2, h2)[0]
    crossed = edit_distance(y2, h1)[0] + edit_distance(y1, h2)[0]
    return straight <= crossed


def assignment_accuracy(pairs) -> float:
    """Fraction of (hyps, refs) pairs with the correct output assignment."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return sum(assignment_correct(h, r) for h, r in pairs) / len(pairs)


def assignment_correct_from_costs(c11: float, c22: float, c12: float, c21: float) -> bool:
    """Loss-based variant: identity assignment is at least as cheap as the swap."""
    return (c11 + c22) <= (c12 + c21)
