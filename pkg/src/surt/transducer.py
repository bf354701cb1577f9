"""Transducer lattice loss, an alignment-enumeration oracle, and decoding.

Grid convention: ``logits[t, u, k]`` scores emitting token ``k`` after ``t``
frames have been consumed and ``u`` labels emitted; ``k = 0`` is the blank
that advances time. Per-cell log-softmax is applied internally. With ``lp``
the normalized scores and ``y`` the 1-based labels,

    alpha[0, 0] = 0
    alpha[t, u] = logaddexp(alpha[t-1, u] + lp[t-1, u, 0],
                            alpha[t, u-1] + lp[t, u-1, y[u]])
    loss = -(alpha[T-1, U] + lp[T-1, U, 0])

All dynamic programming runs in the log domain and in float64, whatever the
incoming dtype; gradients are cast back on the way out.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from . import _jit, autograd
from .errors import BadBeam, BadLabel, OracleTooLarge, ShapeMismatch

BLANK = 0

_NEG = -np.inf


@dataclass
class Hypothesis:
    """A decoded label sequence and the log-probability assigned to it."""

    tokens: tuple[int, ...]
    score: float


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _check_inputs(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 3:
        raise ShapeMismatch(f"logits must be (T, U+1, V+1), got shape {logits.shape}")
    T, U1, V1 = logits.shape
    if T < 1 or U1 != labels.size + 1:
        raise ShapeMismatch(f"logits {logits.shape} incompatible with {labels.size} labels")
    if labels.size and (labels.min() < 1 or labels.max() > V1 - 1):
        raise BadLabel(f"labels must lie in 1..{V1 - 1}")
    if not np.all(np.isfinite(logits)):
        raise ShapeMismatch("logits must be finite")
    return labels


def _split_lp(lp: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transition scores the DP needs: blanks at every cell, plus the next
    reference label at cells with u < U. Always float64: the recursions run
    in double regardless of the training dtype."""
    T, U1, _ = lp.shape
    U = U1 - 1
    blank_lp = np.ascontiguousarray(lp[:, :, BLANK], dtype=np.float64)
    if U:
        label_lp = np.ascontiguousarray(lp[:, np.arange(U), labels], dtype=np.float64)
    else:
        label_lp = np.zeros((T, 0), dtype=np.float64)
    return blank_lp, label_lp


def _alphas_numpy(blank_lp: np.ndarray, label_lp: np.ndarray) -> np.ndarray:
    T, U1 = blank_lp.shape
    U = U1 - 1
    alpha = np.full((T, U + 1), _NEG, dtype=np.float64)
    alpha[0, 0] = 0.0
    for d in range(1, T + U):  # anti-diagonal wavefront: cells with t + u == d
        u = np.arange(max(0, d - (T - 1)), min(U, d) + 1)
        t = d - u
        tm = np.maximum(t - 1, 0)
        from_blank = np.where(t > 0, alpha[tm, u] + blank_lp[tm, u], _NEG)
        if U:
            um = np.maximum(u - 1, 0)
            from_label = np.where(u > 0, alpha[t, um] + label_lp[t, um], _NEG)
        else:
            from_label = np.full(u.shape, _NEG)
        alpha[t, u] = np.logaddexp(from_blank, from_label)
    return alpha


def _betas_numpy(blank_lp: np.ndarray, label_lp: np.ndarray) -> np.ndarray:
    """beta[t, u] = log P(emit the remaining labels and blanks | at (t, u)).

    Padded with a virtual row t = T that only admits the final blank.
    """
    T, U1 = blank_lp.shape
    U = U1 - 1
    beta = np.full((T + 1, U + 1), _NEG, dtype=np.float64)
    beta[T, U] = 0.0
    for d in range(T - 1 + U, -1, -1):
        u = np.arange(max(0, d - (T - 1)), min(U, d) + 1)
        t = d - u
        via_blank = blank_lp[t, u] + beta[t + 1, u]
        if U:
            up = np.minimum(u + 1, U)
            via_label = np.where(u < U, label_lp[t, np.minimum(u, U - 1)] + beta[t, up], _NEG)
        else:
            via_label = np.full(u.shape, _NEG)
        beta[t, u] = np.logaddexp(via_blank, via_label)
    return beta


_alphas = _jit.lattice_alphas if _jit.HAVE_NUMBA else _alphas_numpy
_betas = _jit.lattice_betas if _jit.HAVE_NUMBA else _betas_numpy


def rnnt_loss_forward(logits: np.ndarray, labels) -> float:
    """Negative log marginal probability over all monotone alignments.

    Normalization happens in the input dtype; the lattice recursion itself
    always runs in float64.
    """
    labels = _check_inputs(logits, labels)
    lp = log_softmax(np.asarray(logits))
    blank_lp, label_lp = _split_lp(lp, labels)
    alpha = _alphas(blank_lp, label_lp)
    T, U = alpha.shape[0], alpha.shape[1] - 1
    return float(-(alpha[T - 1, U] + blank_lp[T - 1, U]))


def rnnt_loss_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Loss plus its exact gradient with respect to the raw logits.

    Transition occupancies come from the alpha/beta product; the chain rule
    through the per-cell log-softmax then gives the logit gradient, whose
    rows therefore sum to zero.
    """
    labels = _check_inputs(logits, labels)
    lp = log_softmax(np.asarray(logits))
    T, U1, _ = lp.shape
    U = U1 - 1
    blank_lp, label_lp = _split_lp(lp, labels)
    alpha = _alphas(blank_lp, label_lp)
    beta = _betas(blank_lp, label_lp)
    log_total = beta[0, 0]
    loss = float(-log_total)

    g_lp = np.zeros((T, U1, lp.shape[2]), dtype=np.float64)
    occ_blank = np.exp(alpha + blank_lp + beta[1:, :] - log_total)
    g_lp[:, :, BLANK] = -occ_blank
    if U:
        u = np.arange(U)
        occ_label = np.exp(alpha[:, :U] + label_lp + beta[:T, 1:] - log_total)
        g_lp[:, u, labels] -= occ_label

    softmax = np.exp(lp.astype(np.float64)) if lp.dtype != np.float64 else np.exp(lp)
    grad = g_lp - softmax * g_lp.sum(axis=-1, keepdims=True)
    return loss, grad.astype(logits.dtype)


def rnnt_loss_node(logits: autograd.Node, labels) -> autograd.Node:
    """Tape node for the lattice loss; backward reuses the analytic gradient."""
    loss, grad = rnnt_loss_grad(logits.value, labels)
    return autograd.Node(
        np.asarray(loss, dtype=np.float64),
        (logits,),
        lambda g: (np.asarray(g, dtype=grad.dtype) * grad,),
    )


def brute_force_loss(logits: np.ndarray, labels, max_paths: int = 1_000_000) -> float:
    """Enumerate every monotone alignment and sum path probabilities directly.

    Verification oracle only: a path interleaves T blanks (the last one
    forced at the terminal cell) with the U labels in order.
    """
    labels = _check_inputs(logits, labels)
    T, U1, _ = logits.shape
    U = U1 - 1
    n_paths = comb(T - 1 + U, U)
    if n_paths > max_paths:
        raise OracleTooLarge(f"{n_paths} alignments exceed cap {max_paths}")
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    scores = np.empty(n_paths)
    for i, label_slots in enumerate(itertools.combinations(range(T - 1 + U), U)):
        slots = set(label_slots)
        t = u = 0
        s = 0.0
        for move in range(T - 1 + U):
            if move in slots:
                s += lp[t, u, labels[u]]
                u += 1
            else:
                s += lp[t, u, BLANK]
                t += 1
        scores[i] = s + lp[T - 1, U, BLANK]
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def greedy_decode(model_step, T: int, max_symbols_per_frame: int = 3) -> Hypothesis:
    """Frame-synchronous greedy search.

    ``model_step(t, prefix)`` must return raw logits over (blank + vocab) for
    frame ``t`` given the emitted ``prefix``. At each frame the argmax token
    is emitted until blank wins or the per-frame cap is hit; the returned
    score is the log-probability of the decoded alignment.
    """
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    tokens: list[int] = []
    score = 0.0
    for t in range(T):
        emitted = 0
        while True:
            lp = log_softmax(np.asarray(model_step(t, tuple(tokens)), dtype=np.float64))
            if emitted == max_symbols_per_frame:
                score += lp[BLANK]
                break
            k = int(np.argmax(lp))
            if k == BLANK:
                score += lp[BLANK]
                break
            tokens.append(k)
            score += lp[k]
            emitted += 1
    return Hypothesis(tuple(tokens), float(score))


def beam_decode(
    model_step,
    T: int,
    beam: int,
    max_symbols_per_frame: int = 3,
) -> tuple[Hypothesis, list[Hypothesis]]:
    """Fixed-width transducer beam search over label prefixes.

    Within a frame, blank-finished candidates compete for beam slots against
    ongoing label expansions, so ``beam=1`` reproduces greedy decoding
    exactly. Duplicate prefixes merge by logaddexp (alignment union). The
    greedy hypothesis is folded into the final n-best as a floor, so the
    returned best never scores below greedy even if pruning dropped its path.
    """
    if beam < 1:
        raise BadBeam(f"beam width must be >= 1, got {beam}")
    pool: dict[tuple[int, ...], float] = {(): 0.0}
    for t in range(T):
        # (prefix, score, alive): alive hypotheses may still emit this frame
        items: list[tuple[tuple[int, ...], float, bool]] = [
            (prefix, score, True) for prefix, score in pool.items()
        ]
        for round_no in range(max_symbols_per_frame + 1):
            expanded: dict[tuple[tuple[int, ...], bool], float] = {}

            def _merge(key, score):
                if key in expanded:
                    expanded[key] = float(np.logaddexp(expanded[key], score))
                else:
                    expanded[key] = score

            any_alive = False
            for prefix, score, alive in items:
                if not alive:
                    _merge((prefix, False), score)
                    continue
                any_alive = True
                lp = log_softmax(np.asarray(model_step(t, prefix), dtype=np.float64))
                _merge((prefix, False), score + float(lp[BLANK]))
                if round_no < max_symbols_per_frame:
                    for k in range(1, lp.shape[0]):
                        _merge((prefix + (k,), True), score + float(lp[k]))
            if not any_alive:
                break
            ranked = sorted(expanded.items(), key=lambda kv: kv[1], reverse=True)[:beam]
            items = [(prefix, score, alive) for (prefix, alive), score in ranked]
        pool = {prefix: score for (prefix, score, alive) in items if not alive}

    greedy = greedy_decode(model_step, T, max_symbols_per_frame)
    if greedy.tokens not in pool or pool[greedy.tokens] < greedy.score:
        pool[greedy.tokens] = max(pool.get(greedy.tokens, _NEG), greedy.score)
    nbest = [Hypothesis(tok, s) for tok, s in sorted(pool.items(), key=lambda kv: kv[1], reverse=True)]
    return nbest[0], nbest[:beam]
