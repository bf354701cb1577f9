"""Edit distance, best-assignment multi-channel WER, and error taxonomy.

Session scoring assigns each reference utterance (ordered by start time) to
one of the two output channels, concatenates per channel, and takes the
assignment with the smallest total edit distance. The search is exhaustive
over the 2**N assignments and refuses sessions beyond the cap rather than
approximating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TooManyUtterances

ASSIGNMENT_CAP = 12


def edit_distance(ref, hyp) -> tuple[int, int, int, int]:
    """Unit-cost Levenshtein distance plus (S, I, D) counts.

    Counts come from one backtraced alignment (ties prefer diagonal moves,
    then deletion), so S + I + D always equals the distance.
    """
    ops = edit_alignment(ref, hyp)
    subs = sum(1 for op in ops if op[0] == "sub")
    ins = sum(1 for op in ops if op[0] == "ins")
    dels = sum(1 for op in ops if op[0] == "del")
    return subs + ins + dels, subs, ins, dels


def edit_alignment(ref, hyp) -> list[tuple[str, int | None, int | None]]:
    """Alignment ops as (kind, ref_index, hyp_index) with kind one of
    match/sub/del/ins; the absent side is None."""
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            dist[i, j] = min(
                dist[i - 1, j - 1] + (0 if same else 1),
                dist[i - 1, j] + 1,
                dist[i, j - 1] + 1,
            )
    ops: list[tuple[str, int | None, int | None]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            kind = "match" if ref[i - 1] == hyp[j - 1] else "sub"
            ops.append((kind, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def _extend_rows(row: np.ndarray, hyp_arr: np.ndarray, tokens) -> np.ndarray:
    """Push more reference tokens through a distance-only DP row.

    The in-row insertion dependency becomes a prefix scan:
    new[j] = j + min_{k <= j} (cand[k] - k), cand being the cheaper of the
    diagonal and deletion moves.
    """
    m = hyp_arr.size
    idx = np.arange(m + 1)
    for tok in tokens:
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = row[0] + 1
        if m:
            cand[1:] = np.minimum(row[1:] + 1, row[:-1] + (hyp_arr != tok))
        row = idx + np.minimum.accumulate(cand - idx)
    return row


@dataclass
class UtteranceMatch:
    index: int          # position in the start-ordered reference list
    channel: int        # 0 or 1 under the best assignment
    ref_len: int
    matched: int        # exact token matches in the best-assignment alignment


@dataclass
class WerReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_word_count: int
    wer: float
    assignment: tuple[int, ...]            # channel bit per utterance
    per_utterance: list[UtteranceMatch]
    assignments_visited: int
    alignments: tuple[list, list] = field(default_factory=lambda: ([], []))
    ref_utterance_ids: tuple[list, list] = field(default_factory=lambda: ([], []))
    hyp_channels: tuple[list, list] | None = None


def multichannel_wer(refs, hyps, cap: int = ASSIGNMENT_CAP) -> WerReport:
    """Best-assignment WER of two hypothesis channels against N utterances.

    ``refs`` are utterance objects ordered by start time (anything with a
    ``tokens`` attribute, or bare token lists); ``hyps`` is a pair of channel
    token lists. All 2**N assignments are visited.
    """
    tokens = [list(getattr(u, "tokens", u)) for u in refs]
    n = len(tokens)
    if n > cap:
        raise TooManyUtterances(f"{n} utterances exceed the 2**N search cap of {cap}")
    h1, h2 = [list(h) for h in hyps]
    h1_arr = np.asarray(h1, dtype=np.int64) if h1 else np.empty(0, dtype=np.int64)
    h2_arr = np.asarray(h2, dtype=np.int64) if h2 else np.empty(0, dtype=np.int64)
    visited = 0
    best_total: int | None = None
    best_bits: tuple[int, ...] = ()

    def search(i, row1, row2, bits):
        nonlocal visited, best_total, best_bits
        if i == n:
            visited += 1
            total = int(row1[-1] + row2[-1])
            if best_total is None or total < best_total:
                best_total = total
                best_bits = bits
            return
        search(i + 1, _extend_rows(row1, h1_arr, tokens[i]), row2, bits + (0,))
        search(i + 1, row1, _extend_rows(row2, h2_arr, tokens[i]), bits + (1,))

    search(0, np.arange(len(h1) + 1, dtype=np.int64), np.arange(len(h2) + 1, dtype=np.int64), ())

    # Full alignments only for the winning assignment.
    per_channel_tokens: tuple[list, list] = ([], [])
    per_channel_utts: tuple[list, list] = ([], [])
    for i, bit in enumerate(best_bits):
        per_channel_tokens[bit].extend(tokens[i])
        per_channel_utts[bit].extend([i] * len(tokens[i]))
    aligns = (edit_alignment(per_channel_tokens[0], h1),
              edit_alignment(per_channel_tokens[1], h2))

    subs = ins = dels = 0
    matched = {i: 0 for i in range(n)}
    for ch in (0, 1):
        for kind, ri, _ in aligns[ch]:
            if kind == "sub":
                subs += 1
            elif kind == "ins":
                ins += 1
            elif kind == "del":
                dels += 1
            elif kind == "match":
                matched[per_channel_utts[ch][ri]] += 1
    ref_word_count = sum(len(t) for t in tokens)
    wer = (subs + ins + dels) / ref_word_count if ref_word_count else 0.0
    per_utt = [
        UtteranceMatch(index=i, channel=best_bits[i], ref_len=len(tokens[i]), matched=matched[i])
        for i in range(n)
    ]
    return WerReport(
        substitutions=subs,
        insertions=ins,
        deletions=dels,
        ref_word_count=ref_word_count,
        wer=wer,
        assignment=best_bits,
        per_utterance=per_utt,
        assignments_visited=visited,
        alignments=aligns,
        ref_utterance_ids=per_channel_utts,
        hyp_channels=(h1, h2),
    )


def score_session(session, hyps, cap: int = ASSIGNMENT_CAP) -> WerReport:
    return multichannel_wer(session.utterances(), hyps, cap=cap)


@dataclass
class ErrorBreakdown:
    leakage_insertions: int
    omitted_utterances: int


def _token_spans(utt) -> list[tuple[float, float]]:
    """Frame span per reference token, splitting the utterance evenly."""
    n = len(utt.tokens)
    width = (utt.end_frame - utt.start_frame) / n
    return [(utt.start_frame + k * width, utt.start_frame + (k + 1) * width) for k in range(n)]


def _offset_within(ids: list, ri: int) -> int:
    """Offset of concatenated ref position ``ri`` inside its own utterance."""
    return ri - ids.index(ids[ri])


def _insertion_window(ops, ref_spans, hyp_index, n_frames) -> tuple[float, float]:
    """Time window for an inserted hypothesis token: from the start of the
    nearest aligned ref token before it to the end of the nearest one after;
    session bounds when no neighbor exists."""
    lo, hi = 0.0, float(n_frames)
    hi_set = False
    for kind, ri, hj in ops:
        if ri is None or hj is None:
            continue
        if hj < hyp_index:
            lo = ref_spans[ri][0]
        elif hj > hyp_index and not hi_set:
            hi = ref_spans[ri][1]
            hi_set = True
    return lo, hi


def classify_errors(report: WerReport, session) -> ErrorBreakdown:
    """Split scoring errors into channel leakage and whole-utterance misses.

    An utterance is omitted when its best-assignment alignment matched zero
    tokens. An insertion on one channel counts as leakage when the same token
    value was matched on the other channel in an intersecting time window the
    session marks as single-speaker. Reference frame boundaries stand in for
    hypothesis timestamps, which do not exist.
    """
    if report.hyp_channels is None:
        raise ValueError("report carries no hypothesis channels")
    omitted = sum(1 for um in report.per_utterance if um.matched == 0)

    utts = session.utterances()
    overlap = session.overlap_frames()
    spans = {i: _token_spans(u) for i, u in enumerate(utts)}

    # Matched tokens per channel: (value, span, single-speaker?); each can
    # absorb at most one leaked insertion from the other channel.
    matched_pool: list[list[list]] = [[], []]
    for ch in (0, 1):
        ids = report.ref_utterance_ids[ch]
        for kind, ri, _ in report.alignments[ch]:
            if kind != "match":
                continue
            utt_idx = ids[ri]
            lo, hi = spans[utt_idx][_offset_within(ids, ri)]
            clean = not overlap[int(lo):max(int(lo) + 1, int(np.ceil(hi)))].any()
            matched_pool[ch].append([utts[utt_idx].tokens[_offset_within(ids, ri)], (lo, hi), clean])

    leakage = 0
    for ch in (0, 1):
        other = 1 - ch
        ids = report.ref_utterance_ids[ch]
        ref_spans = [spans[utt_idx][_offset_within(ids, ri)] for ri, utt_idx in enumerate(ids)]
        for kind, _, hi in report.alignments[ch]:
            if kind != "ins":
                continue
            tok = report.hyp_channels[ch][hi]
            window = _insertion_window(report.alignments[ch], ref_spans, hi, session.n_frames)
            for entry in matched_pool[other]:
                value, (lo, hi_f), clean = entry
                if value is None or value != tok or not clean:
                    continue
                if lo < window[1] and hi_f > window[0]:
                    entry[0] = None
                    leakage += 1
                    break
    return ErrorBreakdown(leakage_insertions=leakage, omitted_utterances=omitted)
