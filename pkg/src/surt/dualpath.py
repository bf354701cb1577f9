"""Chunk grids, chunk-width randomization, and sparse attention patterns.

A sequence of length ``l`` is cut into ``C`` chunks of width ``W`` advancing
by ``hop`` frames; intra processing works within chunks, inter processing
works across chunks at a fixed within-chunk offset. With ``W`` near the
square root of ``l`` both directions see similar lengths and the combined
attention pattern touches O(l * sqrt(l)) entries instead of l**2.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import BadHop, BadPattern, ShapeMismatch

PATTERNS = ("dualpath-intra", "dualpath-inter", "strided", "block", "axial")


@dataclass(frozen=True)
class ChunkGrid:
    length: int
    width: int
    hop: int
    n_chunks: int
    pad: int

    def frame_indices(self) -> np.ndarray:
        """(C, W) frame index per chunk slot; entries >= length are padding."""
        c = np.arange(self.n_chunks)[:, None]
        w = np.arange(self.width)[None, :]
        return c * self.hop + w

    def coverage(self) -> np.ndarray:
        """How many chunk slots cover each frame (>= 1 everywhere)."""
        idx = self.frame_indices()
        counts = np.zeros(self.length, dtype=np.int64)
        np.add.at(counts, idx[idx < self.length], 1)
        return counts


def make_chunk_grid(length: int, width: int, hop: int | None = None) -> ChunkGrid:
    if hop is None:
        hop = width
    if length < 1 or width < 1 or hop < 1:
        raise ValueError("length, width and hop must all be >= 1")
    if hop > width:
        raise BadHop(f"hop {hop} larger than chunk width {width}")
    n_chunks = (max(0, length - width) + hop - 1) // hop + 1
    pad = (n_chunks - 1) * hop + width - length
    return ChunkGrid(length, width, hop, n_chunks, pad)


def split_frames(x: np.ndarray, grid: ChunkGrid) -> np.ndarray:
    """(l, D) -> (C, W, D); padded slots are zero."""
    idx = grid.frame_indices()
    valid = idx < grid.length
    out = np.zeros((grid.n_chunks, grid.width, x.shape[-1]), dtype=x.dtype)
    out[valid] = x[idx[valid]]
    return out


def merge_frames(chunks: np.ndarray, grid: ChunkGrid) -> np.ndarray:
    """(C, W, D) -> (l, D) by overlap-add, averaging over coverage counts.

    Inverts `split_frames` bit-exactly when no frame is covered more than
    twice (hop >= ceil(width / 2), the supported configurations); deeper
    overlap reproduces inputs to within one rounding ulp.
    """
    idx = grid.frame_indices()
    valid = idx < grid.length
    out = np.zeros((grid.length, chunks.shape[-1]), dtype=chunks.dtype)
    np.add.at(out, idx[valid], chunks[valid])
    out /= grid.coverage()[:, None].astype(chunks.dtype)
    return out


@dataclass
class CwrConfig:
    """Chunk-width randomization band plus the width used at decode time."""

    w_min: int = 15
    w_max: int = 45
    decode_w: int = 35

    def __post_init__(self):
        if not (1 <= self.w_min <= self.w_max):
            raise ValueError(f"need 1 <= w_min <= w_max, got {self.w_min}..{self.w_max}")
        if self.decode_w < 1:
            raise ValueError("decode_w must be >= 1")


def sample_chunk_width(cfg: CwrConfig, rng: np.random.Generator) -> int:
    """Uniform integer draw from [w_min, w_max]; one draw per mini-batch."""
    return int(rng.integers(cfg.w_min, cfg.w_max + 1))


# ---------------------------------------------------------------------------
# attention masks (row attends-to column, over disjoint chunks of width W)
# ---------------------------------------------------------------------------


@dataclass
class AttentionMask:
    length: int
    tag: str
    mask: np.ndarray  # (l, l) bool

    @property
    def nonzeros(self) -> int:
        return int(self.mask.sum())


def build_mask(pattern: str, length: int, width: int, streaming: bool = False) -> AttentionMask:
    if pattern not in PATTERNS:
        raise BadPattern(f"unknown pattern {pattern!r}; known: {PATTERNS}")
    if length < 1 or width < 1:
        raise ValueError("length and width must be >= 1")
    pos = np.arange(length)
    chunk = pos // width
    offset = pos % width
    ci, cj = chunk[:, None], chunk[None, :]
    oi, oj = offset[:, None], offset[None, :]
    i, j = pos[:, None], pos[None, :]

    if pattern == "dualpath-intra":
        mask = ci == cj
        tag = pattern
    elif pattern == "dualpath-inter":
        mask = oi == oj
        if streaming:
            mask = mask & (cj <= ci)
        tag = f"{pattern}-{'streaming' if streaming else 'offline'}"
    elif pattern == "strided":
        mask = (j <= i) & (((i - j) < width) | ((i - j) % width == 0))
        tag = pattern
    elif pattern == "block":
        mask = ci == cj
        tag = pattern
    else:  # axial: same row or same column of the (C, W) layout
        mask = (ci == cj) | (oi == oj)
        tag = pattern
    return AttentionMask(length, tag, mask)


@dataclass
class PatternReport:
    self_loops: bool
    hamiltonian_path: bool
    two_layer_full_reach: bool
    nonzeros: int


def _hamiltonian_path(intra: np.ndarray, inter: np.ndarray, width: int) -> list[int] | None:
    """Constructive path: snake each chunk, hop to the previous chunk via an
    inter edge at the exit offset. Works in streaming mode because hops go
    from later chunks to earlier ones."""
    length = intra.shape[0]
    union = intra | inter
    n_chunks = -(-length // width)
    order: list[int] = []
    entry = None
    for c in range(n_chunks - 1, -1, -1):
        tokens = list(range(c * width, min((c + 1) * width, length)))
        if entry is not None:
            hop = c * width + entry
            if hop not in tokens:
                return None
            tokens.remove(hop)
            tokens = [hop] + tokens[::-1]
        else:
            tokens = tokens[::-1]
        order.extend(tokens)
        entry = order[-1] % width
    if len(order) != length:
        return None
    for a, b in zip(order, order[1:]):
        if not union[a, b]:
            return None
    return order


def analyze_pattern(intra: AttentionMask, inter: AttentionMask) -> PatternReport:
    """Check the structural conditions a universal-approximation argument for
    sparse transformers needs: self loops, a Hamiltonian path through the
    attention graph, and full reachability after one intra and one inter hop
    (both compositions)."""
    if intra.length != inter.length:
        raise ShapeMismatch(f"mask sizes differ: {intra.length} vs {inter.length}")
    a = intra.mask
    b = inter.mask
    eye = np.eye(intra.length, dtype=bool)
    self_loops = bool(np.all((a | b | eye).diagonal()))

    width = _infer_width(a)
    path = _hamiltonian_path(a, b, width)

    ae = (a | eye).astype(np.float32)
    be = (b | eye).astype(np.float32)
    reach = bool(((ae @ be) > 0).all() and ((be @ ae) > 0).all())
    return PatternReport(
        self_loops=self_loops,
        hamiltonian_path=path is not None,
        two_layer_full_reach=reach,
        nonzeros=intra.nonzeros + inter.nonzeros,
    )


def _infer_width(intra: np.ndarray) -> int:
    """Chunk width of an intra mask = size of the first diagonal block."""
    first_row = intra[0]
    width = int(first_row.sum())
    return max(width, 1)


def bench_pattern(pattern: str, length: int, width: int, streaming: bool = False) -> dict:
    """One mask-bench row: build time, nonzero count, and two-layer reach."""
    t0 = time.perf_counter()
    if pattern == "dualpath":
        intra = build_mask("dualpath-intra", length, width)
        inter = build_mask("dualpath-inter", length, width, streaming=streaming)
        build_micros = (time.perf_counter() - t0) * 1e6
        report = analyze_pattern(intra, inter)
        return {
            "pattern": "dualpath-streaming" if streaming else "dualpath-offline",
            "l": length,
            "W": width,
            "nonzeros": report.nonzeros,
            "build_micros": build_micros,
            "reach2": report.two_layer_full_reach,
        }
    m = build_mask(pattern, length, width, streaming=streaming)
    build_micros = (time.perf_counter() - t0) * 1e6
    eye = np.eye(length, dtype=bool)
    me = (m.mask | eye).astype(np.float32)
    reach2 = bool(((me @ me) > 0).all())
    return {
        "pattern": m.tag,
        "l": length,
        "W": width,
        "nonzeros": m.nonzeros,
        "build_micros": build_micros,
        "reach2": reach2,
    }
