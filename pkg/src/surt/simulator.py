"""Synthetic overlapped-speech sessions over a toy template corpus.

Every token of every speaker renders to a fixed random feature template a
few frames long; utterances are template concatenations plus noise, and a
session is the frame-wise sum of its placed utterances. Channel references
follow the first-comes-first rule: the earliest-starting utterance anchors
channel 1 and later utterances take the first channel they do not collide
with, which is exactly the ordering the fixed-assignment loss assumes.

Frames are 10 ms: a delay of 2.0 seconds is 200 frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import InfeasibleOverlap, TooManySimultaneous

FRAMES_PER_SECOND = 100


@dataclass(frozen=True)
class ToyCorpusConfig:
    vocab: int = 4
    feat_dim: int = 8
    frames_per_token: int = 5
    n_speakers: int = 4
    noise: float = 0.05
    template_scale: float = 1.0
    min_sep_sigma: float = 8.0   # required min template distance, in noise units
    speaker_bands: bool = True   # each speaker occupies its own feature band

    def __post_init__(self):
        if min(self.vocab, self.feat_dim, self.frames_per_token, self.n_speakers) < 1:
            raise ValueError("corpus dimensions must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.speaker_bands and self.feat_dim < self.n_speakers:
            raise ValueError("speaker bands need feat_dim >= n_speakers")


class ToyCorpus:
    """Per-(speaker, token) feature templates, separable by construction.

    With ``speaker_bands`` each speaker's templates live in a dedicated slice
    of the feature vector, so simultaneous speakers occupy disjoint
    dimensions and a mask over features can in principle separate them
    exactly, the same structure spectral masking exploits.
    """

    def __init__(self, cfg: ToyCorpusConfig, templates: np.ndarray):
        self.cfg = cfg
        self.templates = templates  # (speakers, vocab, frames_per_token, feat_dim)

    @classmethod
    def build(cls, cfg: ToyCorpusConfig, seed: int) -> "ToyCorpus":
        rng = np.random.default_rng(seed)
        shape = (cfg.n_speakers, cfg.vocab, cfg.frames_per_token, cfg.feat_dim)
        if cfg.speaker_bands:
            templates = np.zeros(shape, dtype=np.float32)
            band = cfg.feat_dim // cfg.n_speakers
            for s in range(cfg.n_speakers):
                lo = s * band
                hi = (s + 1) * band if s < cfg.n_speakers - 1 else cfg.feat_dim
                templates[s, :, :, lo:hi] = rng.normal(
                    0.0, cfg.template_scale, size=(cfg.vocab, cfg.frames_per_token, hi - lo)
                )
        else:
            templates = rng.normal(0.0, cfg.template_scale, size=shape).astype(np.float32)
        templates = templates.astype(np.float32)
        flat = templates.reshape(cfg.n_speakers * cfg.vocab, -1)
        dists = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        min_dist = float(dists.min())
        if min_dist <= cfg.min_sep_sigma * cfg.noise:
            raise ValueError(
                f"templates too close: min distance {min_dist:.3f} <= "
                f"{cfg.min_sep_sigma} * noise {cfg.noise}"
            )
        return cls(cfg, templates)

    def render(self, speaker: int, tokens, rng: np.random.Generator) -> np.ndarray:
        feats = np.concatenate([self.templates[speaker, tok - 1] for tok in tokens], axis=0)
        if self.cfg.noise > 0:
            feats = feats + rng.normal(0.0, self.cfg.noise, size=feats.shape)
        return feats.astype(np.float32)


@dataclass
class Utterance:
    speaker: int
    tokens: list[int]
    features: np.ndarray
    start_frame: int = 0

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.features.shape[0]

    def placed_at(self, start: int) -> "Utterance":
        return Utterance(self.speaker, list(self.tokens), self.features, start)


@dataclass
class Session:
    session_id: str
    tier: str
    features: np.ndarray  # (T, F) mixed
    channels: tuple[list[Utterance], list[Utterance]]
    overlap_ratio: float

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_utterances(self) -> int:
        return len(self.channels[0]) + len(self.channels[1])

    def utterances(self) -> list[Utterance]:
        """All references ordered by start time (stable on ties)."""
        tagged = [(u.start_frame, ch, i, u) for ch in (0, 1) for i, u in enumerate(self.channels[ch])]
        return [u for _, _, _, u in sorted(tagged, key=lambda t: t[:3])]

    def channel_tokens(self, ch: int) -> list[int]:
        return [tok for u in self.channels[ch] for tok in u.tokens]

    def overlap_frames(self) -> np.ndarray:
        active = np.zeros(self.n_frames, dtype=np.int64)
        for u in self.utterances():
            active[u.start_frame:u.end_frame] += 1
        return active >= 2


@dataclass(frozen=True)
class TierSpec:
    name: str
    min_speakers: int
    max_speakers: int
    min_utterances: int
    max_utterances: int


TIERS = {
    "t1": TierSpec("t1", 2, 2, 2, 2),
    "t2": TierSpec("t2", 2, 2, 2, 4),
    "t3": TierSpec("t3", 2, 4, 2, 12),
}


def generate_toy_utterance(corpus: ToyCorpus, speaker: int, length: int, rng) -> Utterance:
    tokens = [int(t) for t in rng.integers(1, corpus.cfg.vocab + 1, size=length)]
    return Utterance(speaker=speaker, tokens=tokens, features=corpus.render(speaker, tokens, rng))


def channel_assign_heat(utterances: list[Utterance]) -> tuple[list[Utterance], list[Utterance]]:
    """First-fit by start time over two channels; channel 1 gets the earliest.

    Fails when three utterances are simultaneously active, which is exactly
    when first-fit on two channels cannot place one.
    """
    ordered = sorted(enumerate(utterances), key=lambda t: (t[1].start_frame, t[0]))
    channels: tuple[list[Utterance], list[Utterance]] = ([], [])
    for _, utt in ordered:
        for ch in (0, 1):
            if not channels[ch] or channels[ch][-1].end_frame <= utt.start_frame:
                channels[ch].append(utt)
                break
        else:
            raise TooManySimultaneous(
                f"utterance at frame {utt.start_frame} overlaps both channels"
            )
    return channels


def mix_session(
    utterances: list[Utterance],
    delays_s: list[float],
    session_id: str = "session",
    tier: str = "adhoc",
) -> Session:
    """Place utterances with the given start-to-start delays (seconds) and sum.

    ``delays_s[i]`` is the delay between utterance i and i+1; the first
    utterance starts at frame 0. The overlap ratio is the fraction of session
    frames with two active speakers.
    """
    if len(delays_s) != len(utterances) - 1:
        raise ValueError("need one delay per consecutive utterance pair")
    if any(d < 0 for d in delays_s):
        raise ValueError("delays must be nonnegative")
    starts = [0]
    for d in delays_s:
        starts.append(starts[-1] + int(round(d * FRAMES_PER_SECOND)))
    placed = [u.placed_at(s) for u, s in zip(utterances, starts)]
    total = max(u.end_frame for u in placed)
    feat_dim = placed[0].features.shape[1]
    mixed = np.zeros((total, feat_dim), dtype=np.float32)
    active = np.zeros(total, dtype=np.int64)
    for u in placed:
        mixed[u.start_frame:u.end_frame] += u.features
        active[u.start_frame:u.end_frame] += 1
    channels = channel_assign_heat(placed)
    ratio = float((active >= 2).sum() / total)
    return Session(session_id, tier, mixed, channels, round(ratio, 6))


def _speaker_sequence(speakers: np.ndarray, n_utts: int, rng) -> list[int] | None:
    """Utterance speaker order covering every speaker; consecutive repeats
    are allowed but such pairs can never overlap."""
    if len(speakers) > n_utts:
        return None
    seq = list(speakers) + [int(rng.choice(speakers)) for _ in range(n_utts - len(speakers))]
    rng.shuffle(seq)
    return [int(s) for s in seq]


def _place_with_overlap(utts: list[Utterance], seq: list[int], target: float, rng):
    """Choose delays hitting the target overlap ratio within +/- 0.05.

    Eligible pairs (consecutive distinct speakers) may overlap; a bisection
    on the overlap scale handles the integer rounding. Returns delays in
    seconds or None when the target is unreachable for this draw.
    """
    lengths = [u.features.shape[0] for u in utts]
    n_pairs = len(utts) - 1
    eligible = [seq[i] != seq[i + 1] for i in range(n_pairs)]
    caps = [
        min(lengths[i], lengths[i + 1]) - 1 if eligible[i] else 0
        for i in range(n_pairs)
    ]
    gaps = [int(rng.integers(3, 30)) for _ in range(n_pairs)]

    def realize(scale: float):
        starts = [0]
        overlap_total = 0
        for i in range(n_pairs):
            o = int(round(scale * caps[i]))
            if o > 0:
                start = starts[-1] + lengths[i] - o
            else:
                start = starts[-1] + lengths[i] + gaps[i]
            # keep at most two speakers active: never start before the
            # previous-but-one utterance has finished
            if i >= 1:
                start = max(start, starts[-2] + lengths[i - 1])
            start = max(start, starts[-1] + 1)
            overlap_total += max(0, starts[-1] + lengths[i] - start)
            starts.append(start)
        total = max(s + L for s, L in zip(starts, lengths))
        return starts, overlap_total / total

    lo, hi = 0.0, 1.0
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        starts, ratio = realize(mid)
        if abs(ratio - target) <= 0.05:
            return [(starts[i + 1] - starts[i]) / FRAMES_PER_SECOND for i in range(n_pairs)]
        if ratio < target:
            lo = mid
        else:
            hi = mid
    for bound in (0.0, 1.0):
        starts, ratio = realize(bound)
        if abs(ratio - target) <= 0.05:
            return [(starts[i + 1] - starts[i]) / FRAMES_PER_SECOND for i in range(n_pairs)]
    return None


def make_tier_dataset(
    spec: TierSpec,
    corpus: ToyCorpus,
    n_sessions: int,
    rng: np.random.Generator,
    target_overlap: float | None = None,
    token_range: tuple[int, int] = (3, 8),
    id_prefix: str | None = None,
    max_attempts: int = 80,
) -> list[Session]:
    """Sessions with speaker/utterance counts in the tier's ranges and per-
    session overlap targets drawn uniformly from [0, 0.4] unless fixed."""
    sessions = []
    prefix = id_prefix or spec.name
    for k in range(n_sessions):
        target = float(rng.uniform(0.0, 0.4)) if target_overlap is None else float(target_overlap)
        session = None
        for _ in range(max_attempts):
            n_utts = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
            max_spk = min(spec.max_speakers, n_utts)
            n_spk = int(rng.integers(spec.min_speakers, max_spk + 1)) if max_spk > spec.min_speakers else spec.min_speakers
            speakers = rng.choice(corpus.cfg.n_speakers, size=n_spk, replace=False)
            seq = _speaker_sequence(speakers, n_utts, rng)
            if seq is None:
                continue
            utts = [
                generate_toy_utterance(
                    corpus, spk, int(rng.integers(token_range[0], token_range[1] + 1)), rng
                )
                for spk in seq
            ]
            delays = _place_with_overlap(utts, seq, target, rng)
            if delays is None:
                continue
            try:
                session = mix_session(utts, delays, session_id=f"{prefix}-{k:04d}", tier=spec.name)
            except TooManySimultaneous:
                continue
            break
        if session is None:
            raise InfeasibleOverlap(f"could not realize overlap {target:.2f} for {spec.name}")
        sessions.append(session)
    return sessions


def make_delay_dataset(
    corpus: ToyCorpus,
    delay_s: float,
    n_sessions: int,
    rng: np.random.Generator,
    token_range: tuple[int, int] = (11, 13),
    id_prefix: str = "delay",
) -> list[Session]:
    """Two-utterance mixtures with a fixed start-to-start delay.

    Utterances must outlast the delay so the pair genuinely overlaps and the
    second utterance lands on channel 2; the token range and the corpus
    frames-per-token are expected to guarantee that.
    """
    min_frames = token_range[0] * corpus.cfg.frames_per_token
    delay_frames = int(round(delay_s * FRAMES_PER_SECOND))
    if delay_frames > 0 and min_frames <= delay_frames:
        raise ValueError(
            f"utterances of {min_frames} frames cannot overlap a {delay_frames}-frame delay"
        )
    sessions = []
    for k in range(n_sessions):
        spk = rng.choice(corpus.cfg.n_speakers, size=2, replace=False)
        utts = [
            generate_toy_utterance(
                corpus, int(spk[i]), int(rng.integers(token_range[0], token_range[1] + 1)), rng
            )
            for i in range(2)
        ]
        sessions.append(
            mix_session(utts, [delay_s], session_id=f"{id_prefix}-{k:04d}", tier=f"delay{delay_s:g}")
        )
    return sessions


# ---------------------------------------------------------------------------
# manifests: one JSON line per session, features in tensor files
# ---------------------------------------------------------------------------


def save_sessions(sessions: list[Session], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for s in sessions:
            rel = f"feats/{s.session_id}.surt"
            tensorio.save_tensor(out_dir / rel, s.features)
            record = {
                "id": s.session_id,
                "tier": s.tier,
                "features": rel,
                "overlap_ratio": s.overlap_ratio,
                "channels": [
                    [
                        {
                            "tokens": list(u.tokens),
                            "start_frame": u.start_frame,
                            "end_frame": u.end_frame,
                            "speaker": u.speaker,
                        }
                        for u in s.channels[ch]
                    ]
                    for ch in (0, 1)
                ],
            }
            fh.write(json.dumps(record) + "\n")
    return manifest


def load_sessions(manifest_path: str | Path) -> list[Session]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    sessions = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            features = tensorio.load_tensor(base / rec["features"])
            # Per-utterance clean features are not stored; carry the mixture
            # slice so frame bookkeeping (end - start == len) still holds.
            channels = tuple(
                [
                    Utterance(
                        speaker=u["speaker"],
                        tokens=list(u["tokens"]),
                        features=features[u["start_frame"]:u["end_frame"]],
                        start_frame=u["start_frame"],
                    )
                    for u in ch
                ]
                for ch in rec["channels"]
            )
            sessions.append(
                Session(rec["id"], rec["tier"], features, channels, rec["overlap_ratio"])
            )
    return sessions
