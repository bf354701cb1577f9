import numpy as np
import pytest

from surt import simulator
from surt.errors import TooManySimultaneous
from surt.simulator import (
    TIERS,
    ToyCorpus,
    ToyCorpusConfig,
    Utterance,
    channel_assign_heat,
    generate_toy_utterance,
    load_sessions,
    make_delay_dataset,
    make_tier_dataset,
    mix_session,
    save_sessions,
)


@pytest.fixture(scope="module")
def corpus():
    return ToyCorpus.build(ToyCorpusConfig(), seed=42)


def utt_at(start, n_frames, speaker=0, tokens=(1,)):
    u = Utterance(speaker=speaker, tokens=list(tokens),
                  features=np.zeros((n_frames, 8), dtype=np.float32))
    return u.placed_at(start)


class TestToyCorpus:
    def test_noiseless_render_is_template_concat(self):
        cfg = ToyCorpusConfig(noise=0.0)
        c = ToyCorpus.build(cfg, seed=1)
        u = generate_toy_utterance(c, speaker=0, length=3, rng=np.random.default_rng(0))
        assert u.features.shape == (15, cfg.feat_dim)
        expected = np.concatenate([c.templates[0, t - 1] for t in u.tokens])
        assert np.array_equal(u.features, expected)

    def test_same_seed_same_utterance(self, corpus):
        a = generate_toy_utterance(corpus, 1, 4, np.random.default_rng(9))
        b = generate_toy_utterance(corpus, 1, 4, np.random.default_rng(9))
        assert a.tokens == b.tokens
        assert np.array_equal(a.features, b.features)

    def test_template_separation_checked(self, corpus):
        flat = corpus.templates.reshape(-1, corpus.templates.shape[-2] * corpus.templates.shape[-1])
        d = np.linalg.norm(flat[:, None] - flat[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > corpus.cfg.min_sep_sigma * corpus.cfg.noise

    def test_inseparable_corpus_rejected(self):
        with pytest.raises(ValueError):
            ToyCorpus.build(ToyCorpusConfig(noise=5.0, template_scale=1e-4), seed=0)


class TestChannelAssignment:
    def test_sequential_all_on_channel_one(self):
        utts = [utt_at(0, 4), utt_at(5, 4), utt_at(10, 4)]
        ch1, ch2 = channel_assign_heat(utts)
        assert len(ch1) == 3 and len(ch2) == 0

    def test_two_overlapping(self):
        utts = [utt_at(0, 10), utt_at(5, 10)]
        ch1, ch2 = channel_assign_heat(utts)
        assert ch1[0].start_frame == 0 and ch2[0].start_frame == 5

    def test_third_returns_to_free_channel(self):
        # u3 overlaps u2 (on channel 2) but not u1, so it lands on channel 1
        utts = [utt_at(0, 10), utt_at(8, 10), utt_at(12, 10)]
        ch1, ch2 = channel_assign_heat(utts)
        assert [u.start_frame for u in ch1] == [0, 12]
        assert [u.start_frame for u in ch2] == [8]

    def test_three_simultaneous_rejected(self):
        utts = [utt_at(0, 20), utt_at(2, 20), utt_at(4, 20)]
        with pytest.raises(TooManySimultaneous):
            channel_assign_heat(utts)


class TestMixSession:
    def test_delay_two_seconds(self, corpus):
        rng = np.random.default_rng(0)
        u1 = generate_toy_utterance(corpus, 0, 50, rng)  # 250 frames
        u2 = generate_toy_utterance(corpus, 1, 50, rng)
        s = mix_session([u1, u2], [2.0])
        assert s.channels[1][0].start_frame == 200
        assert 0.0 < s.overlap_ratio < 1.0
        assert s.channels[0][0].start_frame == 0

    def test_zero_delay_full_overlap(self, corpus):
        rng = np.random.default_rng(0)
        u1 = generate_toy_utterance(corpus, 0, 6, rng)
        u2 = generate_toy_utterance(corpus, 1, 6, rng)
        s = mix_session([u1, u2], [0.0])
        assert s.overlap_ratio == 1.0
        assert len(s.channels[0]) == 1 and len(s.channels[1]) == 1

    def test_single_utterance(self, corpus):
        u = generate_toy_utterance(corpus, 0, 4, np.random.default_rng(1))
        s = mix_session([u], [])
        assert s.overlap_ratio == 0.0
        assert len(s.channels[1]) == 0

    def test_mix_is_framewise_sum(self, corpus):
        rng = np.random.default_rng(5)
        u1 = generate_toy_utterance(corpus, 0, 4, rng)
        u2 = generate_toy_utterance(corpus, 1, 4, rng)
        s = mix_session([u1, u2], [0.1])
        manual = np.zeros_like(s.features)
        manual[:20] += u1.features
        manual[10:30] += u2.features
        assert np.allclose(s.features, manual)


class TestTierDatasets:
    def test_t1_counts(self, corpus):
        sessions = make_tier_dataset(TIERS["t1"], corpus, 20, np.random.default_rng(0))
        for s in sessions:
            assert s.n_utterances == 2
            speakers = {u.speaker for u in s.utterances()}
            assert len(speakers) == 2

    def test_t3_ranges(self, corpus):
        sessions = make_tier_dataset(TIERS["t3"], corpus, 30, np.random.default_rng(1))
        for s in sessions:
            assert 2 <= s.n_utterances <= 12
            assert 2 <= len({u.speaker for u in s.utterances()}) <= 4

    def test_overlap_band(self, corpus):
        for tier in ("t1", "t2", "t3"):
            sessions = make_tier_dataset(TIERS[tier], corpus, 25, np.random.default_rng(2))
            for s in sessions:
                assert 0.0 <= s.overlap_ratio <= 0.45

    def test_zero_target_is_sequential(self, corpus):
        sessions = make_tier_dataset(TIERS["t2"], corpus, 10, np.random.default_rng(3),
                                     target_overlap=0.0)
        for s in sessions:
            assert s.overlap_ratio <= 0.05
            if s.overlap_ratio == 0.0:
                assert len(s.channels[1]) == 0  # first-fit keeps channel 2 empty

    def test_channels_partition_utterances(self, corpus):
        sessions = make_tier_dataset(TIERS["t3"], corpus, 15, np.random.default_rng(4))
        for s in sessions:
            merged = sorted(id(u) for ch in s.channels for u in ch)
            assert len(merged) == len(set(merged)) == s.n_utterances

    def test_first_start_order_invariant(self, corpus):
        sessions = make_tier_dataset(TIERS["t3"], corpus, 25, np.random.default_rng(5))
        for s in sessions:
            if s.channels[1]:
                assert s.channels[0][0].start_frame <= s.channels[1][0].start_frame

    def test_within_channel_disjoint_and_ordered(self, corpus):
        sessions = make_tier_dataset(TIERS["t3"], corpus, 15, np.random.default_rng(6))
        for s in sessions:
            for ch in s.channels:
                for a, b in zip(ch, ch[1:]):
                    assert a.end_frame <= b.start_frame


class TestDelayDatasets:
    def test_second_utterance_lands_on_channel_two(self):
        corpus = ToyCorpus.build(ToyCorpusConfig(frames_per_token=20), seed=0)
        sessions = make_delay_dataset(corpus, 2.0, 10, np.random.default_rng(0))
        for s in sessions:
            assert len(s.channels[0]) == 1 and len(s.channels[1]) == 1
            assert s.channels[1][0].start_frame == 200

    def test_too_short_utterances_rejected(self):
        corpus = ToyCorpus.build(ToyCorpusConfig(frames_per_token=5), seed=0)
        with pytest.raises(ValueError):
            make_delay_dataset(corpus, 2.0, 5, np.random.default_rng(0), token_range=(3, 8))


class TestManifests:
    def test_roundtrip(self, corpus, tmp_path):
        sessions = make_tier_dataset(TIERS["t2"], corpus, 8, np.random.default_rng(7))
        manifest = save_sessions(sessions, tmp_path / "data")
        loaded = load_sessions(manifest)
        assert len(loaded) == len(sessions)
        for a, b in zip(sessions, loaded):
            assert a.session_id == b.session_id
            assert a.tier == b.tier
            assert a.overlap_ratio == b.overlap_ratio
            assert np.allclose(a.features, b.features, atol=1e-6)
            for ch in (0, 1):
                assert a.channel_tokens(ch) == b.channel_tokens(ch)
                assert [u.start_frame for u in a.channels[ch]] == [u.start_frame for u in b.channels[ch]]

    def test_byte_identical_across_runs(self, corpus, tmp_path):
        def build(out):
            rng = np.random.default_rng(11)
            sessions = make_tier_dataset(TIERS["t1"], corpus, 6, rng)
            return save_sessions(sessions, out)

        m1 = build(tmp_path / "a")
        m2 = build(tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for f1 in sorted((tmp_path / "a" / "feats").iterdir()):
            f2 = tmp_path / "b" / "feats" / f1.name
            assert f1.read_bytes() == f2.read_bytes()
