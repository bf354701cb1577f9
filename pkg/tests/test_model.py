import numpy as np
import pytest

from surt import autograd as ag
from surt import dualpath, losses, model, numcore, transducer
from surt.errors import ShapeMismatch
from surt.model import ModelConfig


def tiny_cfg(encoder, **over):
    base = dict(encoder=encoder, feat_dim=3, model_dim=4, enc_layers=1, enc_hidden=4,
                heads=2, ffn_dim=6, pred_embed=3, pred_hidden=4, joint_dim=5,
                vocab=3, chunk_width=3)
    base.update(over)
    return ModelConfig(**base)


def forward_channel(store, cfg, x, width):
    leaves = store.leaves()
    um = model.unmix(leaves, cfg, ag.leaf(x))
    e1, e2 = model.encode_channels(leaves, cfg, um, width)
    return um, e1, e2


class TestUnmix:
    def test_channels_sum_to_mixture(self):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg("lstm", feat_dim=8, model_dim=16, enc_hidden=8)
        store = model.init_params(cfg, rng)
        # move the mask off its symmetric start
        store.params["mask.c1.W"] += rng.normal(size=store.params["mask.c1.W"].shape).astype(np.float32)
        x = rng.normal(size=(40, 8)).astype(np.float32)
        um = model.unmix(store.leaves(), cfg, ag.leaf(x))
        total = um.ch1.value + um.ch2.value
        assert np.allclose(total, um.mix.value, rtol=1e-6, atol=1e-6)
        assert np.all(um.mask.value > 0) and np.all(um.mask.value < 1)

    def test_zero_mask_logits_split_half(self):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, rng)  # mask.c1 zero-initialized
        x = rng.normal(size=(10, 3)).astype(np.float32)
        um = model.unmix(store.leaves(), cfg, ag.leaf(x))
        assert np.allclose(um.mask.value, 0.5)
        assert np.allclose(um.ch1.value, um.ch2.value)

    def test_saturated_mask_routes_everything(self):
        rng = np.random.default_rng(2)
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, rng)
        store.params["mask.c1.b"] += 30.0  # sigmoid saturates toward 1
        x = rng.normal(size=(10, 3)).astype(np.float32)
        um = model.unmix(store.leaves(), cfg, ag.leaf(x))
        assert np.allclose(um.ch1.value, um.mix.value, atol=1e-4)
        assert np.allclose(um.ch2.value, 0.0, atol=1e-4)

    def test_wrong_feature_dim_rejected(self):
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            model.unmix(store.leaves(), cfg, ag.leaf(np.zeros((5, 7), dtype=np.float32)))


class TestCausality:
    @pytest.mark.parametrize("encoder", ["dp-lstm", "dp-transformer"])
    def test_chunk_lookahead_is_exact(self, encoder):
        rng = np.random.default_rng(3)
        cfg = tiny_cfg(encoder, feat_dim=4, model_dim=8, enc_hidden=6, ffn_dim=12,
                       enc_layers=2, chunk_width=5)
        store = model.init_params(cfg, rng)
        T, W = 23, 5
        x = rng.normal(size=(T, 4)).astype(np.float32)
        for c in range(4):
            x2 = x.copy()
            x2[(c + 1) * W:] = rng.normal(size=x2[(c + 1) * W:].shape).astype(np.float32)
            _, a1, _ = forward_channel(store, cfg, x, W)
            _, b1, _ = forward_channel(store, cfg, x2, W)
            assert np.array_equal(a1.value[: (c + 1) * W], b1.value[: (c + 1) * W])
            assert not np.array_equal(a1.value[(c + 1) * W:], b1.value[(c + 1) * W:])

    def test_vanilla_has_zero_lookahead(self):
        rng = np.random.default_rng(4)
        cfg = tiny_cfg("lstm", feat_dim=4, model_dim=8, enc_hidden=6)
        store = model.init_params(cfg, rng)
        x = rng.normal(size=(15, 4)).astype(np.float32)
        x2 = x.copy()
        x2[9:] = 0.0
        _, a1, _ = forward_channel(store, cfg, x, 5)
        _, b1, _ = forward_channel(store, cfg, x2, 5)
        assert np.array_equal(a1.value[:9], b1.value[:9])

    def test_single_chunk_degenerates(self):
        rng = np.random.default_rng(5)
        cfg = tiny_cfg("dp-lstm")
        store = model.init_params(cfg, rng)
        x = rng.normal(size=(2, 3)).astype(np.float32)  # shorter than the width
        _, e1, _ = forward_channel(store, cfg, x, 5)
        assert e1.value.shape == (2, cfg.model_dim)


class TestMaskedAttentionEquivalence:
    def test_chunked_equals_dense_masked(self):
        """The batched per-chunk attention must equal one dense pass over the
        full sequence with the corresponding block/strided boolean masks."""
        rng = np.random.default_rng(6)
        D, heads = 8, 2
        l, W = 16, 4
        grid = dualpath.make_chunk_grid(l, W, W)
        x = rng.normal(size=(l, D)).astype(np.float64)
        Ws = {w: ag.leaf(rng.normal(size=(D, D)) * 0.5) for w in ("q", "k", "v", "o")}

        def run_chunked(view):  # (C, W, D) batched chunks, no mask
            out = model.attention(ag.leaf(view), Ws["q"], Ws["k"], Ws["v"], Ws["o"], heads)
            return out.value.reshape(l, D)

        def run_dense(mask):
            out = model.attention(
                ag.leaf(x[None]), Ws["q"], Ws["k"], Ws["v"], Ws["o"], heads,
                attn_mask=mask,
            )
            return out.value[0]

        chunked = run_chunked(x.reshape(-1, W, D))
        dense = run_dense(dualpath.build_mask("dualpath-intra", l, W).mask)
        assert np.allclose(chunked, dense, atol=1e-5)

        # inter stage: same-offset streaming attention == dense causal-by-chunk mask
        view = x.reshape(-1, W, D).transpose(1, 0, 2)  # (W, C, D)
        causal = np.tril(np.ones((l // W, l // W), dtype=bool))
        out = model.attention(ag.leaf(view), Ws["q"], Ws["k"], Ws["v"], Ws["o"], heads,
                              attn_mask=causal)
        chunked_inter = out.value.transpose(1, 0, 2).reshape(l, D)
        dense_inter = run_dense(dualpath.build_mask("dualpath-inter", l, W, streaming=True).mask)
        assert np.allclose(chunked_inter, dense_inter, atol=1e-5)


class TestJoint:
    def test_zero_params_uniform_logits(self):
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, np.random.default_rng(7))
        for name in ("joint.out.W", "joint.out.b"):
            store.params[name][...] = 0.0
        enc = ag.leaf(np.zeros((1, cfg.model_dim), dtype=np.float32))
        logits = model.joint_logits(store.leaves(), cfg, enc, [])
        assert np.allclose(logits.value, 0.0)
        loss = transducer.rnnt_loss_forward(np.asarray(logits.value, dtype=np.float64), [])
        assert loss == pytest.approx(np.log(cfg.vocab + 1))

    def test_frame_swap_permutes_logit_rows(self):
        rng = np.random.default_rng(8)
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, rng)
        enc = rng.normal(size=(5, cfg.model_dim)).astype(np.float32)
        labels = [1, 2]
        base = model.joint_logits(store.leaves(), cfg, ag.leaf(enc), labels).value
        swapped_enc = enc.copy()
        swapped_enc[[1, 3]] = swapped_enc[[3, 1]]
        swapped = model.joint_logits(store.leaves(), cfg, ag.leaf(swapped_enc), labels).value
        expected = base.copy()
        expected[[1, 3]] = expected[[3, 1]]
        assert np.allclose(swapped, expected)


class TestGradients:
    @pytest.mark.parametrize("encoder", ["lstm", "dp-lstm", "dp-transformer"])
    def test_full_pipeline_matches_finite_differences(self, encoder):
        rng = np.random.default_rng(9)
        cfg = tiny_cfg(encoder)
        store = model.init_params(cfg, rng, dtype=np.float64)
        x = rng.normal(size=(8, cfg.feat_dim))
        y1, y2 = [1, 3], [2]

        def loss_fn(leaves):
            um = model.unmix(leaves, cfg, ag.leaf(x))
            e1, e2 = model.encode_channels(leaves, cfg, um, cfg.chunk_width)
            return losses.heat_loss(
                lambda y, e: model.channel_loss_node(leaves, cfg, e, y), e1, e2, y1, y2
            )

        report = numcore.grad_check(loss_fn, store, h=1e-3, order=4, max_coords=120,
                                    rng=np.random.default_rng(0))
        assert report.passed, report.worst

    @pytest.mark.parametrize("encoder", ["dp-lstm", "dp-transformer"])
    def test_encoder_op_gradients(self, encoder):
        rng = np.random.default_rng(10)
        cfg = tiny_cfg(encoder, enc_layers=2)
        store = model.init_params(cfg, rng, dtype=np.float64)
        x = rng.normal(size=(7, cfg.feat_dim))

        def loss_fn(leaves):
            um = model.unmix(leaves, cfg, ag.leaf(x))
            enc = model.encode(leaves, cfg, um.ch1, cfg.chunk_width)
            return ag.sum_all(ag.tanh(enc))

        report = numcore.grad_check(loss_fn, store, h=1e-3, order=4, max_coords=120,
                                    rng=np.random.default_rng(1))
        assert report.passed, report.worst


class TestDecoding:
    def test_decoder_steps_match_batch_joint(self):
        rng = np.random.default_rng(11)
        cfg = tiny_cfg("lstm")
        store = model.init_params(cfg, rng)
        enc = rng.normal(size=(4, cfg.model_dim)).astype(np.float32)
        labels = [2, 1]
        logits = model.joint_logits(store.leaves(), cfg, ag.leaf(enc), labels).value
        dec = model.ChannelDecoder(store.params, cfg, enc)
        for t in range(4):
            for u, prefix in enumerate([(), (2,), (2, 1)]):
                step = dec.step(t, prefix)
                assert np.allclose(step, logits[t, u], atol=1e-5)

    def test_decode_channels_shapes(self):
        rng = np.random.default_rng(12)
        cfg = tiny_cfg("dp-transformer")
        store = model.init_params(cfg, rng)
        x = rng.normal(size=(9, cfg.feat_dim)).astype(np.float32)
        h1, h2 = model.decode_channels(store, cfg, x, width=3, beam=2)
        assert isinstance(h1.tokens, tuple) and isinstance(h2.tokens, tuple)

    def test_full_scale_presets_are_valid_configs(self):
        for preset in model.FULL_SCALE_PRESETS.values():
            ModelConfig(**preset)  # validation only; never instantiated at size
