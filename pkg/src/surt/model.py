"""Two-channel streaming unmixing + transducer network.

A causal convolutional front end embeds the mixture and predicts a sigmoid
mask that splits it into two channel representations (their sum is the
mixture embedding by construction). A shared streaming encoder (plain LSTM,
dual-path LSTM, or dual-path transformer) maps each channel to frame states;
a label-prefix LSTM and the joint projection turn those into lattice logits
for the transducer loss.

Layer forwards record single tape nodes whose backwards are hand-derived
here: LSTM backward through time, attention backward, causal convolution
backward, plus exact adjoints for the chunk split/merge data movement.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import _jit, transducer
from . import autograd as ag
from .autograd import Node
from .dualpath import ChunkGrid, make_chunk_grid
from .errors import ShapeMismatch
from .numcore import ParamStore

ENCODERS = ("lstm", "dp-lstm", "dp-transformer")


@dataclass
class ModelConfig:
    encoder: str = "lstm"
    feat_dim: int = 8
    model_dim: int = 16
    enc_layers: int = 1
    enc_hidden: int = 24
    heads: int = 2
    ffn_dim: int = 48
    pred_embed: int = 8
    pred_hidden: int = 16
    pred_layers: int = 1
    joint_dim: int = 16
    vocab: int = 6
    conv_kernel: int = 3
    chunk_width: int = 20
    lstm_chunk_hop: str = "full"  # "full" = disjoint chunks, "half" = 50% overlap

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}; known: {ENCODERS}")
        for name in (
            "feat_dim", "model_dim", "enc_layers", "enc_hidden", "heads", "ffn_dim",
            "pred_embed", "pred_hidden", "pred_layers", "joint_dim", "vocab",
            "conv_kernel", "chunk_width",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide model_dim ({self.model_dim})")
        if self.lstm_chunk_hop not in ("full", "half"):
            raise ValueError("lstm_chunk_hop must be 'full' or 'half'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# Reference configurations for the full-size systems this package scales down
# from. Not trainable on a desk; kept for documentation and config echoing.
FULL_SCALE_PRESETS = {
    "lstm": dict(encoder="lstm", enc_layers=6, enc_hidden=1024, model_dim=1024,
                 pred_hidden=1024, pred_layers=2),
    "dp-lstm": dict(encoder="dp-lstm", enc_layers=6, enc_hidden=512, model_dim=512,
                    pred_hidden=1024, pred_layers=2, chunk_width=30),
    "dp-transformer": dict(encoder="dp-transformer", enc_layers=12, model_dim=256,
                           heads=8, ffn_dim=1024, pred_hidden=1024, pred_layers=2,
                           chunk_width=30),
}


# ---------------------------------------------------------------------------
# layer ops with hand-derived backwards
# ---------------------------------------------------------------------------


def lstm_cell(x, h, c, Wx, Wh, b):
    """Single step shared by the sequence op and the incremental decoder."""
    H = Wh.shape[0]
    z = x @ Wx + h @ Wh + b
    i = expit(z[..., :H])
    f = expit(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = expit(z[..., 3 * H:])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def _lstm_forward_numpy(x, Wx, Wh, b):
    B, T, _ = x.shape
    H = Wh.shape[0]
    dt = x.dtype
    xz = x @ Wx + b
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    out = np.empty((B, T, H), dtype=dt)
    gi, gf, gg, go, tc, cprev, hprev = (np.empty((B, T, H), dtype=dt) for _ in range(7))
    for t in range(T):
        hprev[:, t] = h
        cprev[:, t] = c
        z = xz[:, t] + h @ Wh
        i = expit(z[:, :H])
        f = expit(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = expit(z[:, 3 * H:])
        c = f * c + i * g
        th = np.tanh(c)
        h = o * th
        out[:, t] = h
        gi[:, t] = i
        gf[:, t] = f
        gg[:, t] = g
        go[:, t] = o
        tc[:, t] = th
    return out, gi, gf, gg, go, tc, cprev, hprev


def _lstm_backward_numpy(g_out, x, Wx, Wh, gi, gf, gg, go, tc, cprev, hprev):
    B, T, _ = x.shape
    H = Wh.shape[0]
    dz_all = np.empty((B, T, 4 * H), dtype=x.dtype)
    dh_next = np.zeros((B, H), dtype=x.dtype)
    dc_next = np.zeros((B, H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        i, f, g, o, th = gi[:, t], gf[:, t], gg[:, t], go[:, t], tc[:, t]
        dh = g_out[:, t] + dh_next
        do = dh * th
        dc = dh * o * (1.0 - th * th) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * cprev[:, t]
        dz = dz_all[:, t]
        dz[:, :H] = di * i * (1.0 - i)
        dz[:, H:2 * H] = df * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dg * (1.0 - g * g)
        dz[:, 3 * H:] = do * o * (1.0 - o)
        dh_next = dz @ Wh.T
        dc_next = dc * f
    dx = dz_all @ Wx.T
    xf = x.reshape(-1, x.shape[-1])
    zf = dz_all.reshape(-1, 4 * H)
    dWx = xf.T @ zf
    dWh = hprev.reshape(-1, H).T @ zf
    db = zf.sum(axis=0)
    return dx, dWx, dWh, db


_lstm_fwd = _jit.lstm_forward if _jit.HAVE_NUMBA else _lstm_forward_numpy
_lstm_bwd = _jit.lstm_backward if _jit.HAVE_NUMBA else _lstm_backward_numpy


def lstm_seq(x: Node, Wx: Node, Wh: Node, b: Node, reverse: bool = False) -> Node:
    """LSTM over a (B, T, I) batch of sequences; backward through time by hand."""
    xv = x.value[:, ::-1] if reverse else x.value
    xv = np.ascontiguousarray(xv)
    out, *cache = _lstm_fwd(xv, Wx.value, Wh.value, b.value)

    def vjp(g):
        gv = np.ascontiguousarray(g[:, ::-1] if reverse else g)
        dx, dWx, dWh, db = _lstm_bwd(gv, xv, Wx.value, Wh.value, *cache)
        if reverse:
            dx = np.ascontiguousarray(dx[:, ::-1])
        return dx, dWx, dWh, db

    out = out[:, ::-1] if reverse else out
    return Node(np.ascontiguousarray(out), (x, Wx, Wh, b), vjp)


def conv1d_causal(x: Node, W: Node, b: Node) -> Node:
    """Causal 1-D convolution over time: y[..., t, :] = sum_j x[..., t-j, :] @ W[j] + b.

    Left padding only; frame t never sees frames after t. Accepts (T, I) or
    any batched (..., T, I).
    """
    T = x.value.shape[-2]
    k, in_dim, out_dim = W.value.shape
    pad = np.zeros(x.value.shape[:-2] + (k - 1, in_dim), dtype=x.value.dtype)
    xp = np.concatenate([pad, x.value], axis=-2)
    out = np.zeros(x.value.shape[:-2] + (T, out_dim), dtype=x.value.dtype) + b.value
    for j in range(k):
        out += xp[..., k - 1 - j: k - 1 - j + T, :] @ W.value[j]

    def vjp(g):
        dxp = np.zeros_like(xp)
        dW = np.zeros_like(W.value)
        g2 = g.reshape(-1, out_dim)
        for j in range(k):
            sl = slice(k - 1 - j, k - 1 - j + T)
            dxp[..., sl, :] += g @ W.value[j].T
            dW[j] = xp[..., sl, :].reshape(-1, in_dim).T @ g2
        return dxp[..., k - 1:, :], dW, g2.sum(axis=0)

    return Node(out, (x, W, b), vjp)


def attention(
    x: Node,
    Wq: Node,
    Wk: Node,
    Wv: Node,
    Wo: Node,
    n_heads: int,
    attn_mask: np.ndarray | None = None,
    key_mask: np.ndarray | None = None,
) -> Node:
    """Multi-head self-attention over (B, S, D) with boolean masking.

    ``attn_mask`` is (S, S) row-attends-column; ``key_mask`` is (B, S) and
    hides padded key slots. Masked scores get a large negative fill; a fully
    masked row degrades to a uniform distribution, which only ever happens
    for padded queries whose output is discarded downstream.
    """
    xv = x.value
    B, S, D = xv.shape
    dh = D // n_heads
    scale = 1.0 / np.sqrt(dh)
    neg = xv.dtype.type(-1e30 if xv.dtype == np.float64 else -1e30)

    def heads(m):
        return m.reshape(B, S, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(xv @ Wq.value)
    k = heads(xv @ Wk.value)
    v = heads(xv @ Wv.value)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    if attn_mask is not None:
        scores = np.where(attn_mask[None, None, :, :], scores, neg)
    if key_mask is not None:
        scores = np.where(key_mask[:, None, None, :], scores, neg)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    out = ctx @ Wo.value

    def vjp(g):
        g2 = g.reshape(-1, D)
        dWo = ctx.reshape(-1, D).T @ g2
        dctx = heads(g @ Wo.value.T)
        dp = dctx @ v.swapaxes(-1, -2)
        dv = p.swapaxes(-1, -2) @ dctx
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        dq = ds @ k
        dk = ds.swapaxes(-1, -2) @ q
        x2 = xv.reshape(-1, D)

        def unheads(m):
            return m.transpose(0, 2, 1, 3).reshape(B, S, D)

        dq, dk, dv = unheads(dq), unheads(dk), unheads(dv)
        dWq = x2.T @ dq.reshape(-1, D)
        dWk = x2.T @ dk.reshape(-1, D)
        dWv = x2.T @ dv.reshape(-1, D)
        dx = dq @ Wq.value.T + dk @ Wk.value.T + dv @ Wv.value.T
        return dx, dWq, dWk, dWv, dWo

    return Node(out, (x, Wq, Wk, Wv, Wo), vjp)


def chunk_split(x: Node, grid: ChunkGrid) -> Node:
    """(..., l, D) -> (..., C, W, D) with zero padding; adjoint scatter-adds."""
    idx = grid.frame_indices()
    valid = idx < grid.length
    lead = x.value.shape[:-2]
    dim = x.value.shape[-1]
    out = np.zeros(lead + (grid.n_chunks, grid.width, dim), dtype=x.value.dtype)
    out[..., valid, :] = x.value[..., idx[valid], :]

    def vjp(g):
        dx = np.zeros_like(x.value)
        flat_dx = dx.reshape(-1, grid.length, dim)
        flat_g = g.reshape((-1,) + g.shape[-3:])
        for bi in range(flat_dx.shape[0]):
            np.add.at(flat_dx[bi], idx[valid], flat_g[bi][valid])
        return (dx,)

    return Node(out, (x,), vjp)


def chunk_merge(y: Node, grid: ChunkGrid) -> Node:
    """(..., C, W, D) -> (..., l, D) overlap-add averaged over coverage counts."""
    idx = grid.frame_indices()
    valid = idx < grid.length
    counts = grid.coverage().astype(y.value.dtype)[:, None]
    lead = y.value.shape[:-3]
    dim = y.value.shape[-1]
    out = np.zeros(lead + (grid.length, dim), dtype=y.value.dtype)
    flat_out = out.reshape(-1, grid.length, dim)
    flat_y = y.value.reshape((-1,) + y.value.shape[-3:])
    for bi in range(flat_out.shape[0]):
        np.add.at(flat_out[bi], idx[valid], flat_y[bi][valid])
    out /= counts

    def vjp(g):
        gw = g / counts
        dy = np.zeros_like(y.value)
        dy[..., valid, :] = gw[..., idx[valid], :]
        return (dy,)

    return Node(out, (y,), vjp)


def sinusoid_table(n: int, dim: int, dtype) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _add_lstm(store, rng, prefix, in_dim, hidden):
    store.add(f"{prefix}.Wx", _uniform(rng, (in_dim, 4 * hidden), hidden))
    store.add(f"{prefix}.Wh", _uniform(rng, (hidden, 4 * hidden), hidden))
    store.add(f"{prefix}.b", np.zeros(4 * hidden))


def _add_linear(store, rng, prefix, in_dim, out_dim, zero=False):
    if zero:
        store.add(f"{prefix}.W", np.zeros((in_dim, out_dim)))
        store.add(f"{prefix}.b", np.zeros(out_dim))
    else:
        store.add(f"{prefix}.W", _uniform(rng, (in_dim, out_dim), in_dim))
        store.add(f"{prefix}.b", np.zeros(out_dim))


def _add_conv(store, rng, prefix, k, in_dim, out_dim, zero=False):
    if zero:
        store.add(f"{prefix}.W", np.zeros((k, in_dim, out_dim)))
    else:
        store.add(f"{prefix}.W", _uniform(rng, (k, in_dim, out_dim), k * in_dim))
    store.add(f"{prefix}.b", np.zeros(out_dim))


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    store = ParamStore(dtype)
    k, F, D, H = cfg.conv_kernel, cfg.feat_dim, cfg.model_dim, cfg.enc_hidden
    _add_conv(store, rng, "mix.c0", k, F, D)
    _add_conv(store, rng, "mix.c1", k, D, D)
    _add_conv(store, rng, "mask.c0", k, F, D)
    # Zero final mask layer: the mask starts at exactly 0.5, so both channels
    # begin identical and the loss decides their orientation.
    _add_conv(store, rng, "mask.c1", k, D, D, zero=True)

    for i in range(cfg.enc_layers):
        if cfg.encoder == "lstm":
            _add_lstm(store, rng, f"enc{i}", D, H)
            _add_linear(store, rng, f"enc{i}.proj", H, D)
        elif cfg.encoder == "dp-lstm":
            _add_lstm(store, rng, f"enc{i}.intra.fwd", D, H)
            _add_lstm(store, rng, f"enc{i}.intra.bwd", D, H)
            _add_linear(store, rng, f"enc{i}.intra.proj", 2 * H, D)
            _add_lstm(store, rng, f"enc{i}.inter", D, H)
            _add_linear(store, rng, f"enc{i}.inter.proj", H, D)
        else:
            for stage in ("intra", "inter"):
                store.add(f"enc{i}.{stage}.ln.g", np.ones(D))
                store.add(f"enc{i}.{stage}.ln.b", np.zeros(D))
                for w in ("Wq", "Wk", "Wv", "Wo"):
                    store.add(f"enc{i}.{stage}.{w}", _uniform(rng, (D, D), D))
                store.add(f"enc{i}.{stage}.ffn.ln.g", np.ones(D))
                store.add(f"enc{i}.{stage}.ffn.ln.b", np.zeros(D))
                _add_linear(store, rng, f"enc{i}.{stage}.ffn.fc1", D, cfg.ffn_dim)
                _add_linear(store, rng, f"enc{i}.{stage}.ffn.fc2", cfg.ffn_dim, D)

    store.add("pred.embed", rng.normal(0.0, 0.5, size=(cfg.vocab + 1, cfg.pred_embed)))
    in_dim = cfg.pred_embed
    for i in range(cfg.pred_layers):
        _add_lstm(store, rng, f"pred{i}", in_dim, cfg.pred_hidden)
        in_dim = cfg.pred_hidden
    _add_linear(store, rng, "joint.enc", D, cfg.joint_dim)
    _add_linear(store, rng, "joint.pred", cfg.pred_hidden, cfg.joint_dim)
    _add_linear(store, rng, "joint.out", cfg.joint_dim, cfg.vocab + 1)
    return store


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


@dataclass
class UnmixOutput:
    mix: Node   # (T, D) mixture embedding
    mask: Node  # (T, D) sigmoid mask in (0, 1)
    ch1: Node   # mask * mix
    ch2: Node   # (1 - mask) * mix


def unmix(params: dict[str, Node], cfg: ModelConfig, x: Node) -> UnmixOutput:
    if x.value.ndim not in (2, 3) or x.value.shape[-1] != cfg.feat_dim:
        raise ShapeMismatch(f"features must be (..., T, {cfg.feat_dim}), got {x.value.shape}")
    mix = conv1d_causal(x, params["mix.c0.W"], params["mix.c0.b"])
    mix = conv1d_causal(ag.tanh(mix), params["mix.c1.W"], params["mix.c1.b"])
    mlog = conv1d_causal(x, params["mask.c0.W"], params["mask.c0.b"])
    mlog = conv1d_causal(ag.tanh(mlog), params["mask.c1.W"], params["mask.c1.b"])
    mask = ag.sigmoid(mlog)
    ch1 = ag.mul(mask, mix)
    ch2 = ag.mul(ag.scale_shift(mask, -1.0, 1.0), mix)
    return UnmixOutput(mix=mix, mask=mask, ch1=ch1, ch2=ch2)


def _lstm_encode(params, cfg, z: Node) -> Node:
    for i in range(cfg.enc_layers):
        y = lstm_seq(z, params[f"enc{i}.Wx"], params[f"enc{i}.Wh"], params[f"enc{i}.b"])
        z = ag.add(z, ag.linear(y, params[f"enc{i}.proj.W"], params[f"enc{i}.proj.b"]))
    return z


def dp_lstm_encode(params, cfg, h: Node, grid: ChunkGrid) -> Node:
    B = h.value.shape[0]
    C, W, D = grid.n_chunks, grid.width, cfg.model_dim
    z = chunk_split(h, grid)  # (B, C, W, D)
    for i in range(cfg.enc_layers):
        p = lambda name: params[f"enc{i}.{name}"]
        zi = ag.reshape(z, (B * C, W, D))
        fwd = lstm_seq(zi, p("intra.fwd.Wx"), p("intra.fwd.Wh"), p("intra.fwd.b"))
        bwd = lstm_seq(zi, p("intra.bwd.Wx"), p("intra.bwd.Wh"), p("intra.bwd.b"), reverse=True)
        both = ag.concat([fwd, bwd], axis=-1)
        zi = ag.add(zi, ag.linear(both, p("intra.proj.W"), p("intra.proj.b")))
        zt = ag.reshape(ag.swapaxes(ag.reshape(zi, (B, C, W, D)), 1, 2), (B * W, C, D))
        inter = lstm_seq(zt, p("inter.Wx"), p("inter.Wh"), p("inter.b"))
        zt = ag.add(zt, ag.linear(inter, p("inter.proj.W"), p("inter.proj.b")))
        z = ag.swapaxes(ag.reshape(zt, (B, W, C, D)), 1, 2)
    return chunk_merge(z, grid)


def dp_transformer_encode(params, cfg, h: Node, grid: ChunkGrid) -> Node:
    dt = h.value.dtype
    B = h.value.shape[0]
    C, W, D = grid.n_chunks, grid.width, cfg.model_dim
    z = chunk_split(h, grid)  # (B, C, W, D)
    pe_w = sinusoid_table(W, D, dt)[None]
    pe_c = sinusoid_table(C, D, dt)[None]
    intra_keys = np.tile(grid.frame_indices() < grid.length, (B, 1))  # hide padded keys
    causal = np.tril(np.ones((C, C), dtype=bool))

    def ffn(v, prefix):
        f = ag.layer_norm(v, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
        f = ag.linear(f, params[f"{prefix}.fc1.W"], params[f"{prefix}.fc1.b"])
        f = ag.linear(ag.gelu(f), params[f"{prefix}.fc2.W"], params[f"{prefix}.fc2.b"])
        return f

    for i in range(cfg.enc_layers):
        p = lambda name: params[f"enc{i}.{name}"]
        zi = ag.reshape(z, (B * C, W, D))
        a = ag.add_const(ag.layer_norm(zi, p("intra.ln.g"), p("intra.ln.b")), pe_w)
        zi = ag.add(zi, attention(a, p("intra.Wq"), p("intra.Wk"), p("intra.Wv"),
                                  p("intra.Wo"), cfg.heads, key_mask=intra_keys))
        zi = ag.add(zi, ffn(zi, f"enc{i}.intra.ffn"))
        zt = ag.reshape(ag.swapaxes(ag.reshape(zi, (B, C, W, D)), 1, 2), (B * W, C, D))
        a2 = ag.add_const(ag.layer_norm(zt, p("inter.ln.g"), p("inter.ln.b")), pe_c)
        zt = ag.add(zt, attention(a2, p("inter.Wq"), p("inter.Wk"), p("inter.Wv"),
                                  p("inter.Wo"), cfg.heads, attn_mask=causal))
        zt = ag.add(zt, ffn(zt, f"enc{i}.inter.ffn"))
        z = ag.swapaxes(ag.reshape(zt, (B, W, C, D)), 1, 2)
    return chunk_merge(z, grid)


def encoder_grid(cfg: ModelConfig, length: int, width: int) -> ChunkGrid:
    # half hop rounds up so no frame is covered more than twice, which keeps
    # the overlap-add average bit-exact
    width = max(1, min(width, length))
    hop = width if (cfg.encoder != "dp-lstm" or cfg.lstm_chunk_hop == "full") else (width + 1) // 2
    return make_chunk_grid(length, width, hop)


def encode(params: dict[str, Node], cfg: ModelConfig, h: Node, width: int) -> Node:
    """Encode (T, D) or batched (B, T, D) channel representations."""
    squeeze = h.value.ndim == 2
    if squeeze:
        h = ag.reshape(h, (1,) + h.value.shape)
    if cfg.encoder == "lstm":
        out = _lstm_encode(params, cfg, h)
    else:
        grid = encoder_grid(cfg, h.value.shape[1], width)
        if cfg.encoder == "dp-lstm":
            out = dp_lstm_encode(params, cfg, h, grid)
        else:
            out = dp_transformer_encode(params, cfg, h, grid)
    return ag.reshape(out, out.value.shape[1:]) if squeeze else out


def encode_channels(params: dict[str, Node], cfg: ModelConfig, um: UnmixOutput, width: int) -> tuple[Node, Node]:
    """Encode both unmixed channels in one batched pass (they share T)."""
    T = um.ch1.value.shape[-2]
    pair = ag.concat(
        [ag.reshape(um.ch1, (1, T, cfg.model_dim)), ag.reshape(um.ch2, (1, T, cfg.model_dim))],
        axis=0,
    )
    out = encode(params, cfg, pair, width)
    return ag.index_axis0(out, 0), ag.index_axis0(out, 1)


def predict_states(params: dict[str, Node], cfg: ModelConfig, labels) -> Node:
    """Hidden state per label-prefix length: (U+1, P), row 0 = blank start."""
    ids = np.concatenate([[transducer.BLANK], np.asarray(labels, dtype=np.int64)])
    e = ag.take_rows(params["pred.embed"], ids)
    z = ag.reshape(e, (1, ids.size, cfg.pred_embed))
    for i in range(cfg.pred_layers):
        z = lstm_seq(z, params[f"pred{i}.Wx"], params[f"pred{i}.Wh"], params[f"pred{i}.b"])
    return ag.reshape(z, (ids.size, cfg.pred_hidden))


def _joint_combine(encp: Node, predp: Node, W: Node, b: Node) -> Node:
    """Fused tanh(encp[t] + predp[u]) @ W + b over the whole (T, U+1) grid.

    One node instead of a broadcast-add/tanh/matmul chain: the grid tensors
    are the largest in the model and the fusion avoids materializing
    intermediates twice.
    """
    z = np.tanh(encp.value[:, None, :] + predp.value[None, :, :])
    jdim = W.value.shape[0]
    vdim = W.value.shape[1]
    out = z.reshape(-1, jdim) @ W.value + b.value
    out = out.reshape(z.shape[:2] + (vdim,))

    def vjp(g):
        gf = g.reshape(-1, vdim)
        zf = z.reshape(-1, jdim)
        dW = zf.T @ gf
        db = gf.sum(axis=0)
        dz = (gf @ W.value.T).reshape(z.shape)
        dz *= 1.0 - z * z
        return dz.sum(axis=1), dz.sum(axis=0), dW, db

    return Node(out, (encp, predp, W, b), vjp)


def joint_logits(params: dict[str, Node], cfg: ModelConfig, enc: Node, labels,
                 pred: Node | None = None) -> Node:
    """Lattice logits (T, U+1, V+1): projected encoder and prediction states
    combine additively per cell, so frames never mix across time here."""
    if pred is None:
        pred = predict_states(params, cfg, labels)
    ep = ag.linear(enc, params["joint.enc.W"], params["joint.enc.b"])
    pp = ag.linear(pred, params["joint.pred.W"], params["joint.pred.b"])
    return _joint_combine(ep, pp, params["joint.out.W"], params["joint.out.b"])


def channel_loss_node(params, cfg, enc: Node, labels, pred: Node | None = None) -> Node:
    return transducer.rnnt_loss_node(joint_logits(params, cfg, enc, labels, pred=pred), labels)


# ---------------------------------------------------------------------------
# decoding (incremental, plain arrays)
# ---------------------------------------------------------------------------


class ChannelDecoder:
    """Incremental transducer scorer for one encoded channel.

    Prediction-network states are memoized per label prefix, so beam search
    pays one LSTM step per new prefix, not a rerun over the whole history.
    """

    def __init__(self, raw: dict[str, np.ndarray], cfg: ModelConfig, enc: np.ndarray):
        self.raw = raw
        self.cfg = cfg
        self.encp = enc @ raw["joint.enc.W"] + raw["joint.enc.b"]
        self._cache: dict[tuple[int, ...], tuple[list, np.ndarray]] = {}
        self._cache[()] = self._advance(
            [(np.zeros(cfg.pred_hidden, dtype=enc.dtype),) * 2] * cfg.pred_layers,
            transducer.BLANK,
        )

    def _advance(self, states, token):
        x = self.raw["pred.embed"][token]
        new_states = []
        for i, (h, c) in enumerate(states):
            h, c = lstm_cell(x, h, c,
                             self.raw[f"pred{i}.Wx"], self.raw[f"pred{i}.Wh"], self.raw[f"pred{i}.b"])
            new_states.append((h, c))
            x = h
        pp = x @ self.raw["joint.pred.W"] + self.raw["joint.pred.b"]
        return new_states, pp

    def _pred(self, prefix: tuple[int, ...]):
        if prefix not in self._cache:
            states, _ = self._pred(prefix[:-1])
            self._cache[prefix] = self._advance(states, prefix[-1])
        return self._cache[prefix]

    def step(self, t: int, prefix: tuple[int, ...]) -> np.ndarray:
        _, pp = self._pred(prefix)
        z = np.tanh(self.encp[t] + pp)
        return z @ self.raw["joint.out.W"] + self.raw["joint.out.b"]


def decode_channels(
    store: ParamStore,
    cfg: ModelConfig,
    features: np.ndarray,
    width: int,
    beam: int = 1,
    max_symbols_per_frame: int = 3,
) -> tuple[transducer.Hypothesis, transducer.Hypothesis]:
    """Unmix, encode, and decode both channels of one session."""
    leaves = store.leaves()
    um = unmix(leaves, cfg, ag.leaf(np.asarray(features, dtype=store.dtype)))
    e1, e2 = encode_channels(leaves, cfg, um, width)
    hyps = []
    for enc_node in (e1, e2):
        enc = enc_node.value
        dec = ChannelDecoder(store.params, cfg, enc)
        T = enc.shape[0]
        if beam == 1:
            hyps.append(transducer.greedy_decode(dec.step, T, max_symbols_per_frame))
        else:
            best, _ = transducer.beam_decode(dec.step, T, beam, max_symbols_per_frame)
            hyps.append(best)
    return hyps[0], hyps[1]
