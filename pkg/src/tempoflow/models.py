"""Per-frame geometry backbone and the temporal attention adapter.

The backbone is a small strided-conv encoder (3 -> 16 -> 32 -> 64, each
stage halving the grid) and a mirrored upsampling decoder with skip fusions,
topped by a 1x1 head: softplus for depth, L2 normalization for surface
normals.  The video model threads the same decoder through temporal
attention blocks at the three fusion boundaries.  Their output projections
start at zero, so a freshly adapted video model reproduces the image model
frame for frame, bit for bit; fine-tuning then moves it away from that
identity only where the stabilization objective asks it to.

The encoder is a feature extractor only: in video mode it runs outside the
gradient graph and its outputs enter the decoder as constants.
"""

import hashlib
import os

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad, record
from .config import write_kv_file, parse_kv_file

ENCODER_WIDTHS = (16, 32, 64)
DOWNSAMPLE = 8


# ------------------------------------------------------------- primitives

def conv2d(x, w, b, stride=1):
    """Same-padded 2-D convolution, H x W x Cin -> Ho x Wo x Cout.

    Implemented as one sliced matmul per kernel offset; the kernel is
    w[ky, kx, cin, cout].  Odd kernels only.
    """
    x, w, b = T.as_tensor(x), T.as_tensor(w), T.as_tensor(b)
    kh, kw, cin, cout = w.shape
    h, ww_ = x.shape[:2]
    pad = kh // 2
    xp = np.zeros((h + 2 * pad, ww_ + 2 * pad, cin))
    xp[pad:pad + h, pad:pad + ww_] = x.data
    ho = (h - 1) // stride + 1
    wo = (ww_ - 1) // stride + 1
    out = np.broadcast_to(b.data, (ho, wo, cout)).copy()
    wd = w.data
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
            out += (sl.reshape(-1, cin) @ wd[dy, dx]).reshape(ho, wo, cout)

    def bwd(g):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 1))
        if w.requires_grad:
            gw = np.empty_like(wd)
            gflat = g.reshape(-1, cout)
            for dy in range(kh):
                for dx in range(kw):
                    sl = xp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
                    gw[dy, dx] = sl.reshape(-1, cin).T @ gflat
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                        g @ wd[dy, dx].T
            gx = gxp[pad:pad + h, pad:pad + ww_]
        return gx, gw, gb

    return record(out, (x, w, b), bwd)


def upsample2x(x):
    """Nearest-neighbor doubling of the spatial grid."""
    x = T.as_tensor(x)
    h, w, c = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bwd(g):
        return (g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)),)

    return record(data, (x,), bwd)


def layernorm(x, scale, offset, eps=1e-5):
    """Normalize the trailing (channel) axis, then rescale and shift."""
    m = T.tmean(x, axis=-1, keepdims=True)
    d = x - m
    v = T.tmean(d * d, axis=-1, keepdims=True)
    return d / T.sqrt(v + eps) * scale + offset


def sinusoidal_pe(k, c):
    """Standard alternating sin/cos encoding over the time index."""
    pos = np.arange(k, dtype=np.float64)[:, None]
    idx = np.arange(c // 2, dtype=np.float64)[None, :]
    ang = pos / (10000.0 ** (2.0 * idx / c))
    pe = np.zeros((k, c))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


# ------------------------------------------------------------ parameters

class ConvParams:
    def __init__(self, w, b):
        self.w = w
        self.b = b

    def items(self):
        return [("w", self.w), ("b", self.b)]


class AttentionSublayerParams:
    def __init__(self, c):
        z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
        self.wq, self.bq = z(c, c), z(c)
        self.wk, self.bk = z(c, c), z(c)
        self.wv, self.bv = z(c, c), z(c)

    def items(self):
        return [("wq", self.wq), ("bq", self.bq), ("wk", self.wk),
                ("bk", self.bk), ("wv", self.wv), ("bv", self.bv)]


class TemporalBlockParams:
    """One adapter block: entry layernorm, two stacked attention sublayers,
    then a zero-initialized output projection applied residually."""

    def __init__(self, c, n_heads, n_sublayers=2, pe_len=64):
        if c % n_heads:
            raise ValueError("channels %d not divisible by %d heads" % (c, n_heads))
        self.c = c
        self.n_heads = n_heads
        self.pe_len = pe_len
        self.ln_scale = Tensor(np.ones(c), requires_grad=True)
        self.ln_offset = Tensor(np.zeros(c), requires_grad=True)
        self.sublayers = [AttentionSublayerParams(c) for _ in range(n_sublayers)]
        self.wo = Tensor(np.zeros((c, c)), requires_grad=True)
        self.bo = Tensor(np.zeros(c), requires_grad=True)

    def items(self):
        out = [("ln_scale", self.ln_scale), ("ln_offset", self.ln_offset)]
        for i, sub in enumerate(self.sublayers):
            out += [("sub%d.%s" % (i, k), t) for k, t in sub.items()]
        out += [("wo", self.wo), ("bo", self.bo)]
        return out


class ModelParams:
    """Parameter bundle for one predictor.

    enc: three strided conv stages (frozen after pretraining).
    dec: three fusion conv stages plus the final projection head.
    temporal: adapter blocks, empty for a pure image model.
    """

    def __init__(self, mode, enc, dec, head, temporal=(), n_heads=4):
        if mode not in ("depth", "normal"):
            raise ValueError("mode must be depth or normal, got %r" % (mode,))
        self.mode = mode
        self.enc = list(enc)
        self.dec = list(dec)
        self.head = head
        self.temporal = list(temporal)
        self.n_heads = n_heads

    @property
    def channels(self):
        return 1 if self.mode == "depth" else 3

    def encoder_items(self):
        return [("enc%d.%s" % (i, k), t)
                for i, p in enumerate(self.enc) for k, t in p.items()]

    def decoder_items(self, include_head=True):
        out = [("dec%d.%s" % (i, k), t)
               for i, p in enumerate(self.dec) for k, t in p.items()]
        if include_head:
            out += [("head.%s" % k, t) for k, t in self.head.items()]
        return out

    def temporal_items(self):
        return [("tb%d.%s" % (i, k), t)
                for i, blk in enumerate(self.temporal) for k, t in blk.items()]

    def named_items(self):
        return self.encoder_items() + self.decoder_items() + self.temporal_items()


def _he_conv(rng, kh, kw, cin, cout):
    lim = np.sqrt(6.0 / (kh * kw * cin))
    w = Tensor(rng.uniform(-lim, lim, size=(kh, kw, cin, cout)), requires_grad=True)
    b = Tensor(np.zeros(cout), requires_grad=True)
    return ConvParams(w, b)


def init_image_model(mode, seed=0):
    """Seeded per-frame model; everything trainable during pretraining."""
    rng = np.random.default_rng(seed)
    w1, w2, w3 = ENCODER_WIDTHS
    enc = [_he_conv(rng, 3, 3, 3, w1),
           _he_conv(rng, 3, 3, w1, w2),
           _he_conv(rng, 3, 3, w2, w3)]
    dec = [_he_conv(rng, 3, 3, w3 + w2, w2),
           _he_conv(rng, 3, 3, w2 + w1, w1),
           _he_conv(rng, 3, 3, w1, 8)]
    head = _he_conv(rng, 1, 1, 8, 1 if mode == "depth" else 3)
    return ModelParams(mode, enc, dec, head)


def init_adapter(backbone, n_blocks=3, n_heads=4, seed=0):
    """Clone a pretrained backbone and attach zero-acting temporal blocks.

    Q/K/V projections get scaled uniform noise; output projections stay
    all-zero so the assembled video model starts exactly at the image
    model's behavior.  Parameters are copied, never aliased, so several
    fine-tuning runs can share one backbone.
    """
    rng = np.random.default_rng(seed)
    copy = lambda p: ConvParams(Tensor(p.w.data.copy(), requires_grad=True),
                                Tensor(p.b.data.copy(), requires_grad=True))
    widths = list(ENCODER_WIDTHS[::-1])  # channel width at each injection site
    temporal = []
    for i in range(n_blocks):
        c = widths[i % len(widths)]
        blk = TemporalBlockParams(c, n_heads)
        lim = np.sqrt(3.0 / c)
        for sub in blk.sublayers:
            for name in ("wq", "wk", "wv"):
                getattr(sub, name).data[:] = rng.uniform(-lim, lim, size=(c, c))
        temporal.append(blk)
    return ModelParams(backbone.mode,
                       [copy(p) for p in backbone.enc],
                       [copy(p) for p in backbone.dec],
                       copy(backbone.head),
                       temporal, n_heads)


# --------------------------------------------------------------- forward

def _check_grid(h, w):
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError("frame size %dx%d not divisible by %d" % (h, w, DOWNSAMPLE))


def _encode(x, params):
    e1 = T.relu(conv2d(x, params.enc[0].w, params.enc[0].b, stride=2))
    e2 = T.relu(conv2d(e1, params.enc[1].w, params.enc[1].b, stride=2))
    e3 = T.relu(conv2d(e2, params.enc[2].w, params.enc[2].b, stride=2))
    return e1, e2, e3


def _fuse(x, skip, stage):
    up = upsample2x(x)
    if skip is not None:
        up = T.concat([up, skip], axis=-1)
    return T.relu(conv2d(up, stage.w, stage.b))


def _head(x, params):
    y = conv2d(x, params.head.w, params.head.b)
    if params.mode == "depth":
        return T.softplus(y)
    norm = T.sqrt(T.tsum(y * y, axis=-1, keepdims=True) + 1e-24)
    return y / norm


def image_forward(frame, params):
    """One frame in, one geometry buffer out.

    Also returns the decoder features at the three temporal injection
    sites, deepest first, for callers that want to splice across time.
    """
    frame = T.as_tensor(frame)
    _check_grid(*frame.shape[:2])
    e1, e2, e3 = _encode(frame, params)
    d3 = _fuse(e3, e2, params.dec[0])
    d2 = _fuse(d3, e1, params.dec[1])
    d1 = _fuse(d2, None, params.dec[2])
    return _head(d1, params), [e3, d3, d2]


def image_latent(frame, params):
    """The decoder's penultimate feature grid for one frame (pre-head)."""
    frame = T.as_tensor(frame)
    _check_grid(*frame.shape[:2])
    e1, e2, e3 = _encode(frame, params)
    d3 = _fuse(e3, e2, params.dec[0])
    d2 = _fuse(d3, e1, params.dec[1])
    return _fuse(d2, None, params.dec[2])


def encode_frames(frames, params):
    """Frozen per-frame encoder features, as plain arrays.

    Runs outside any tape: in video mode the encoder is a constant-feature
    provider, which also makes its features safe to cache across steps.
    """
    frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames,
                        dtype=np.float64)
    _check_grid(*frames.shape[1:3])
    feats = ([], [], [])
    with no_grad():
        for k in range(frames.shape[0]):
            for lst, e in zip(feats, _encode(Tensor(frames[k]), params)):
                lst.append(e.data)
    return tuple(np.stack(lst) for lst in feats)


def video_latents(enc_feats, params):
    """Temporally coupled decoding down to the penultimate feature stack.

    Temporal blocks, when present, run at the three fusion boundaries;
    without them this equals frame-by-frame decoding.
    """
    E1, E2, E3 = enc_feats
    k = E3.shape[0]
    tb = params.temporal

    def maybe_temporal(x, i):
        return temporal_attention(x, tb[i]) if i < len(tb) else x

    z = maybe_temporal(Tensor(E3), 0)
    d3 = T.stack([_fuse(z[t], Tensor(E2[t]), params.dec[0]) for t in range(k)])
    d3 = maybe_temporal(d3, 1)
    d2 = T.stack([_fuse(d3[t], Tensor(E1[t]), params.dec[1]) for t in range(k)])
    d2 = maybe_temporal(d2, 2)
    return T.stack([_fuse(d2[t], None, params.dec[2]) for t in range(k)])


def head_apply(latents, params):
    """Project a K-frame latent stack to output buffers, frame by frame."""
    latents = T.as_tensor(latents)
    return T.stack([_head(latents[t], params) for t in range(latents.shape[0])])


def decode_video(enc_feats, params):
    """Decode cached encoder features for all frames jointly."""
    return head_apply(video_latents(enc_feats, params), params)


def video_forward(frames, params):
    """Whole-clip prediction: frozen encoder, temporally coupled decoder."""
    return decode_video(encode_frames(frames, params), params)


# ------------------------------------------------------------- attention

def _linear(x, w, b):
    # x: B x K x c, w: c x c
    bsz, k, c = x.shape
    flat = T.matmul(T.reshape(x, (bsz * k, c)), w) + b
    return T.reshape(flat, (bsz, k, c))


def _multihead(x, sub, n_heads, collect=None):
    """softmax(Q K^T / sqrt(d)) V per head, over the middle (time) axis."""
    bsz, k, c = x.shape
    dh = c // n_heads

    def split(t):
        t = T.reshape(t, (bsz, k, n_heads, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (bsz * n_heads, k, dh))

    q = split(_linear(x, sub.wq, sub.bq))
    kk = split(_linear(x, sub.wk, sub.bk))
    v = split(_linear(x, sub.wv, sub.bv))
    logits = T.bmm(q, T.transpose(kk, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    att = T.softmax(logits, axis=-1)
    if collect is not None:
        collect.append(att.data.reshape(bsz, n_heads, k, k).copy())
    out = T.bmm(att, v)
    out = T.reshape(out, (bsz, n_heads, k, dh))
    out = T.transpose(out, (0, 2, 1, 3))
    return T.reshape(out, (bsz, k, c))


def temporal_attention(features, block, return_weights=False):
    """Mix a K x h x w x c feature stack across time at each location.

    Entry layernorm, sinusoidal time encoding, the block's stacked
    attention sublayers, then the output projection added residually.
    A zero projection makes this the identity.
    """
    features = T.as_tensor(features)
    k, h, w, c = features.shape
    x = T.transpose(T.reshape(features, (k, h * w, c)), (1, 0, 2))
    y = layernorm(x, block.ln_scale, block.ln_offset)
    y = y + sinusoidal_pe(k, c)
    weights = [] if return_weights else None
    for sub in block.sublayers:
        y = _multihead(y, sub, block.n_heads, collect=weights)
    y = _linear(y, block.wo, block.bo)
    out = features + T.reshape(T.transpose(y, (1, 0, 2)), (k, h, w, c))
    if return_weights:
        return out, weights
    return out


# ------------------------------------------------------------ checkpoints

def encoder_checksum(params):
    """Hex digest over the raw encoder parameter bytes, for freeze audits."""
    h = hashlib.sha256()
    for name, t in params.encoder_items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def save_checkpoint(path, params, step=0, ema=False):
    """Write every named parameter plus a small metadata file."""
    path = str(path)
    os.makedirs(path, exist_ok=True)
    for name, t in params.named_items():
        T.write_tnsr(os.path.join(path, name + ".tnsr"), t.data)
    write_kv_file(os.path.join(path, "meta.txt"), {
        "mode": params.mode,
        "widths": ",".join(str(w) for w in ENCODER_WIDTHS),
        "n_blocks": len(params.temporal),
        "n_heads": params.n_heads,
        "step": step,
        "ema": ema,
    })


def load_checkpoint(path):
    """Rebuild a ModelParams from a checkpoint directory.

    Returns (params, meta) where meta carries mode, step, and the EMA flag.
    Missing or malformed files surface as IOError.
    """
    path = str(path)
    raw = parse_kv_file(os.path.join(path, "meta.txt"))
    mode = raw["mode"]
    n_blocks = int(raw["n_blocks"])
    n_heads = int(raw["n_heads"])
    params = init_image_model(mode, seed=0)
    if n_blocks:
        params = init_adapter(params, n_blocks=n_blocks, n_heads=n_heads, seed=0)
    for name, t in params.named_items():
        t.data[:] = T.read_tnsr(os.path.join(path, name + ".tnsr"))
    meta = {"mode": mode, "step": int(raw["step"]),
            "ema": str(raw["ema"]).lower() in ("true", "1"),
            "n_blocks": n_blocks, "n_heads": n_heads}
    return params, meta
