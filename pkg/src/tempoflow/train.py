"""Losses, optimizer, and the two training loops.

Image pretraining fits the per-frame model to ground truth so it becomes a
competent but temporally jittery teacher.  Video fine-tuning then trains
the decoder and the temporal blocks against two terms: an affine-invariant
anchor to the frozen teacher on one random frame, and the masked warped
consistency loss across every adjacent pair.  Depth trains directly on the
predicted maps; surface normals train in the decoder's penultimate feature
grid, with pixels reached through a frozen projection head and a deferred
surrogate that keeps per-chunk memory while reproducing the exact full-clip
gradient.
"""

import csv
import os
import sys
import time
import dataclasses

import numpy as np

from . import tensor as T
from . import models as M
from .tensor import Tape, Tensor, no_grad
from .flow import MaskStack, stabilization_loss, estimate_flow_block_matching
from .config import ConfigError, TrainingDiverged, parse_kv_file, write_kv_file, coerce

LOG_COLUMNS = ["step", "loss_total", "loss_reg", "loss_stable", "lr",
               "valid_pixel_fraction", "wallclock_ms"]

# Pretraining normalizes the prediction with held statistics, re-snapshotted
# on this cadence; the floor keeps the divisor sane if a snapshot catches a
# near-flat output.  See pretrain_image_model for why per-step stats fail.
PRETRAIN_STAT_REFRESH = 500
PRETRAIN_CONTRAST_FLOOR = 0.05

# floor for the shared clip normalization of the stabilization term; see
# clip_contrast_normalized for why that normalization has to exist at all
STAB_CONTRAST_FLOOR = 0.05


# --------------------------------------------------------------- config

@dataclasses.dataclass
class TrainConfig:
    mode: str = "depth"
    total_steps: int = 1000
    batch_size: int = 1
    omega_reg: float = 1.0
    tau_c: float = 0.34
    edge_radius: int = 2
    lr: float = None
    warmup: int = None
    chunk_size: int = 4
    ema_decay: float = 0.999
    seed: int = 0
    flow_source: str = "analytic"
    use_masks: bool = True
    reg_all_frames: bool = False
    checkpoint_every: int = 0

    @property
    def lr_resolved(self):
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.mode == "depth" else 1e-5

    @property
    def warmup_resolved(self):
        if self.warmup is not None:
            return self.warmup
        # desk-scale runs get a proportionally shrunk warmup
        return 1000 if self.total_steps >= 5000 else 100

    def resolve(self):
        """Fill derived defaults and validate; returns self."""
        if self.mode not in ("depth", "normal"):
            raise ConfigError("mode must be depth or normal, got %r" % (self.mode,))
        if self.flow_source not in ("analytic", "estimated"):
            raise ConfigError("flow_source must be analytic or estimated, got %r"
                              % (self.flow_source,))
        if self.omega_reg < 0:
            raise ConfigError("omega_reg must be >= 0, got %g" % self.omega_reg)
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1), got %g" % self.ema_decay)
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1, got %d" % self.chunk_size)
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0, got %d" % self.total_steps)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1, got %d" % self.batch_size)
        if self.tau_c < 0:
            raise ConfigError("tau_c must be >= 0, got %g" % self.tau_c)
        if self.edge_radius < 0:
            raise ConfigError("edge_radius must be >= 0, got %d" % self.edge_radius)
        self.lr = self.lr_resolved
        self.warmup = self.warmup_resolved
        return self

    def to_file(self, path):
        write_kv_file(path, dataclasses.asdict(self))

    @classmethod
    def from_file(cls, path):
        raw = parse_kv_file(path)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in raw.items():
            if key not in fields:
                raise ConfigError("%s: unknown config key %r" % (path, key))
            if key == "lr":
                kwargs[key] = None if val == "None" else float(val)
            elif key == "warmup":
                kwargs[key] = None if val == "None" else int(val)
            else:
                kwargs[key] = coerce(val, fields[key].default)
        return cls(**kwargs).resolve()


# ------------------------------------------------- affine-invariant terms

def normalize_affine_invariant(map_t):
    """Shift by the (lower) median, scale by the mean absolute deviation.

    Both statistics are detached constants, so gradients see a fixed affine
    reparametrization.  A near-constant map cannot be normalized; it comes
    back as zeros with the degenerate flag set.
    """
    map_t = T.as_tensor(map_t)
    flat = np.sort(map_t.data.ravel())
    t = float(flat[(flat.size - 1) // 2])
    s = float(np.abs(map_t.data - t).mean())
    if s < 1e-8:
        return Tensor(np.zeros_like(map_t.data)), t, 0.0, True
    return (map_t - t) * (1.0 / s), t, s, False


def depth_regularization_loss(pred, ref):
    """Affine-invariant anchor of a predicted map to a reference map.

    (1/HW) * L2 distance between the two normalized maps; gradient reaches
    the prediction only.  Returns (loss, degenerate).
    """
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=np.float64)
    npred, _, _, dp = normalize_affine_invariant(pred)
    nref, _, _, dr = normalize_affine_invariant(Tensor(ref))
    if dp or dr:
        return T.as_tensor(0.0), True
    size = float(ref.size)
    return T.l2_norm(npred - nref.data) * (1.0 / size), False


def latent_regularization_loss(pred_z, ref_z):
    """(1/HW) * L2 distance between latent grids; HW is the spatial size."""
    ref_z = np.asarray(ref_z.data if isinstance(ref_z, Tensor) else ref_z,
                       dtype=np.float64)
    pred_z = T.as_tensor(pred_z)
    hw = float(pred_z.shape[0] * pred_z.shape[1])
    return T.l2_norm(pred_z - ref_z) * (1.0 / hw)


def clip_contrast_normalized(preds):
    """Rescale a clip's depth maps by one shared median/contrast pair.

    The warped-consistency term must not compare raw depth values: the
    anchor loss is affine-invariant, so uniformly fading every frame
    toward a constant map leaves it unchanged while driving the warped
    differences to zero -- fine-tuning finds that path and collapses the
    output.  Dividing by statistics of the predictions themselves makes a
    uniform affine drift loss-neutral, and the statistics must stay on the
    tape for that to hold of the gradient too: with detached statistics
    the backward pass sees a frozen-scale landscape in which shrinking the
    output still lowers the loss, the statistics re-track on the next
    step, and the optimizer rides that direction all the way down.  With
    the median and contrast differentiated through, the gradient of a
    uniform affine change is exactly zero.  The statistics are shared
    across the clip (not per frame) so that per-frame affine flicker, the
    thing the loss exists to remove, stays fully visible.  The divisor is
    floored so a degenerate clip cannot blow up the gradients.
    """
    flat = T.concat([T.reshape(p, (p.size,)) for p in preds])
    mid = int(np.argsort(flat.data, kind="stable")[(flat.size - 1) // 2])
    t = flat[mid:mid + 1]
    s = T.maximum(T.tmean(T.absolute(flat - t)), STAB_CONTRAST_FLOOR)
    return [(p - t) / s for p in preds]


def total_loss(preds, teacher_seq, flows, masks, k_reg, config,
               pred_latents=None, teacher_latents=None, return_stats=False):
    """Weighted single-frame regularization plus pairwise stabilization.

    preds: per-frame prediction Tensors.  teacher_seq: frozen reference
    maps (constants).  In normal mode pass latent grids and the anchor is
    computed there instead of on pixels; normal maps are unit vectors, so
    only the depth path needs the shared contrast normalization before the
    stabilization term.
    """
    flow_fwd, flow_bwd = flows
    stab_preds = preds if pred_latents is not None \
        else clip_contrast_normalized(preds)
    stable, sstats = stabilization_loss(stab_preds, flow_fwd, flow_bwd, masks,
                                        return_stats=True)
    ks = range(len(preds)) if config.reg_all_frames else [k_reg]
    reg = T.as_tensor(0.0)
    degenerate = False
    for kk in ks:
        if pred_latents is not None:
            reg = reg + latent_regularization_loss(pred_latents[kk],
                                                   teacher_latents[kk])
        else:
            term, dg = depth_regularization_loss(preds[kk][..., 0], teacher_seq[kk])
            degenerate = degenerate or dg
            reg = reg + term
    reg = reg * (config.omega_reg / float(len(ks)))
    total = reg + stable
    if return_stats:
        return total, {"loss_reg": float(reg.data),
                       "loss_stable": float(stable.data),
                       "valid_pixel_fraction": sstats["valid_pixel_fraction"],
                       "degenerate": degenerate}
    return total


# ---------------------------------------------------- deferred backprop

def deferred_backprop_loss(latents, decoder, pixel_loss, chunk_size, overlap=0):
    """Chunked surrogate for a pixel loss evaluated behind a frozen decoder.

    Splits the K-frame latent stack into chunks of `chunk_size`; each chunk
    (widened left by `overlap` frames for losses that couple neighbors) is
    decoded on its own short tape, pixel_loss(decoded, window_start,
    core_start, core_end) is evaluated, and its gradient g w.r.t. the
    chunk's latents is captured.  The returned surrogate sums
    stop_gradient(g) * z, so its gradient w.r.t. anything upstream of the
    latents equals the direct full-clip gradient exactly, while only one
    chunk of decoder activations lives at a time.  The surrogate's forward
    value is meaningless; only its gradient matters.  The decoder itself
    receives no gradient.
    """
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1, got %d" % chunk_size)
    latents = T.as_tensor(latents)
    k = latents.shape[0]
    total = T.as_tensor(0.0)
    for a in range(0, k, chunk_size):
        b = min(a + chunk_size, k)
        wa = max(0, a - overlap)
        leaf = Tensor(latents.data[wa:b].copy(), requires_grad=True)
        with Tape():
            value = pixel_loss(decoder(leaf), wa, a, b)
            g = T.grad(value, [leaf])[0]
        total = total + T.tsum(Tensor(g.data) * latents[wa:b])
    return total


# ------------------------------------------------------------ optimizer

def effective_lr(step, lr, warmup):
    """Linear warmup to the target rate; reaches it exactly at step=warmup."""
    if warmup is None or warmup <= 0:
        return lr
    return lr * min(1.0, step / warmup)


class OptimizerState:
    """Adam moments plus a step counter; shaped after the named parameters."""

    def __init__(self, named_params):
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}
        self.step = 0
        self.skipped = 0


def optimizer_step(named_params, grads, state, config,
                   beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay adaptive update over all parameters.

    Non-finite gradients skip the whole update (moments included) but still
    advance the step counter.  Returns the learning rate applied.
    """
    gs = [np.asarray(g.data if isinstance(g, Tensor) else g) for g in grads]
    if not all(np.isfinite(g).all() for g in gs):
        state.step += 1
        state.skipped += 1
        print("optimizer: non-finite gradient at step %d, skipping" % state.step,
              file=sys.stderr)
        return 0.0
    lr = effective_lr(state.step, config.lr_resolved, config.warmup_resolved)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for (name, p), g in zip(named_params, gs):
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        p.data *= (1.0 - lr * weight_decay)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return lr


def ema_update(shadow, named_params, decay):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, p in named_params:
        shadow[name] = decay * shadow[name] + (1.0 - decay) * p.data


def apply_ema(params, shadow):
    """A parameter bundle with the shadow values swapped in."""
    out = M.init_adapter(params, n_blocks=len(params.temporal),
                         n_heads=params.n_heads, seed=0) \
        if params.temporal else M.init_image_model(params.mode, seed=0)
    for name, t in out.named_items():
        t.data[:] = shadow[name]
    return out


# -------------------------------------------------------- training loops

def _load_clip(corpus, i):
    return corpus.load(i) if hasattr(corpus, "load") else corpus[i]


def _corpus_len(corpus):
    return len(corpus)


def pretrain_image_model(corpus, config, out_dir=None):
    """Fit the per-frame model to ground truth, one random frame at a time.

    Depth uses the affine-invariant anchor against the true depth map;
    normals use a plain scaled L2 against the true normal map.  The frames
    carry the generator's photometric jitter, so the result is exactly the
    kind of teacher the video stage needs: sharp per frame, inconsistent
    across frames.

    The depth anchor normalizes the prediction with *held* statistics,
    re-snapshotted every PRETRAIN_STAT_REFRESH steps, instead of the
    per-step statistics the anchor uses elsewhere.  Per-step stats make the
    loss blind to a uniform shrink of the output (the stats track it), and
    the shrink direction gets consistent gradient signs, so the adaptive
    optimizer walks the output scale down until the head saturates and
    learning dies.  Holding the stats turns the shrink into a visible loss
    increase, which pins the scale while the shape converges.  The
    reference side carries no such feedback loop and is normalized fresh.
    """
    cfg = dataclasses.replace(config).resolve()
    rng = np.random.default_rng(cfg.seed)
    params = M.init_image_model(cfg.mode, seed=cfg.seed)
    named = params.encoder_items() + params.decoder_items()
    state = OptimizerState(named)
    n = _corpus_len(corpus)
    t_hold = s_hold = None
    hold_step = 0
    writer, fh = None, None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            with Tape():
                loss = T.as_tensor(0.0)
                for _ in range(cfg.batch_size):
                    clip = _load_clip(corpus, int(rng.integers(n)))
                    fi = int(rng.integers(clip.k))
                    buf, _ = M.image_forward(Tensor(clip.frames[fi]), params)
                    if cfg.mode == "depth":
                        pred = buf[..., 0]
                        if t_hold is None or step - hold_step >= PRETRAIN_STAT_REFRESH:
                            flat = np.sort(pred.data.ravel())
                            t_hold = float(flat[(flat.size - 1) // 2])
                            s_hold = max(float(np.abs(pred.data - t_hold).mean()),
                                         PRETRAIN_CONTRAST_FLOOR)
                            hold_step = step
                        ref = np.asarray(clip.gt_depth[fi], dtype=np.float64)
                        nref, _, _, dg = normalize_affine_invariant(Tensor(ref))
                        if dg:
                            continue    # flat reference, no shape signal
                        diff = (pred - t_hold) * (1.0 / s_hold) - nref.data
                        term = T.l2_norm(diff) * (1.0 / float(ref.size))
                    else:
                        term = latent_regularization_loss(buf,
                                                          clip.gt_normals[fi])
                    loss = loss + term
                loss = loss * (1.0 / cfg.batch_size)
                if not np.isfinite(loss.data):
                    if out_dir is not None:
                        M.save_checkpoint(os.path.join(out_dir, "checkpoint"),
                                          params, step=step)
                    raise TrainingDiverged(
                        "pretraining loss non-finite at step %d" % step)
                grads = T.grad(loss, [t for _, t in named]) \
                    if loss.requires_grad else None
            if grads is None:
                # every reference in the batch was flat; nothing to fit
                state.step += 1
                state.skipped += 1
                lr = 0.0
            else:
                lr = optimizer_step(named, grads, state, cfg)
            if writer is not None:
                # per-frame anchoring only: no stabilization, no masks
                row = {"step": step, "loss_total": float(loss.data),
                       "loss_reg": float(loss.data), "loss_stable": 0.0,
                       "lr": lr, "valid_pixel_fraction": 1.0,
                       "wallclock_ms": (time.perf_counter() - t0) * 1000.0}
                writer.writerow([row[c] for c in LOG_COLUMNS])
            if (out_dir is not None and cfg.checkpoint_every
                    and (step + 1) % cfg.checkpoint_every == 0):
                M.save_checkpoint(os.path.join(out_dir, "checkpoint"),
                                  params, step=step + 1)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        M.save_checkpoint(os.path.join(out_dir, "checkpoint"), params,
                          step=cfg.total_steps)
    return params


class _MaskWindow:
    """Pair-sliced view of a mask stack for chunked stabilization."""

    def __init__(self, masks, lo, hi):
        self.combined_fwd = masks.combined_fwd[lo:hi]
        self.combined_bwd = masks.combined_bwd[lo:hi]


def train_video(corpus, backbone, config, out_dir=None):
    """Self-supervised fine-tuning of the temporally coupled decoder.

    Per step: draw a clip, anchor one random frame to the frozen teacher,
    and push every adjacent pair toward warped consistency under the
    validity masks (cycle masks from the configured flow source, edge bands
    from the current prediction, recomputed each step and held constant).
    Returns (params, ema_shadow, log_rows).
    """
    cfg = dataclasses.replace(config).resolve()
    rng = np.random.default_rng(cfg.seed)
    params = M.init_adapter(backbone, seed=cfg.seed)
    depth = cfg.mode == "depth"
    named = params.decoder_items(include_head=depth) + params.temporal_items()
    state = OptimizerState(named)
    shadow = {name: t.data.copy() for name, t in params.named_items()}
    n = _corpus_len(corpus)

    enc_cache, teacher_cache, flow_cache = {}, {}, {}

    def clip_bundle(ci):
        if ci not in enc_cache:
            clip = _load_clip(corpus, ci)
            enc_cache[ci] = (clip, M.encode_frames(clip.frames, params))
            with no_grad():
                if depth:
                    teacher_cache[ci] = [
                        M.image_forward(Tensor(clip.frames[t]), backbone)[0]
                        .data[..., 0].copy() for t in range(clip.k)]
                else:
                    teacher_cache[ci] = [
                        M.image_latent(Tensor(clip.frames[t]), backbone)
                        .data.copy() for t in range(clip.k)]
            if cfg.flow_source == "analytic":
                flow_cache[ci] = (clip.flow_fwd, clip.flow_bwd)
            else:
                flow_cache[ci] = estimate_flow_block_matching(clip.frames)
        return enc_cache[ci][0], enc_cache[ci][1], teacher_cache[ci], flow_cache[ci]

    rows = []
    log_path = None
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    def checkpoint(step):
        if out_dir is None:
            return
        M.save_checkpoint(os.path.join(out_dir, "checkpoint"), params, step=step)
        M.save_checkpoint(os.path.join(out_dir, "checkpoint_ema"),
                          apply_ema(params, shadow), step=step, ema=True)

    try:
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            ci = int(rng.integers(n))
            clip, encf, teacher, (ff, fb) = clip_bundle(ci)
            k_reg = int(rng.integers(clip.k))
            with Tape():
                if depth:
                    pred = M.decode_video(encf, params)
                    preds = [pred[t] for t in range(clip.k)]
                    masks = MaskStack(ff, fb, preds=[p.data for p in preds],
                                      tau_c=cfg.tau_c,
                                      edge_radius=cfg.edge_radius) \
                        if cfg.use_masks else None
                    loss, stats = total_loss(preds, teacher, (ff, fb), masks,
                                             k_reg, cfg, return_stats=True)
                    loss_value = float(loss.data)
                else:
                    lat = M.video_latents(encf, params)
                    with no_grad():
                        px = M.head_apply(Tensor(lat.data), params)
                    masks = MaskStack(ff, fb, preds=[px.data[t] for t in
                                                     range(clip.k)],
                                      tau_c=cfg.tau_c,
                                      edge_radius=cfg.edge_radius) \
                        if cfg.use_masks else None
                    ks = range(clip.k) if cfg.reg_all_frames else [k_reg]
                    reg = T.as_tensor(0.0)
                    for kk in ks:
                        reg = reg + latent_regularization_loss(lat[kk],
                                                               teacher[kk])
                    reg = reg * (cfg.omega_reg / float(len(ks)))
                    pair_total = float(clip.k - 1)

                    def pixel_loss(decoded, wa, a, b):
                        lo, hi = max(0, a - 1), b - 1
                        if hi <= lo:
                            return T.as_tensor(0.0)
                        frames_ = [decoded[i] for i in range(b - wa)]
                        mw = _MaskWindow(masks, lo, hi) if masks is not None \
                            else None
                        s = stabilization_loss(frames_, ff[lo:hi], fb[lo:hi], mw)
                        return s * ((len(frames_) - 1) / pair_total)

                    stable = deferred_backprop_loss(
                        lat, lambda z: M.head_apply(z, params), pixel_loss,
                        cfg.chunk_size, overlap=1)
                    with no_grad():
                        s_true, sstats = stabilization_loss(
                            [px[t] for t in range(clip.k)], ff, fb, masks,
                            return_stats=True)
                    loss = reg + stable
                    stats = {"loss_reg": float(reg.data),
                             "loss_stable": float(s_true.data),
                             "valid_pixel_fraction":
                                 sstats["valid_pixel_fraction"]}
                    loss_value = stats["loss_reg"] + stats["loss_stable"]
                if not np.isfinite(loss_value):
                    checkpoint(step)
                    raise TrainingDiverged("loss non-finite at step %d" % step)
                grads = T.grad(loss, [t for _, t in named])
            lr = optimizer_step(named, grads, state, cfg)
            ema_update(shadow, named, cfg.ema_decay)
            row = {"step": step, "loss_total": loss_value,
                   "loss_reg": stats["loss_reg"],
                   "loss_stable": stats["loss_stable"], "lr": lr,
                   "valid_pixel_fraction": stats["valid_pixel_fraction"],
                   "wallclock_ms": (time.perf_counter() - t0) * 1000.0}
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in LOG_COLUMNS])
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step + 1)
        checkpoint(cfg.total_steps)
    finally:
        if fh is not None:
            fh.close()
    return params, shadow, rows
