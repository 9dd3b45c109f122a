"""Warping, validity masks, and the temporal stabilization loss.

Flow arrays follow the conventions of the scene generator: ``flow_fwd[k]``
lives on frame k's grid and points at frame k+1; ``flow_bwd[k]`` lives on
frame k+1's grid and points back at frame k.  Each flow vector is (dy, dx)
in pixels.

Masks are plain boolean numpy arrays.  They are recomputed from the current
prediction (edges) and the flow fields (cycle consistency) and enter the
loss as constants, never as differentiable quantities.
"""

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor


def warp(buffer, flow):
    """Resample `buffer` (H,W,C) at grid + flow; differentiable in buffer.

    `flow` lives on the *target* grid: out[y, x] = buffer[y+dy, x+dx],
    so warping frame k's prediction by flow_bwd[k] produces its reprojection
    onto frame k+1's grid.
    """
    buffer = T.as_tensor(buffer)
    h, w = np.shape(flow)[:2]
    coords = T.identity_grid(h, w) + np.asarray(flow, dtype=np.float64)
    return T.bilinear_sample(buffer, coords)


def cycle_mask(flow_ab, flow_ba, tau_c):
    """Forward-backward consistency test on flow_ab's grid.

    A pixel survives when following its flow and sampling the reverse flow
    lands it back within tau_c pixels (euclidean, inclusive so exact cycles
    pass even at tau_c = 0).
    """
    flow_ab = np.asarray(flow_ab, dtype=np.float64)
    flow_ba = np.asarray(flow_ba, dtype=np.float64)
    h, w = flow_ab.shape[:2]
    with T.no_grad():
        coords = T.identity_grid(h, w) + flow_ab
        back = T.bilinear_sample(Tensor(flow_ba), Tensor(coords)).data
    d = flow_ab + back
    return np.sqrt((d ** 2).sum(axis=-1)) <= tau_c


def canny_edges(image, low_frac=0.324, high_frac=0.90):
    """Edge map of a single-channel image (classic recipe, quantile thresholds).

    Gaussian blur (sigma 1), Sobel gradients, orientation-quantized
    non-maximum suppression, then hysteresis: weak pixels survive only in
    8-connected components that contain a strong pixel.  Thresholds are
    quantiles of the nonzero gradient magnitudes, so the operating point
    adapts to whatever value range the prediction currently has.  A constant
    image has no nonzero magnitudes and yields an all-false map.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=-1)
    smooth = ndimage.gaussian_filter(image, sigma=1.0, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    mag = np.hypot(gy, gx)
    nz = mag[mag > 0.0]
    if nz.size == 0:
        return np.zeros(image.shape, dtype=bool)
    high = np.quantile(nz, high_frac)
    low = np.quantile(nz, low_frac)

    # quantize orientation to 4 bins and keep local ridge maxima
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.round(angle / (np.pi / 4.0)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros(mag.shape, dtype=bool)
    for b, (dy, dx) in offsets.items():
        sel = bins == b
        ahead = padded[1 + dy:1 + dy + mag.shape[0], 1 + dx:1 + dx + mag.shape[1]]
        behind = padded[1 - dy:1 - dy + mag.shape[0], 1 - dx:1 - dx + mag.shape[1]]
        keep |= sel & (mag >= ahead) & (mag >= behind)

    strong = keep & (mag >= high)
    weak = keep & (mag >= low)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros(image.shape, dtype=bool)
    has_strong = np.zeros(count + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels]


def edge_exclusion_mask(edges, radius=2):
    """True away from edges: everything within Manhattan distance `radius`
    of an edge pixel is excluded."""
    edges = np.asarray(edges, dtype=bool)
    if not edges.any():
        return np.ones(edges.shape, dtype=bool)
    cross = ndimage.generate_binary_structure(2, 1)
    dilated = ndimage.binary_dilation(edges, structure=cross, iterations=radius)
    return ~dilated


class MaskStack:
    """Per-pair validity masks for a K-frame clip.

    cyc_fwd[k] lives on frame k+1's grid (where the forward loss residual is
    formed), cyc_bwd[k] on frame k's.  edge[k] is the edge-exclusion mask of
    frame k's prediction.  combined_* fold the two together; either family
    can be disabled, in which case its contribution is all-true.
    """

    def __init__(self, flow_fwd, flow_bwd, preds=None, tau_c=0.34,
                 edge_radius=2, use_cycle=True, use_edge=True):
        n = len(flow_fwd)
        h, w = np.shape(flow_fwd[0])[:2]
        full = np.ones((h, w), dtype=bool)
        if use_cycle:
            self.cyc_fwd = np.stack([cycle_mask(flow_bwd[k], flow_fwd[k], tau_c)
                                     for k in range(n)])
            self.cyc_bwd = np.stack([cycle_mask(flow_fwd[k], flow_bwd[k], tau_c)
                                     for k in range(n)])
        else:
            self.cyc_fwd = np.broadcast_to(full, (n, h, w)).copy()
            self.cyc_bwd = self.cyc_fwd.copy()
        if use_edge and preds is not None:
            self.edge = np.stack([
                edge_exclusion_mask(canny_edges(np.asarray(p.data if isinstance(p, Tensor) else p)),
                                    radius=edge_radius)
                for p in preds])
        else:
            self.edge = np.broadcast_to(full, (n + 1, h, w)).copy()
        self.combined_fwd = self.cyc_fwd & self.edge[1:]
        self.combined_bwd = self.cyc_bwd & self.edge[:-1]

    def valid_pixel_fraction(self):
        tot = self.combined_fwd.size + self.combined_bwd.size
        return float(self.combined_fwd.sum() + self.combined_bwd.sum()) / tot


def stabilization_loss(preds, flow_fwd, flow_bwd, masks=None, return_stats=False):
    """Symmetric warped-consistency loss over consecutive prediction pairs.

    For each pair (k, k+1): warp pred_k onto frame k+1's grid through the
    backward flow and penalize the per-pixel L1 gap against pred_{k+1} under
    the forward validity mask; symmetrically warp pred_{k+1} onto frame k's
    grid through the forward flow.  Each direction is averaged over the full
    (K-1)*H*W pixel count whatever the masks keep, so masking never inflates
    the per-pixel scale, and the two directions are averaged.
    """
    k = len(preds)
    if k < 2:
        raise ValueError("stabilization needs at least two frames")
    shape = preds[0].shape
    h, w = shape[:2]
    denom = float((k - 1) * h * w)
    full = np.ones((h, w), dtype=bool)
    total = T.as_tensor(0.0)
    kept = 0
    for i in range(k - 1):
        m_fwd = masks.combined_fwd[i] if masks is not None else full
        m_bwd = masks.combined_bwd[i] if masks is not None else full
        diff_fwd = T.absolute(warp(preds[i], flow_bwd[i]) - preds[i + 1])
        diff_bwd = T.absolute(warp(preds[i + 1], flow_fwd[i]) - preds[i])
        if diff_fwd.ndim == 3:
            diff_fwd = T.tsum(diff_fwd, axis=-1)
            diff_bwd = T.tsum(diff_bwd, axis=-1)
        total = total + T.tsum(T.apply_mask(diff_fwd, m_fwd))
        total = total + T.tsum(T.apply_mask(diff_bwd, m_bwd))
        kept += int(m_fwd.sum()) + int(m_bwd.sum())
    loss = total * (0.5 / denom)
    if return_stats:
        return loss, {"valid_pixel_fraction": kept / (2.0 * denom)}
    return loss


def estimate_flow_block_matching(frames, window=5, search=4):
    """Integer-displacement optical flow by per-tile SSD matching.

    The frame is cut into disjoint window x window tiles (codec style); each
    tile takes the integer displacement minimizing the SSD against the other
    frame, summed over color channels, and every pixel in the tile inherits
    it.  Tiles are normalized to zero mean and unit contrast per channel
    before differencing, so the per-frame gain/offset jitter the generator
    applies cannot masquerade as motion.  Candidates are scanned center-out
    so ties fall to the smallest displacement.  Returns (flow_fwd, flow_bwd)
    shaped like the analytic fields.  Deliberately crude: tiles straddling a
    motion boundary pick one side's motion wholesale, which is exactly the
    kind of error the validity masks exist to absorb.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive, got %d" % window)
    if search < 1:
        raise ValueError("search must be >= 1, got %d" % search)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[..., None]
    k, h, w = frames.shape[:3]
    flow_fwd = np.zeros((k - 1, h, w, 2))
    flow_bwd = np.zeros((k - 1, h, w, 2))
    for t in range(k - 1):
        flow_fwd[t] = _match_tiles(frames[t], frames[t + 1], window, search)
        flow_bwd[t] = _match_tiles(frames[t + 1], frames[t], window, search)
    return flow_fwd, flow_bwd


def _match_tiles(src, dst, window, search):
    h, w = src.shape[:2]
    ri = np.arange(0, h, window)
    ci = np.arange(0, w, window)
    # trailing tiles may be smaller than window x window
    cnt = np.outer(np.diff(np.append(ri, h)), np.diff(np.append(ci, w)))
    src_n = _tile_normalize(src, ri, ci, cnt, window, h, w)
    pad = search
    dst_pad = np.pad(dst, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    span = range(-search, search + 1)
    candidates = sorted(((dy, dx) for dy in span for dx in span),
                        key=lambda d: (d[0] * d[0] + d[1] * d[1], d))
    best_cost = np.full((len(ri), len(ci)), np.inf)
    best = np.zeros((len(ri), len(ci), 2))
    for dy, dx in candidates:
        shifted = dst_pad[pad + dy:pad + dy + h, pad + dx:pad + dx + w]
        sq = ((src_n - _tile_normalize(shifted, ri, ci, cnt, window, h, w)) ** 2).sum(axis=-1)
        cost = np.add.reduceat(np.add.reduceat(sq, ri, axis=0), ci, axis=1)
        better = cost < best_cost - 1e-9
        best_cost = np.where(better, cost, best_cost)
        best[better] = (dy, dx)
    flow = np.repeat(np.repeat(best, window, axis=0), window, axis=1)
    return flow[:h, :w]


def _tile_normalize(img, ri, ci, cnt, window, h, w):
    """Zero-mean, unit-contrast normalization of each tile, per channel."""
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        a = img[..., c]
        s1 = np.add.reduceat(np.add.reduceat(a, ri, axis=0), ci, axis=1)
        s2 = np.add.reduceat(np.add.reduceat(a * a, ri, axis=0), ci, axis=1)
        mean = s1 / cnt
        std = np.sqrt(np.maximum(s2 / cnt - mean ** 2, 0.0))
        mean = np.repeat(np.repeat(mean, window, axis=0), window, axis=1)[:h, :w]
        std = np.repeat(np.repeat(std, window, axis=0), window, axis=1)[:h, :w]
        out[..., c] = (a - mean) / np.maximum(std, 1e-12)
    return out
