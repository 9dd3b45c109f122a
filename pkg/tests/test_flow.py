import numpy as np
import pytest
from scipy import ndimage

from tempoflow import flow as F
from tempoflow import tensor as T
from tempoflow.scenes import SceneConfig, generate_clip
from tempoflow.tensor import Tape, Tensor


def test_warp_integer_flow_is_exact_shift():
    rng = np.random.default_rng(0)
    buf = rng.standard_normal((6, 8, 2))
    fl = np.zeros((6, 8, 2))
    fl[..., 1] = 1.0  # sample one column to the right
    out = F.warp(Tensor(buf), fl)
    assert np.array_equal(out.data[:, :-1], buf[:, 1:])
    assert np.array_equal(out.data[:, -1], buf[:, -1])  # clamped at the edge


def test_cycle_mask_exact_inverse_passes_at_zero_threshold():
    fl = np.zeros((5, 7, 2))
    fl[..., 1] = 1.0
    back = -fl
    assert F.cycle_mask(fl, back, tau_c=0.0).all()


def test_cycle_mask_threshold_is_inclusive():
    fl = np.zeros((4, 4, 2))
    back = np.zeros((4, 4, 2))
    back[..., 1] = 0.25  # residual norm exactly 0.25 everywhere
    assert F.cycle_mask(fl, back, tau_c=0.25).all()
    assert not F.cycle_mask(fl, back, tau_c=0.25 - 1e-9).any()


def test_cycle_mask_rejects_inconsistent_region():
    fl = np.zeros((8, 8, 2))
    back = np.zeros((8, 8, 2))
    back[:4, ..., 0] = 2.0  # top half disagrees
    m = F.cycle_mask(fl, back, tau_c=0.34)
    assert not m[:4].any()
    assert m[4:].all()


def test_canny_constant_image_has_no_edges():
    assert not F.canny_edges(np.full((20, 20), 3.7)).any()


def test_canny_step_edge_localized():
    img = np.zeros((24, 32))
    img[:, 16:] = 1.0
    edges = F.canny_edges(img)
    ys, xs = np.nonzero(edges)
    assert len(ys) >= 24  # at least one edge pixel per row
    assert np.all(np.abs(xs - 15.5) <= 1.5)
    rows = np.unique(ys)
    assert len(rows) == 24


def test_edge_exclusion_single_pixel_manhattan_ball():
    edges = np.zeros((17, 17), dtype=bool)
    edges[8, 8] = True
    mask = F.edge_exclusion_mask(edges, radius=2)
    excluded = ~mask
    ys, xs = np.nonzero(excluded)
    dist = np.abs(ys - 8) + np.abs(xs - 8)
    assert excluded.sum() == 13
    assert dist.max() <= 2
    # and every cell at Manhattan distance <= 2 is in the excluded set
    yy, xx = np.meshgrid(np.arange(17), np.arange(17), indexing="ij")
    ball = (np.abs(yy - 8) + np.abs(xx - 8)) <= 2
    assert np.array_equal(excluded, ball)


def test_edge_exclusion_no_edges_keeps_everything():
    assert F.edge_exclusion_mask(np.zeros((5, 5), dtype=bool)).all()


def hand_pair(c=1):
    """K=2, zero flow, pred_2 = pred_1 + 1 on every pixel and channel."""
    p1 = Tensor(np.zeros((4, 4, c)), requires_grad=True)
    p2 = Tensor(np.ones((4, 4, c)), requires_grad=True)
    zero = np.zeros((1, 4, 4, 2))
    return [p1, p2], zero, zero


def test_stabilization_hand_value_single_channel():
    with Tape():
        preds, ff, fb = hand_pair()
        loss = F.stabilization_loss(preds, ff, fb)
        assert abs(loss.item() - 1.0) <= 1e-12


def test_stabilization_channels_sum_not_average():
    with Tape():
        preds, ff, fb = hand_pair(c=3)
        loss = F.stabilization_loss(preds, ff, fb)
        assert abs(loss.item() - 3.0) <= 1e-12


def test_stabilization_mask_scales_numerator_only():
    class Stub:
        pass

    masks = Stub()
    m = np.zeros((4, 4), dtype=bool)
    m[:2] = True  # keep exactly half the pixels
    masks.combined_fwd = m[None]
    masks.combined_bwd = m[None]
    with Tape():
        preds, ff, fb = hand_pair()
        loss, stats = F.stabilization_loss(preds, ff, fb, masks=masks,
                                           return_stats=True)
    assert abs(loss.item() - 0.5) <= 1e-12
    assert abs(stats["valid_pixel_fraction"] - 0.5) <= 1e-12


def test_stabilization_identical_predictions_zero_loss_zero_grad():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((5, 5, 2))
    with Tape():
        p1 = Tensor(base.copy(), requires_grad=True)
        p2 = Tensor(base.copy(), requires_grad=True)
        zero = np.zeros((1, 5, 5, 2))
        loss = F.stabilization_loss([p1, p2], zero, zero)
        assert loss.item() == 0.0
        g1, g2 = T.grad(loss, [p1, p2])
    assert np.abs(g1.data).max() == 0.0
    assert np.abs(g2.data).max() == 0.0


def test_stabilization_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    k, h, w, c = 3, 6, 6, 2
    others = [Tensor(rng.standard_normal((h, w, c))) for _ in range(k - 1)]
    ff = rng.uniform(-1.4, 1.4, size=(k - 1, h, w, 2))
    fb = rng.uniform(-1.4, 1.4, size=(k - 1, h, w, 2))
    masks = None

    def f(p):
        return F.stabilization_loss([p] + others, ff, fb, masks=masks)

    report = T.finite_difference_check(f, rng.standard_normal((h, w, c)))
    assert report["passed"], report["max_rel_err"]


def test_mask_stack_shapes_and_disable_flags():
    clip = generate_clip(SceneConfig(k=4, h=32, w=32, seed=21))
    preds = [clip.gt_depth[t][..., None] for t in range(4)]
    ms = F.MaskStack(clip.flow_fwd, clip.flow_bwd, preds=preds)
    assert ms.combined_fwd.shape == (3, 32, 32)
    assert ms.combined_bwd.shape == (3, 32, 32)
    assert 0.0 < ms.valid_pixel_fraction() <= 1.0
    off = F.MaskStack(clip.flow_fwd, clip.flow_bwd, preds=preds,
                      use_cycle=False, use_edge=False)
    assert off.combined_fwd.all() and off.combined_bwd.all()
    assert off.valid_pixel_fraction() == 1.0


def test_stabilization_loss_monotone_in_noise_amplitude():
    # consistent predictions + noise of growing amplitude -> growing loss
    rng = np.random.default_rng(7)
    base = rng.standard_normal((6, 6, 1))
    eta = rng.standard_normal((6, 6, 1))
    zero = np.zeros((1, 6, 6, 2))
    losses = []
    for a in (0.01, 0.1, 1.0):
        with Tape():
            p1 = Tensor(base.copy())
            p2 = Tensor(base + a * eta)
            losses.append(F.stabilization_loss([p1, p2], zero, zero).item())
    assert losses[0] < losses[1] < losses[2]


def test_combined_masks_are_subset_of_each_family():
    clip = generate_clip(SceneConfig(k=4, h=32, w=32, seed=3))
    preds = [clip.gt_depth[t][..., None] for t in range(4)]
    ms = F.MaskStack(clip.flow_fwd, clip.flow_bwd, preds=preds)
    assert not (ms.combined_fwd & ~ms.cyc_fwd).any()
    assert not (ms.combined_fwd & ~ms.edge[1:]).any()
    assert not (ms.combined_bwd & ~ms.cyc_bwd).any()
    assert not (ms.combined_bwd & ~ms.edge[:-1]).any()


def fast_square_clip(start_seed=0):
    """A single rectangle translating >= 2 whole pixels per frame on each
    axis, so it carves occlusion strips wider than a tile boundary."""
    for seed in range(start_seed, start_seed + 300):
        cfg = SceneConfig(k=4, h=56, w=56, n_objects=(1, 1), kinds=("rect",),
                          vel_max=3.0, half_size=(8.0, 12.0),
                          integer_velocity=True, seed=seed)
        clip = generate_clip(cfg)
        v = clip.flow_fwd[0].reshape(-1, 2)
        v = v[np.abs(v).sum(axis=1) > 0]
        if len(v) and min(abs(v[0][0]), abs(v[0][1])) >= 2.0:
            return clip
    raise AssertionError("no suitable seed found")


def test_cycle_mask_on_estimated_flow_rejects_occluded_strip():
    rejected = occ_total = 0
    for start in (0, 10, 20):
        clip = fast_square_clip(start)
        ff, fb = F.estimate_flow_block_matching(clip.frames)
        for t in range(clip.k - 1):
            m = F.cycle_mask(fb[t], ff[t], tau_c=0.34)
            occluded = ~clip.occ_bwd[t]
            rejected += (~m & occluded).sum()
            occ_total += occluded.sum()
    assert occ_total > 0
    assert rejected / occ_total >= 0.8, rejected / occ_total


def test_edge_band_loss_mass_drops_with_masking():
    # sharp depth discontinuity + corrupted flow: the residual mass that the
    # loss sees inside the edge band must shrink a lot once masks apply
    clip = fast_square_clip()
    rng = np.random.default_rng(0)
    ff = clip.flow_fwd + rng.uniform(-0.5, 0.5, clip.flow_fwd.shape)
    fb = clip.flow_bwd + rng.uniform(-0.5, 0.5, clip.flow_bwd.shape)
    preds = [clip.gt_depth[t][..., None] for t in range(clip.k)]
    band = [~F.edge_exclusion_mask(F.canny_edges(clip.gt_depth[t]))
            for t in range(clip.k)]
    masks = F.MaskStack(ff, fb, preds=preds)
    mass_plain = mass_masked = 0.0
    for t in range(clip.k - 1):
        with T.no_grad():
            res_fwd = np.abs(F.warp(Tensor(preds[t]), fb[t]).data[..., 0]
                             - preds[t + 1][..., 0])
            res_bwd = np.abs(F.warp(Tensor(preds[t + 1]), ff[t]).data[..., 0]
                             - preds[t][..., 0])
        mass_plain += res_fwd[band[t + 1]].sum() + res_bwd[band[t]].sum()
        mass_masked += (res_fwd * masks.combined_fwd[t])[band[t + 1]].sum()
        mass_masked += (res_bwd * masks.combined_bwd[t])[band[t]].sum()
    assert mass_plain >= 5.0 * mass_masked, (mass_plain, mass_masked)


def test_block_matching_recovers_integer_translation():
    rng = np.random.default_rng(5)
    h, w = 40, 40
    yy, xx = np.meshgrid(np.arange(h + 8, dtype=float),
                         np.arange(w + 8, dtype=float), indexing="ij")
    tex = (np.sin(0.6 * yy + 0.3 * xx) + np.sin(0.2 * yy - 0.7 * xx + 1.0)
           + 0.05 * rng.standard_normal((h + 8, w + 8)))
    f0 = tex[4:4 + h, 4:4 + w]
    f1 = tex[3:3 + h, 2:2 + w]  # scene content moved by (+1, +2)
    frames = np.stack([f0, f1])[..., None].repeat(3, axis=-1)
    ff, fb = F.estimate_flow_block_matching(frames)
    inner = (slice(6, -6), slice(6, -6))
    assert np.array_equal(ff[0][inner], np.broadcast_to((1.0, 2.0), ff[0][inner].shape))
    assert np.array_equal(fb[0][inner], np.broadcast_to((-1.0, -2.0), fb[0][inner].shape))


def test_block_matching_static_scene_zero_flow():
    clip = generate_clip(SceneConfig(k=3, h=32, w=32, vel_max=1e-9, seed=6))
    ff, fb = F.estimate_flow_block_matching(clip.frames)
    assert np.abs(ff).max() == 0.0
    assert np.abs(fb).max() == 0.0


def test_block_matching_interior_of_moving_square_exact():
    clip = fast_square_clip()
    ff, _ = F.estimate_flow_block_matching(clip.frames)
    sq0 = clip.gt_depth[0] < 9.99
    interior = ndimage.binary_erosion(sq0, iterations=7)
    assert interior.sum() > 20
    assert np.array_equal(ff[0][interior], clip.flow_fwd[0][interior])


def test_block_matching_rejects_bad_parameters():
    frames = np.zeros((2, 16, 16, 3))
    with pytest.raises(ValueError):
        F.estimate_flow_block_matching(frames, window=4)
    with pytest.raises(ValueError):
        F.estimate_flow_block_matching(frames, search=0)
