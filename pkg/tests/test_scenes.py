import dataclasses

import numpy as np
import pytest

from tempoflow import scenes
from tempoflow.config import ConfigError
from tempoflow.scenes import SceneConfig, VideoClip, derive_normals, generate_clip


def bilinear(field, y, x):
    """Straight-line bilinear lookup used as the test-side oracle."""
    h, w = field.shape[:2]
    y = np.clip(y, 0, h - 1)
    x = np.clip(x, 0, w - 1)
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * field[y0, x0] + (1 - fy) * fx * field[y0, x0 + 1]
            + fy * (1 - fx) * field[y0 + 1, x0] + fy * fx * field[y0 + 1, x0 + 1])


def square_clip(vel, k=4, jitter=0.0, seed=7):
    """Single opaque square on a static background; motion fully analytic."""
    cfg = SceneConfig(k=k, h=32, w=32, n_objects=(1, 1), kinds=("rect",),
                      vel_max=max(abs(vel[0]), abs(vel[1]), 0.1) + 1e-9,
                      jitter=jitter, half_size=(6.0, 6.0), seed=seed)
    clip = generate_clip(cfg)
    return clip


def test_static_scene_zero_flow_full_occ():
    cfg = SceneConfig(k=3, h=32, w=32, n_objects=(2, 2), vel_max=1e-12, seed=3)
    clip = generate_clip(cfg)
    assert np.abs(clip.flow_fwd).max() <= 1e-10
    assert np.abs(clip.flow_bwd).max() <= 1e-10
    assert clip.occ_fwd.all()
    assert clip.occ_bwd.all()


def test_same_seed_bit_identical():
    cfg = SceneConfig(k=4, h=32, w=32, seed=11)
    a, b = generate_clip(cfg), generate_clip(cfg)
    for name in ("frames", "gt_depth", "gt_normals", "flow_fwd", "flow_bwd",
                 "occ_fwd", "occ_bwd"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_translating_square_flow_and_occlusion_strips():
    # force a deterministic square moving (2, 0): take any generated clip
    # and check the analytic relations between id-derived fields directly
    for seed in range(20):
        clip = square_clip((2.0, 0.0), seed=seed)
        moving = np.abs(clip.flow_fwd[0]).sum(axis=-1) > 0
        if moving.any():
            break
    vel = clip.flow_fwd[0][moving][0]
    # all moving pixels carry the same per-object velocity; background zero
    assert (clip.flow_fwd[0][moving] == vel).all()
    assert (clip.flow_fwd[0][~moving] == 0.0).all()
    # backward flow on the next frame's grid is the negated velocity
    movin_b = np.abs(clip.flow_bwd[0]).sum(axis=-1) > 0
    assert np.allclose(clip.flow_bwd[0][movin_b], -vel)


def test_integer_velocity_trailing_strip_occluded_in_occ_bwd():
    # hand-built expectation: with motion (+2, 0) the two rows the square
    # vacates have no valid backward correspondence
    cfg = SceneConfig(k=2, h=32, w=32, n_objects=(1, 1), kinds=("rect",),
                      vel_max=2.5, half_size=(6.0, 6.0), seed=None)
    found = False
    for seed in range(200):
        clip = generate_clip(dataclasses.replace(cfg, seed=seed))
        vel = clip.flow_fwd[0].reshape(-1, 2)
        vel = vel[np.abs(vel).sum(axis=1) > 0]
        if not len(vel):
            continue
        v = vel[0]
        if not (abs(v[0]) >= 1.0 and abs(v[1]) >= 1.0):
            continue
        found = True
        break
    assert found
    # oracle: object footprint recovered from the depth maps (background sits
    # at 10.0, every object strictly nearer)
    sq0 = clip.gt_depth[0] < 9.99
    sq1 = clip.gt_depth[1] < 9.99
    # occ_bwd false exactly where background is newly revealed (was covered)
    revealed = (~sq1) & sq0
    assert revealed.any()
    assert not clip.occ_bwd[0][revealed].any()
    # interior background pixels far from the square stay valid
    quiet = (~sq0) & (~sq1)
    assert clip.occ_bwd[0][quiet].all()


@pytest.mark.parametrize("seed", range(8))
def test_cycle_consistency_exact_off_occlusions(seed):
    cfg = SceneConfig(k=5, h=48, w=48, seed=seed)
    clip = generate_clip(cfg)
    h, w = cfg.h, cfg.w
    for t in range(cfg.k - 1):
        occ = clip.occ_fwd[t]
        ys, xs = np.nonzero(occ)
        take = slice(0, None, max(1, len(ys) // 400))
        for y, x in zip(ys[take], xs[take]):
            d = clip.flow_fwd[t, y, x]
            ty, tx = y + d[0], x + d[1]
            back = bilinear(clip.flow_bwd[t], ty, tx)
            err = np.hypot(ty + back[0] - y, tx + back[1] - x)
            assert err <= 1e-6, (t, y, x, err)


@pytest.mark.parametrize("jitter", [0.0, 0.2])
def test_warp_reproduces_next_frame_on_valid_pixels(jitter):
    cfg = SceneConfig(k=4, h=48, w=48, jitter=jitter, seed=5)
    clip = generate_clip(cfg)
    tol = jitter + 2.0 / 255.0
    for t in range(cfg.k - 1):
        occ = clip.occ_fwd[t]
        ys, xs = np.nonzero(occ)
        take = slice(0, None, max(1, len(ys) // 300))
        worst = 0.0
        for y, x in zip(ys[take], xs[take]):
            d = clip.flow_fwd[t, y, x]
            sampled = bilinear(clip.frames[t + 1], y + d[0], x + d[1])
            worst = max(worst, np.abs(sampled - clip.frames[t, y, x]).max())
        assert worst <= tol, (t, worst, tol)


def test_ground_truth_invariant_to_jitter_amplitude():
    a = generate_clip(SceneConfig(k=3, h=32, w=32, jitter=0.0, seed=9))
    b = generate_clip(SceneConfig(k=3, h=32, w=32, jitter=0.35, seed=9))
    for name in ("gt_depth", "gt_normals", "flow_fwd", "flow_bwd", "occ_fwd", "occ_bwd"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert not np.array_equal(a.frames, b.frames)


def test_depth_positive_and_normals_unit():
    clip = generate_clip(SceneConfig(k=3, h=32, w=32, seed=13))
    assert (clip.gt_depth > 0).all()
    norms = np.sqrt((clip.gt_normals ** 2).sum(axis=-1))
    assert np.abs(norms - 1.0).max() <= 1e-9
    assert (clip.gt_normals[..., 2] <= 0).all()


def test_degenerate_config_rejected():
    with pytest.raises(ConfigError):
        generate_clip(SceneConfig(h=24, w=24, half_size=(5.0, 30.0)))
    with pytest.raises(ConfigError):
        generate_clip(SceneConfig(k=1))
    with pytest.raises(ConfigError):
        generate_clip(SceneConfig(vel_max=40.0))


def test_derive_normals_constant_plane():
    n = derive_normals(np.full((16, 16), 4.2), focal=8.0)
    assert np.abs(n - np.array([0.0, 0.0, -1.0])).max() <= 1e-9


def test_derive_normals_analytic_slanted_plane():
    # camera-space plane z = z0 + a*X built exactly in pixel coordinates:
    # X = (u - cu) * z / f  =>  z(u) = z0 / (1 - a*(u - cu)/f)
    h, w, f, z0, a = 24, 24, 16.0, 5.0, 0.2
    cu = (w - 1) / 2.0
    u = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    z = z0 / (1.0 - a * (u - cu) / f)
    n = derive_normals(z, focal=f)
    expect = np.array([-a, 0.0, -1.0]) / np.sqrt(1.0 + a * a)
    # central differences are not exact on this curved-in-u profile, so
    # compare in the interior with a modest tolerance
    err = np.abs(n[2:-2, 2:-2] - expect).max()
    assert err <= 5e-3, err


def test_corpus_round_trip(tmp_path):
    clips = [generate_clip(SceneConfig(k=3, h=32, w=32, seed=s)) for s in (1, 2, 3)]
    ids = scenes.write_corpus(clips, tmp_path / "corpus")
    corpus = scenes.read_corpus(tmp_path / "corpus")
    assert corpus.ids == ids == ["clip_000", "clip_001", "clip_002"]
    assert [e[1] for e in corpus.entries] == [1, 2, 3]
    again = corpus.load("clip_001")
    for name in ("frames", "gt_depth", "gt_normals", "flow_fwd", "flow_bwd"):
        assert np.array_equal(getattr(again, name), getattr(clips[1], name)), name
    assert np.array_equal(again.occ_fwd, clips[1].occ_fwd)


def test_corpus_missing_flow_file_names_it(tmp_path):
    clips = [generate_clip(SceneConfig(k=2, h=32, w=32, seed=1))]
    scenes.write_corpus(clips, tmp_path / "c")
    (tmp_path / "c" / "clip_000" / "flow_fwd.tnsr").unlink()
    corpus = scenes.read_corpus(tmp_path / "c")
    with pytest.raises(IOError, match="flow_fwd.tnsr"):
        corpus.load(0)
