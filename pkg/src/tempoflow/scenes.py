"""Procedural video clips with analytic ground truth.

Each clip is a set of textured sprites (rectangles, disks, slanted planes)
translating at constant velocity over a static textured background, drawn
in painter's order by object depth.  Because the motion model is known,
depth, normals, bidirectional flow, and occlusion masks all come out
analytically, which makes the warping losses exactly checkable.

Flow conventions (used by every other module):
  - flow_fwd[k] lives on frame k's grid and holds the displacement of each
    pixel from frame k to frame k+1 (+velocity for moving content).
  - flow_bwd[k] lives on frame k+1's grid and points back to frame k.
  - occ_fwd/occ_bwd mark where those correspondences are valid: the target
    stays in frame and every bilinear corner with nonzero weight at the
    target still belongs to the same object.  Off those masks the analytic
    round trip flow_fwd -> flow_bwd is exact to the last bit.

Color encodes depth: the red/green difference tracks a linear depth code
while textures and brightness jitter shift all channels equally, so a
per-frame model can recover depth but inherits the per-frame contrast
jitter as temporal inconsistency.  That jitter is the controlled pathology
the video fine-tuning stage is meant to remove; ground truth never sees it.
The code amplitude is kept at the scale of the surface textures: block
matching then has no overwhelming silhouette term, so its failures around
occlusions look like a real estimator's (wrong, not coherently wrong).
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .tensor import read_tnsr, write_tnsr


@dataclass(frozen=True)
class SceneConfig:
    k: int = 16
    h: int = 64
    w: int = 64
    n_objects: tuple = (3, 6)          # inclusive range
    kinds: tuple = ("rect", "disk", "slant")
    vel_max: float = 1.5               # per-axis pixels/frame
    jitter: float = 0.2                # bound on frame-to-frame photometric shift
    background_depth: float = 10.0
    object_depth: tuple = (2.0, 8.0)
    half_size: tuple = (5.0, 14.0)     # object half-extent range, pixels
    slant_max: float = 0.05            # depth units per pixel for slanted planes
    focal: float = 0.0                 # 0 means 0.5 * w
    integer_velocity: bool = False     # round velocities to whole pixels/frame
    seed: int = 0

    def resolved_focal(self):
        return self.focal if self.focal > 0 else 0.5 * self.w

    def validate(self):
        if self.k < 2:
            raise ConfigError("need at least 2 frames, got k=%d" % self.k)
        if self.h < 16 or self.w < 16:
            raise ConfigError("resolution below 16x16: %dx%d" % (self.h, self.w))
        if not (0 < self.n_objects[0] <= self.n_objects[1]):
            raise ConfigError("bad object count range %s" % (self.n_objects,))
        if self.vel_max >= min(self.h, self.w) / 4.0:
            raise ConfigError("vel_max %.3g exceeds min(H,W)/4" % self.vel_max)
        if 2 * self.half_size[1] >= min(self.h, self.w):
            raise ConfigError("object diameter %.3g does not fit a %dx%d frame"
                              % (2 * self.half_size[1], self.h, self.w))
        if self.jitter < 0:
            raise ConfigError("negative jitter amplitude")
        lo, hi = self.object_depth
        if not (0 < lo < hi < self.background_depth):
            raise ConfigError("object depths must satisfy 0 < lo < hi < background")
        for kind in self.kinds:
            if kind not in ("rect", "disk", "slant"):
                raise ConfigError("unknown object kind %r" % kind)


@dataclass
class VideoClip:
    frames: np.ndarray       # K,H,W,3 in [0,1]
    gt_depth: np.ndarray     # K,H,W
    gt_normals: np.ndarray   # K,H,W,3
    flow_fwd: np.ndarray     # K-1,H,W,2 (row, col) displacements
    flow_bwd: np.ndarray     # K-1,H,W,2
    occ_fwd: np.ndarray      # K-1,H,W bool
    occ_bwd: np.ndarray      # K-1,H,W bool
    seed: int
    scene_descriptor: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.frames.shape[0]


def _maybe_round(vel, integer):
    return np.round(vel) if integer else vel


def _object_membership(obj, centers, rr, cc):
    cy, cx = centers
    if obj["kind"] == "disk":
        return (rr - cy) ** 2 + (cc - cx) ** 2 <= obj["radius"] ** 2
    return (np.abs(rr - cy) <= obj["half"][0]) & (np.abs(cc - cx) <= obj["half"][1])


def _texture_params(rng, n_waves=3):
    # low-frequency sinusoids keep curvature under the bilinear blur
    # allowance used by the warp-consistency property
    return {
        "amps": rng.uniform(0.5, 1.0, size=n_waves),
        "thetas": rng.uniform(0.0, 2.0 * np.pi, size=n_waves),
        "freqs": rng.uniform(1.0 / 40.0, 1.0 / 16.0, size=n_waves),
        "phases": rng.uniform(0.0, 2.0 * np.pi, size=n_waves),
    }


def _eval_texture(params, rr, cc, amplitude):
    amps = params["amps"] * (amplitude / params["amps"].sum())
    out = np.zeros_like(rr)
    for a, th, f, ph in zip(amps, params["thetas"], params["freqs"], params["phases"]):
        out += a * np.sin(2.0 * np.pi * f * (np.cos(th) * rr + np.sin(th) * cc) + ph)
    return out


def _depth_code(depth, cfg):
    # linear code in (0,1): near objects bright-red, far background green-ish
    hi = cfg.background_depth + 0.5
    lo = cfg.object_depth[0] - 0.5
    return (hi - depth) / (hi - lo)


def generate_clip(cfg: SceneConfig) -> VideoClip:
    """Render one clip; deterministic in cfg.seed.

    The scene and jitter random streams are independent, and jitter draws
    are taken regardless of amplitude, so two configs differing only in
    `jitter` produce identical geometry and ground truth.
    """
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    rng_scene, rng_jitter = [np.random.default_rng(s) for s in seq.spawn(2)]
    k, h, w = cfg.k, cfg.h, cfg.w
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")

    n = int(rng_scene.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    lo, hi = cfg.object_depth
    # disjoint depth slots keep the painter order unambiguous
    slots = (np.arange(n) + rng_scene.uniform(0.1, 0.9, size=n)) * (hi - lo) / n + lo
    rng_scene.shuffle(slots)
    objects = []
    for i in range(n):
        kind = cfg.kinds[int(rng_scene.integers(len(cfg.kinds)))]
        half = rng_scene.uniform(cfg.half_size[0], cfg.half_size[1], size=2)
        obj = {
            "kind": kind,
            "center0": rng_scene.uniform([0.2 * h, 0.2 * w], [0.8 * h, 0.8 * w]),
            "vel": _maybe_round(rng_scene.uniform(-cfg.vel_max, cfg.vel_max,
                                                  size=2), cfg.integer_velocity),
            "depth": float(slots[i]),
            "half": half,
            "radius": float(half.mean()),
            "slant": (rng_scene.uniform(-cfg.slant_max, cfg.slant_max, size=2)
                      if kind == "slant" else np.zeros(2)),
            "texture": _texture_params(rng_scene),
            "texture_b": _texture_params(rng_scene),
        }
        objects.append(obj)
    bg_texture = _texture_params(rng_scene)
    bg_texture_b = _texture_params(rng_scene)
    order = sorted(range(n), key=lambda i: -objects[i]["depth"])  # far to near

    # jitter draws always consumed so the scene stream is amplitude-invariant
    gain = 1.0 + (cfg.jitter / 4.0) * rng_jitter.uniform(-1.0, 1.0, size=k)
    offset = (cfg.jitter / 4.0) * rng_jitter.uniform(-1.0, 1.0, size=k)

    frames = np.zeros((k, h, w, 3))
    gt_depth = np.zeros((k, h, w))
    gt_normals = np.zeros((k, h, w, 3))
    ids = np.zeros((k, h, w), dtype=np.int64)
    vel_by_id = np.zeros((n + 1, 2))
    for i, obj in enumerate(objects):
        vel_by_id[i + 1] = obj["vel"]

    focal = cfg.resolved_focal()
    for t in range(k):
        depth = np.full((h, w), cfg.background_depth)
        idmap = np.zeros((h, w), dtype=np.int64)  # 0 = background
        tex = _eval_texture(bg_texture, rr, cc, 0.08)
        # blue gets its own texture so no channel is a pure function of the
        # others; it rides along in object-local coordinates like `tex` so
        # warping a frame by the flow still reproduces the next one
        btex = _eval_texture(bg_texture_b, rr, cc, 0.05)
        for i in order:
            obj = objects[i]
            center = obj["center0"] + t * obj["vel"]
            mask = _object_membership(obj, center, rr, cc)
            local = obj["depth"] + obj["slant"][0] * (rr - center[0]) + obj["slant"][1] * (cc - center[1])
            depth[mask] = np.maximum(local[mask], 1.0)
            idmap[mask] = i + 1
            otex = _eval_texture(obj["texture"], rr - center[0], cc - center[1], 0.08)
            tex[mask] = otex[mask]
            obtex = _eval_texture(obj["texture_b"], rr - center[0], cc - center[1], 0.05)
            btex[mask] = obtex[mask]
        code = _depth_code(depth, cfg)
        img = np.stack([0.47 + 0.06 * code + tex,
                        0.53 - 0.06 * code + tex,
                        0.5 + tex + btex], axis=-1)
        frames[t] = np.clip(gain[t] * img + offset[t], 0.0, 1.0)
        gt_depth[t] = depth
        gt_normals[t] = derive_normals(depth, focal)
        ids[t] = idmap

    flow_fwd = np.zeros((k - 1, h, w, 2))
    flow_bwd = np.zeros((k - 1, h, w, 2))
    occ_fwd = np.zeros((k - 1, h, w), dtype=bool)
    occ_bwd = np.zeros((k - 1, h, w), dtype=bool)
    for t in range(k - 1):
        flow_fwd[t] = vel_by_id[ids[t]]
        flow_bwd[t] = -vel_by_id[ids[t + 1]]
        occ_fwd[t] = _correspondence_valid(ids[t], ids[t + 1], flow_fwd[t], rr, cc)
        occ_bwd[t] = _correspondence_valid(ids[t + 1], ids[t], flow_bwd[t], rr, cc)

    descriptor = {
        "k": k, "h": h, "w": w, "seed": cfg.seed, "n_objects": n,
        "jitter": cfg.jitter, "background_depth": cfg.background_depth,
        "focal": focal, "vel_max": cfg.vel_max,
    }
    return VideoClip(frames, gt_depth, gt_normals, flow_fwd, flow_bwd,
                     occ_fwd, occ_bwd, cfg.seed, descriptor)


def _correspondence_valid(id_src, id_dst, flow, rr, cc):
    """True where a pixel's analytic correspondence survives: target inside
    the frame and every nonzero-weight bilinear corner owned by the same
    object.  Zero-weight corners are ignored so integer motion gives clean
    occlusion strips."""
    h, w = id_src.shape
    ty = rr + flow[..., 0]
    tx = cc + flow[..., 1]
    # the epsilon forgives float noise in the analytic flow; a genuine exit
    # from the frame overshoots by a real velocity, not by 1e-9
    ok = ((ty >= -1e-9) & (ty <= h - 1.0 + 1e-9)
          & (tx >= -1e-9) & (tx <= w - 1.0 + 1e-9))
    y0 = np.clip(np.floor(ty).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(tx).astype(np.int64), 0, w - 1)
    fy = ty - y0
    fx = tx - x0
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            # corners whose bilinear weight is negligible cannot corrupt a
            # sample, so they do not get a vote; exact zeros keep integer
            # motion producing clean occlusion strips
            need = ok & (wy * wx > 1e-9)
            yy = np.clip(y0 + dy, 0, h - 1)
            xx = np.clip(x0 + dx, 0, w - 1)
            ok &= ~need | (id_dst[yy, xx] == id_src)
    return ok


def derive_normals(depth, focal):
    """Unit surface normals from a depth map under a pinhole camera.

    Principal point at the image center, x along columns, y along rows
    (screen-down), z into the scene.  A constant-depth plane maps to
    (0,0,-1); a plane with camera-space horizontal slope a maps to
    (-a,0,-1)/sqrt(1+a^2).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    z_r, z_c = np.gradient(depth)
    cr, ccol = (h - 1) / 2.0, (w - 1) / 2.0
    rows = np.arange(h, dtype=np.float64)[:, None] - cr
    cols = np.arange(w, dtype=np.float64)[None, :] - ccol
    n = np.stack([focal * z_c,
                  focal * z_r,
                  depth + cols * z_c + rows * z_r], axis=-1)
    n /= -np.sqrt((n ** 2).sum(axis=-1, keepdims=True) + 1e-24)
    # nz > 0 can only happen at extreme discontinuities; keep camera-facing
    n = np.where(n[..., 2:3] > 0.0, -n, n)
    return n


def write_corpus(clips, directory, ids=None):
    """Write clips under `directory` with a manifest; returns the clip ids."""
    os.makedirs(directory, exist_ok=True)
    if ids is None:
        ids = ["clip_%03d" % i for i in range(len(clips))]
    lines = []
    for cid, clip in zip(ids, clips):
        cdir = os.path.join(directory, cid)
        os.makedirs(cdir, exist_ok=True)
        write_tnsr(os.path.join(cdir, "frames.tnsr"), clip.frames)
        write_tnsr(os.path.join(cdir, "gt_depth.tnsr"), clip.gt_depth)
        write_tnsr(os.path.join(cdir, "gt_normals.tnsr"), clip.gt_normals)
        write_tnsr(os.path.join(cdir, "flow_fwd.tnsr"), clip.flow_fwd)
        write_tnsr(os.path.join(cdir, "flow_bwd.tnsr"), clip.flow_bwd)
        write_tnsr(os.path.join(cdir, "occ_fwd.tnsr"), clip.occ_fwd.astype(np.float64))
        write_tnsr(os.path.join(cdir, "occ_bwd.tnsr"), clip.occ_bwd.astype(np.float64))
        with open(os.path.join(cdir, "descriptor.txt"), "w") as fh:
            for key in sorted(clip.scene_descriptor):
                fh.write("%s=%s\n" % (key, clip.scene_descriptor[key]))
        k, h, w = clip.frames.shape[:3]
        lines.append("%s,%d,%d,%d,%d" % (cid, clip.seed, k, h, w))
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return ids


class Corpus:
    """Read-side handle over a written corpus; clips load lazily and stay
    cached (a criterion-6 sized corpus fits comfortably in memory)."""

    def __init__(self, directory, entries):
        self.directory = directory
        self.entries = entries  # list of (id, seed, k, h, w)
        self.ids = [e[0] for e in entries]
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    def load(self, key):
        cid = self.ids[key] if isinstance(key, int) else key
        if cid in self._cache:
            return self._cache[cid]
        cdir = os.path.join(self.directory, cid)
        arrays = {}
        for name in ("frames", "gt_depth", "gt_normals", "flow_fwd",
                     "flow_bwd", "occ_fwd", "occ_bwd"):
            path = os.path.join(cdir, name + ".tnsr")
            if not os.path.exists(path):
                raise IOError("corpus clip %s is missing %s.tnsr" % (cid, name))
            arrays[name] = read_tnsr(path)
        descriptor = {}
        dpath = os.path.join(cdir, "descriptor.txt")
        if os.path.exists(dpath):
            with open(dpath) as fh:
                for line in fh:
                    if "=" in line:
                        key_, val = line.strip().split("=", 1)
                        descriptor[key_] = val
        seed = next(e[1] for e in self.entries if e[0] == cid)
        clip = VideoClip(arrays["frames"], arrays["gt_depth"], arrays["gt_normals"],
                         arrays["flow_fwd"], arrays["flow_bwd"],
                         arrays["occ_fwd"].astype(bool), arrays["occ_bwd"].astype(bool),
                         seed, descriptor)
        self._cache[cid] = clip
        return clip


def read_corpus(directory) -> Corpus:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.exists(manifest):
        raise IOError("no manifest.txt in %s" % directory)
    entries = []
    with open(manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise IOError("%s: malformed manifest line %r" % (manifest, line))
            entries.append((parts[0],) + tuple(int(p) for p in parts[1:]))
    return Corpus(directory, entries)
