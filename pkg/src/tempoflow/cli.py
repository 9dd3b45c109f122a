"""Command-line entry point tying the pieces into reproducible runs.

Subcommands: gen-data, pretrain, train-video, eval, visualize.  Every run
that owns an output directory drops a resolved-config snapshot into it, so
a run can be reproduced from the artifacts alone.  Exit codes: 0 success,
1 I/O trouble, 2 bad configuration, 3 training aborted on a non-finite
loss.  TEMPOFLOW_SEED supplies the default seed when --seed is absent.
"""

import argparse
import dataclasses
import multiprocessing
import os
import sys

import numpy as np

from . import evaluate as E
from . import flow as F
from . import models as M
from . import tensor as T
from .config import ConfigError, TrainingDiverged, coerce, write_kv_file
from .scenes import SceneConfig, generate_clip, read_corpus, write_corpus
from .train import TrainConfig, pretrain_image_model, train_video


# ---------------------------------------------------------------------------
# image export

def write_ppm(path, rgb):
    """Binary P6, 8-bit.  Accepts float arrays in [0,1] or uint8, H x W x 3."""
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def write_pgm(path, gray):
    """Binary P5, 8-bit grayscale.  Floats in [0,1], uint8, or bool."""
    arr = np.asarray(gray)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def depth_to_gray(depth, lo=None, hi=None):
    """Linear grayscale colormap: lo maps to black, hi to white.

    The bounds default to the min/max of the array itself (i.e. of the whole
    clip when the clip is passed in one piece); pass a fixed range to keep
    renders comparable across models.
    """
    d = np.asarray(depth, dtype=float)
    lo = float(d.min()) if lo is None else float(lo)
    hi = float(d.max()) if hi is None else float(hi)
    if hi <= lo:
        return np.zeros(d.shape)
    return np.clip((d - lo) / (hi - lo), 0.0, 1.0)


def normals_to_rgb(normals):
    """Unit normals to the usual (n+1)/2 color encoding."""
    return np.clip((np.asarray(normals, dtype=float) + 1.0) * 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# shared plumbing

def _default_seed(value, fallback=0):
    if value is not None:
        return value
    env = os.environ.get("TEMPOFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("TEMPOFLOW_SEED=%r is not an integer" % env)
    return fallback


def _split_kv(item):
    if "=" not in item:
        raise ConfigError("override %r is not key=value" % item)
    key, val = item.split("=", 1)
    return key.strip(), val.strip()


def _scene_overrides(pairs):
    defaults = SceneConfig()
    names = {f.name for f in dataclasses.fields(SceneConfig)}
    out = {}
    for item in pairs or []:
        key, val = _split_kv(item)
        if key not in names:
            raise ConfigError("unknown scene key %r" % key)
        like = getattr(defaults, key)
        try:
            if isinstance(like, tuple):
                elem = like[0] if like else val
                out[key] = tuple(coerce(p.strip(), elem)
                                 for p in val.split(",") if p.strip())
            else:
                out[key] = coerce(val, like)
        except ValueError:
            raise ConfigError("bad value %r for scene key %r" % (val, key))
    return out


def _train_overrides(pairs):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    out = {}
    for item in pairs or []:
        key, val = _split_kv(item)
        if key not in fields:
            raise ConfigError("unknown config key %r" % key)
        try:
            if key in ("lr", "warmup"):
                if val.lower() == "none":
                    out[key] = None
                else:
                    out[key] = float(val) if key == "lr" else int(val)
            else:
                out[key] = coerce(val, fields[key].default)
        except ValueError:
            raise ConfigError("bad value %r for config key %r" % (val, key))
    return out


def _snapshot(out_dir, mapping):
    os.makedirs(out_dir, exist_ok=True)
    flat = {}
    for key, val in mapping.items():
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        flat[key] = val
    write_kv_file(os.path.join(out_dir, "config.txt"), flat)


def _build_train_config(args, mode=None):
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config)
    else:
        cfg = TrainConfig()
    updates = _train_overrides(getattr(args, "set", None))
    if mode is not None:
        updates.setdefault("mode", mode)
    if getattr(args, "mode", None):
        updates["mode"] = args.mode
    if getattr(args, "steps", None) is not None:
        updates["total_steps"] = args.steps
    if getattr(args, "omega_reg", None) is not None:
        updates["omega_reg"] = args.omega_reg
    if getattr(args, "flow_source", None):
        updates["flow_source"] = args.flow_source
    if getattr(args, "no_mask", False):
        updates["use_masks"] = False
    if getattr(args, "reg_all_frames", False):
        updates["reg_all_frames"] = True
    seed = _default_seed(getattr(args, "seed", None), None)
    if seed is not None:
        updates["seed"] = seed
    return dataclasses.replace(cfg, **updates).resolve()


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    overrides = _scene_overrides(args.set)
    overrides.setdefault("k", args.frames)
    overrides.setdefault("h", args.size)
    overrides.setdefault("w", args.size)
    seed = _default_seed(args.seed)
    base = dataclasses.replace(SceneConfig(), **overrides)
    configs = [dataclasses.replace(base, seed=seed + i)
               for i in range(args.clips)]
    for cfg in configs:
        cfg.validate()
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            clips = pool.map(generate_clip, configs)
    else:
        clips = [generate_clip(cfg) for cfg in configs]
    ids = write_corpus(clips, args.out)
    snap = dataclasses.asdict(base)
    snap.update(subcommand="gen-data", clips=args.clips, seed=seed)
    _snapshot(args.out, snap)
    print("wrote %d clips (%d frames, %dx%d) to %s"
          % (len(ids), base.k, base.h, base.w, args.out))
    return 0


def cmd_pretrain(args):
    cfg = _build_train_config(args)
    corpus = read_corpus(args.data)
    snap = dataclasses.asdict(cfg)
    snap["subcommand"] = "pretrain"
    _snapshot(args.out, snap)
    pretrain_image_model(corpus, cfg, out_dir=args.out)
    print("pretrained %s model for %d steps -> %s"
          % (cfg.mode, cfg.total_steps, args.out))
    return 0


def cmd_train_video(args):
    backbone, meta = M.load_checkpoint(args.backbone)
    cfg = _build_train_config(args, mode=meta["mode"])
    if cfg.mode != meta["mode"]:
        raise ConfigError("backbone is a %s model but config wants %s"
                          % (meta["mode"], cfg.mode))
    corpus = read_corpus(args.data)
    snap = dataclasses.asdict(cfg)
    snap.update(subcommand="train-video", backbone=args.backbone)
    _snapshot(args.out, snap)
    train_video(corpus, backbone, cfg, out_dir=args.out)
    print("fine-tuned %s adapter for %d steps -> %s"
          % (cfg.mode, cfg.total_steps, args.out))
    return 0


def _load_eval_model(path):
    params, meta = M.load_checkpoint(path)
    label = "video" if meta.get("n_blocks", 0) else "backbone"
    return params, meta, label


def cmd_eval(args):
    corpus = read_corpus(args.data)
    metrics = None
    if args.metric:
        metrics = tuple(m.strip() for m in args.metric.split(",") if m.strip())

    report = None
    if args.checkpoint == "gt":
        # score the ground truth against itself: a floor for every metric
        cfg = TrainConfig(mode=args.mode or "depth",
                          flow_source=args.flow_source,
                          tau_c=args.tau_c).resolve()
        report = E.MetricsReport(cfg.mode, {"corpus": args.data})
        for index, cid in enumerate(E._corpus_ids(corpus)):
            clip = E._corpus_clip(corpus, cid, index)
            pred = (clip.gt_depth if cfg.mode == "depth"
                    else clip.gt_normals)
            fn = (E.depth_clip_metrics if cfg.mode == "depth"
                  else E.normal_clip_metrics)
            report.add_row("gt", cid, fn(pred, clip, cfg))
    else:
        params, meta, auto_label = _load_eval_model(args.checkpoint)
        cfg = TrainConfig(mode=meta["mode"], flow_source=args.flow_source,
                          tau_c=args.tau_c).resolve()
        models = []
        if args.compare:
            wanted = [w.strip() for w in args.compare.split(",") if w.strip()]
            for w in wanted:
                if w not in ("backbone", "video"):
                    raise ConfigError("--compare entries must be backbone "
                                      "or video, got %r" % w)
            if "backbone" in wanted:
                if not args.backbone:
                    raise ConfigError("--compare backbone needs --backbone")
                bparams, bmeta, _ = _load_eval_model(args.backbone)
                if bmeta["mode"] != meta["mode"]:
                    raise ConfigError("backbone mode %r != checkpoint mode %r"
                                      % (bmeta["mode"], meta["mode"]))
                models.append(("backbone", bparams))
            if "video" in wanted:
                models.append(("video", params))
        else:
            models.append((auto_label, params))
        meta_info = {"corpus": args.data, "checkpoint": args.checkpoint,
                     "flow_source": cfg.flow_source}
        for label, p in models:
            report = E.evaluate_corpus(p, corpus, cfg, label=label,
                                       metadata=meta_info, report=report,
                                       jobs=args.jobs)

    table = report.table(metrics)
    print(table)
    if args.out:
        snap = {"subcommand": "eval", "data": args.data,
                "checkpoint": args.checkpoint, "mode": report.mode,
                "flow_source": args.flow_source, "tau_c": args.tau_c}
        _snapshot(args.out, snap)
        report.to_csv(os.path.join(args.out, "report.csv"))
        with open(os.path.join(args.out, "report.txt"), "w") as fh:
            fh.write(table + "\n")
    return 0


def cmd_visualize(args):
    corpus = read_corpus(args.data)
    key = args.clip
    if key is not None:
        try:
            key = int(key)
        except ValueError:
            pass
    else:
        key = 0
    clip = corpus.load(key)
    k, h, w = clip.frames.shape[:3]
    column = args.column if args.column is not None else w // 2
    if not 0 <= column < w:
        raise ConfigError("column %d out of range for width %d" % (column, w))

    if args.checkpoint:
        params, meta, _ = _load_eval_model(args.checkpoint)
        mode = meta["mode"]
        with T.no_grad():
            pred = M.video_forward(np.asarray(clip.frames), params).data
        buf = pred[..., 0] if mode == "depth" else pred
    else:
        mode = args.mode or "depth"
        buf = clip.gt_depth if mode == "depth" else clip.gt_normals

    if mode == "depth":
        lo, hi = (args.range if args.range else (None, None))
        gray = depth_to_gray(buf, lo, hi)
        rgb = np.repeat(gray[..., None], 3, axis=-1)
    else:
        rgb = normals_to_rgb(buf)

    os.makedirs(args.out, exist_ok=True)
    # the time slice reads the unmarked renders; the per-frame files carry
    # a red line on the sampled column for orientation
    slice_img = rgb[:, :, column, :].copy()
    for i in range(k):
        marked = rgb[i].copy()
        marked[:, column] = (1.0, 0.0, 0.0)
        write_ppm(os.path.join(args.out, "frame_%03d.ppm" % i), marked)
    write_ppm(os.path.join(args.out, "timeslice.ppm"), slice_img)

    masks = F.MaskStack(clip.flow_fwd, clip.flow_bwd,
                        preds=list(buf) if mode == "depth" else None,
                        tau_c=args.tau_c)
    for i in range(k - 1):
        write_pgm(os.path.join(args.out, "mask_fwd_%03d.pgm" % i),
                  masks.combined_fwd[i])
        write_pgm(os.path.join(args.out, "mask_bwd_%03d.pgm" % i),
                  masks.combined_bwd[i])
    _snapshot(args.out, {"subcommand": "visualize", "data": args.data,
                         "clip": str(key), "column": column, "mode": mode})
    print("wrote %d frames + time slice + %d mask pairs to %s"
          % (k, k - 1, args.out))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="tempoflow",
        description="Self-supervised temporal stabilization of per-frame "
                    "depth and normal predictors on synthetic video.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic clip corpus")
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None,
                   help="base seed; clip i uses seed+i")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any scene parameter, e.g. jitter=0.0 "
                        "or half_size=3,5")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="fit the per-frame image model")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("depth", "normal"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-video",
                       help="fine-tune the temporal adapter on a frozen "
                            "backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", required=True,
                   help="pretrained image-model checkpoint directory")
    p.add_argument("--mode", choices=("depth", "normal"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--omega-reg", type=float, default=None,
                   help="weight of the teacher-anchoring term")
    p.add_argument("--no-mask", action="store_true",
                   help="disable cycle and edge masking of the "
                        "stabilization loss")
    p.add_argument("--reg-all-frames", action="store_true",
                   help="anchor every frame instead of one random frame")
    p.add_argument("--flow-source", choices=("analytic", "estimated"))
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_train_video)

    p = sub.add_parser("eval", help="score a checkpoint over a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint directory, or 'gt' to score the ground "
                        "truth against itself")
    p.add_argument("--backbone", help="image-model checkpoint for --compare")
    p.add_argument("--compare", metavar="ROWS",
                   help="comma list of rows to emit: backbone,video")
    p.add_argument("--mode", choices=("depth", "normal"),
                   help="only used with --checkpoint gt")
    p.add_argument("--metric", help="comma list restricting table columns")
    p.add_argument("--flow-source", choices=("analytic", "estimated"),
                   default="analytic")
    p.add_argument("--tau-c", type=float, default=0.34)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize",
                       help="export buffer renders, a time slice, and masks")
    p.add_argument("--data", required=True)
    p.add_argument("--clip", help="clip id or index (default: first)")
    p.add_argument("--checkpoint",
                   help="render this model's predictions instead of ground "
                        "truth")
    p.add_argument("--mode", choices=("depth", "normal"),
                   help="which ground-truth buffer to render")
    p.add_argument("--column", type=int, default=None,
                   help="column sampled by the time slice (default: W/2)")
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="fixed depth range for the colormap")
    p.add_argument("--tau-c", type=float, default=0.34)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
