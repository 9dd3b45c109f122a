"""Evaluation protocol: alignment, accuracy metrics, temporal smoothness.

Depth predictions are scale/shift ambiguous, so every clip is first aligned
to its ground truth by a global least-squares affine fit (one scale and one
offset shared by all frames).  Accuracy is then AbsRel and delta1; temporal
quality is OPW, the warped-consistency formula from training evaluated with
cycle-validation masks only and the aligned depth divided by the ground
truth median so values compare across clips.  Normal maps carry no affine
ambiguity and are scored by angular error directly.
"""

import numpy as np

from . import flow as F
from . import models as M
from . import tensor as T
from .config import ConfigError

DEPTH_METRICS = ("abs_rel", "delta1", "opw")
NORMAL_METRICS = ("mean_deg", "median_deg", "pct_11_25", "opw")

_PRETTY = {"abs_rel": "AbsRel", "delta1": "delta1", "opw": "OPW",
           "mean_deg": "Mean", "median_deg": "Median", "pct_11_25": "11.25"}


def valid_depth_mask(gt):
    """Pixels where ground truth depth is usable: finite and positive."""
    g = np.asarray(gt, dtype=float)
    return np.isfinite(g) & (g > 0)


def fit_global_affine(pred, gt, valid=None):
    """Least-squares scale and offset aligning pred to gt.

    The fit is joint over every frame: minimize sum((s*pred + t - gt)^2)
    over valid pixels, closed form s = cov(pred, gt)/var(pred), t =
    mean(gt) - s*mean(pred).  Returns (s, t, degenerate); a constant
    prediction carries no scale information, in which case s = 0, t =
    mean(gt) and the flag is set.
    """
    p = np.asarray(pred, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        p = p[keep]
        g = g[keep]
    if p.size < 2:
        return 0.0, float(g.mean()) if g.size else 0.0, True
    pm = float(p.mean())
    gm = float(g.mean())
    var = float(((p - pm) ** 2).mean())
    if var < 1e-12:
        return 0.0, gm, True
    s = float(((p - pm) * (g - gm)).mean() / var)
    return s, gm - s * pm, False


def abs_rel(aligned, gt, valid=None):
    """Mean |aligned - gt| / gt over valid pixels; nan if none are valid."""
    a = np.asarray(aligned, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        a = a[keep]
        g = g[keep]
    if a.size == 0:
        return float("nan")
    return float(np.mean(np.abs(a - g) / g))


def delta1(aligned, gt, valid=None):
    """Fraction of valid pixels with max(aligned/gt, gt/aligned) < 1.25.

    Non-positive aligned values cannot fall inside any ratio band and count
    as failures.
    """
    a = np.asarray(aligned, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        a = a[keep]
        g = g[keep]
    if a.size == 0:
        return float("nan")
    pos = a > 0
    safe = np.where(pos, a, 1.0)
    ratio = np.where(pos, np.maximum(safe / g, g / safe), np.inf)
    return float(np.mean(ratio < 1.25))


def opw(preds, flow_fwd, flow_bwd, masks=None):
    """Optical-flow-warped inconsistency of a prediction stack.

    The training-time warped-consistency formula evaluated as a plain
    number: no gradients, and (by convention) cycle-validation masks only,
    passed in by the caller -- build them with MaskStack(..., preds=None).
    preds is K x H x W x C or K x H x W.
    """
    preds = np.asarray(preds, dtype=float)
    if preds.ndim == 3:
        preds = preds[..., None]
    with T.no_grad():
        frames = [T.Tensor(preds[i]) for i in range(preds.shape[0])]
        loss = F.stabilization_loss(frames, np.asarray(flow_fwd, dtype=float),
                                    np.asarray(flow_bwd, dtype=float), masks)
    return float(loss.data)


def normal_angular_metrics(pred_n, gt_n, valid=None):
    """Angular error between unit normal maps: (mean, median, pct < 11.25).

    All statistics are in degrees over valid pixels; the median is the
    lower median.  Dot products are clamped so numeric drift past +-1
    cannot produce nan.
    """
    p = np.asarray(pred_n, dtype=float).reshape(-1, 3)
    g = np.asarray(gt_n, dtype=float).reshape(-1, 3)
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        p = p[keep]
        g = g[keep]
    if p.shape[0] == 0:
        return float("nan"), float("nan"), float("nan")
    dots = np.clip((p * g).sum(axis=1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dots))
    med = float(np.sort(ang)[(ang.size - 1) // 2])
    return float(ang.mean()), med, float(np.mean(ang < 11.25))


def clip_flow_fields(clip, config):
    """Flow pair used for evaluation, per config.flow_source."""
    if config.flow_source == "estimated":
        return F.estimate_flow_block_matching(np.asarray(clip.frames))
    return np.asarray(clip.flow_fwd), np.asarray(clip.flow_bwd)


def depth_clip_metrics(pred, clip, config, flows=None):
    """Every depth metric for one clip from raw (unaligned) predictions."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(clip.gt_depth, dtype=float)
    valid = valid_depth_mask(gt)
    s, t, _ = fit_global_affine(pred, gt, valid)
    aligned = s * pred + t
    med = float(np.median(gt[valid]))
    ff, fb = flows if flows is not None else clip_flow_fields(clip, config)
    masks = F.MaskStack(ff, fb, preds=None, tau_c=config.tau_c)
    return {
        "scale": s,
        "offset": t,
        "abs_rel": abs_rel(aligned, gt, valid),
        "delta1": delta1(aligned, gt, valid),
        "opw": opw(aligned / med, ff, fb, masks),
    }


def normal_clip_metrics(pred, clip, config, flows=None):
    """Every normal metric for one clip; normals are never aligned."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(clip.gt_normals, dtype=float)
    valid = np.isfinite(gt).all(axis=-1) & (np.linalg.norm(gt, axis=-1) > 0)
    mean_deg, median_deg, pct = normal_angular_metrics(pred, gt, valid)
    ff, fb = flows if flows is not None else clip_flow_fields(clip, config)
    masks = F.MaskStack(ff, fb, preds=None, tau_c=config.tau_c)
    return {
        "mean_deg": mean_deg,
        "median_deg": median_deg,
        "pct_11_25": pct,
        "opw": opw(pred, ff, fb, masks),
    }


class MetricsReport:
    """Per-clip metric rows for one or more models, plus corpus means."""

    def __init__(self, mode, metadata=None):
        if mode not in ("depth", "normal"):
            raise ConfigError("report mode must be depth or normal, got %r"
                              % (mode,))
        self.mode = mode
        self.metadata = dict(metadata or {})
        self.rows = []

    @property
    def metric_names(self):
        return DEPTH_METRICS if self.mode == "depth" else NORMAL_METRICS

    @property
    def columns(self):
        extra = ("scale", "offset") if self.mode == "depth" else ()
        return extra + self.metric_names

    def add_row(self, model, clip_id, values):
        row = {"model": model, "clip": clip_id}
        row.update({k: float(values[k]) for k in self.columns})
        self.rows.append(row)

    def models(self):
        seen = []
        for row in self.rows:
            if row["model"] not in seen:
                seen.append(row["model"])
        return seen

    def clip_rows(self, model):
        return [r for r in self.rows if r["model"] == model]

    def means(self, model):
        rows = self.clip_rows(model)
        if not rows:
            raise KeyError("no rows for model %r" % (model,))
        return {k: sum(r[k] for r in rows) / len(rows) for k in self.columns}

    def merge(self, other):
        if other.mode != self.mode:
            raise ValueError("cannot merge %s report into %s report"
                             % (other.mode, self.mode))
        self.rows.extend(other.rows)
        self.metadata.update(other.metadata)
        return self

    def to_csv(self, path):
        lines = ["model,clip," + ",".join(self.columns)]
        for row in self.rows:
            lines.append("%s,%s," % (row["model"], row["clip"])
                         + ",".join("%.6g" % row[k] for k in self.columns))
        for model in self.models():
            mean = self.means(model)
            lines.append("%s,mean," % model
                         + ",".join("%.6g" % mean[k] for k in self.columns))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def table(self, metrics=None):
        """Aligned text table: one row of corpus means per model."""
        names = tuple(metrics) if metrics else self.metric_names
        for name in names:
            if name not in self.metric_names:
                raise ConfigError("unknown metric %r for %s mode"
                                  % (name, self.mode))
        width = max([len(m) for m in self.models()] + [5])
        head = "%-*s" % (width, "model")
        head += "".join("  %9s" % _PRETTY[n] for n in names)
        lines = [head]
        for model in self.models():
            mean = self.means(model)
            line = "%-*s" % (width, model)
            line += "".join("  %9.3f" % mean[n] for n in names)
            lines.append(line)
        return "\n".join(lines)


def _corpus_ids(corpus):
    if hasattr(corpus, "ids"):
        return list(corpus.ids)
    return ["clip_%03d" % i for i in range(len(corpus))]


def _corpus_clip(corpus, key, index):
    if hasattr(corpus, "load"):
        return corpus.load(key)
    return corpus[index]


def _clip_job(arg):
    """Forward one clip and score it; top level so worker pools can run it."""
    params, clip, config = arg
    with T.no_grad():
        pred = M.video_forward(np.asarray(clip.frames), params).data
    if config.mode == "depth":
        return depth_clip_metrics(pred[..., 0], clip, config)
    return normal_clip_metrics(pred, clip, config)


def evaluate_corpus(params, corpus, config, label="model", metadata=None,
                    report=None, jobs=1):
    """Score a model over a whole corpus, one row per clip, in id order.

    params should already be the weights meant for evaluation (for a
    trained adapter that is the EMA checkpoint).  Pass an existing report
    to append a second model's rows, e.g. for backbone-vs-video compares.
    Per-clip scoring is pure, so jobs > 1 fans it out over processes
    without changing any result.
    """
    if params.mode != config.mode:
        raise ConfigError("model mode %r does not match eval mode %r"
                          % (params.mode, config.mode))
    if report is None:
        report = MetricsReport(config.mode, metadata)
    elif metadata:
        report.metadata.update(metadata)
    ids = _corpus_ids(corpus)
    if jobs and jobs > 1:
        import multiprocessing

        work = ((params, _corpus_clip(corpus, cid, i), config)
                for i, cid in enumerate(ids))
        with multiprocessing.Pool(jobs) as pool:
            rows = list(pool.imap(_clip_job, work))
        for cid, row in zip(ids, rows):
            report.add_row(label, cid, row)
        return report
    for index, cid in enumerate(ids):
        clip = _corpus_clip(corpus, cid, index)
        report.add_row(label, cid, _clip_job((params, clip, config)))
    return report
