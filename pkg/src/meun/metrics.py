"""Salient object detection measures: mean F-measure, MAE, S-measure, E-measure."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

BETA2 = 0.3
ALPHA = 0.5
EM_THRESHOLD = 128 / 255
_EPS = np.finfo(np.float64).eps


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must be equal 2-D shapes")
    return pred, gt


def quantize(pred) -> np.ndarray:
    """8-bit levels, rounding half up."""
    return np.floor(np.asarray(pred, dtype=np.float64) * 255.0 + 0.5).astype(np.int64)


def confusion_counts(pred, gt, t: int) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with a pixel predicted positive iff its 8-bit level >= t."""
    pred, gt = _check(pred, gt)
    pos = quantize(pred) >= t
    tp = int(np.count_nonzero(pos & gt))
    fp = int(np.count_nonzero(pos & ~gt))
    fn = int(np.count_nonzero(~pos & gt))
    tn = int(np.count_nonzero(~pos & ~gt))
    return tp, fp, fn, tn


def f_beta(precision: float, recall: float, beta2: float = BETA2) -> float:
    denom = beta2 * precision + recall
    return 0.0 if denom == 0 else (1.0 + beta2) * precision * recall / denom


def f_measure_curve(pred, gt) -> np.ndarray:
    """F-measure at each threshold 1..255 (index 0 is threshold 1)."""
    pred, gt = _check(pred, gt)
    q = quantize(pred)
    fg_hist = np.bincount(q[gt], minlength=256)
    bg_hist = np.bincount(q[~gt], minlength=256)
    # counts of pixels with level >= t, for t = 1..255
    tp = np.cumsum(fg_hist[::-1])[::-1][1:].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1][1:].astype(np.float64)
    n_fg = float(gt.sum())
    curve = np.zeros(255)
    ok = (tp + fp > 0) & (n_fg > 0)
    precision = np.where(ok, tp / np.where(ok, tp + fp, 1.0), 0.0)
    recall = np.where(ok, tp / max(n_fg, 1.0), 0.0)
    denom = BETA2 * precision + recall
    good = ok & (denom > 0)
    curve[good] = (1 + BETA2) * precision[good] * recall[good] / denom[good]
    return curve


def mean_f_measure(pred, gt) -> float:
    return float(f_measure_curve(pred, gt).mean())


def mae(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(np.abs(pred - gt).mean())


# -- S-measure ------------------------------------------------------------------


def _s_object(x: np.ndarray, region: np.ndarray) -> float:
    vals = x[region]
    if vals.size == 0:
        return 0.0
    mu = vals.mean()
    sigma = vals.std(ddof=1) if vals.size > 1 else 0.0
    return float(2.0 * mu / (mu * mu + 1.0 + sigma + _EPS))


def object_similarity(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    u = gt.mean()
    fg = pred * gt
    bg = (1.0 - pred) * ~gt
    return float(u * _s_object(fg, gt) + (1.0 - u) * _s_object(bg, ~gt))


def _ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    if n > 1:
        sx = ((x - mx) ** 2).sum() / (n - 1)
        sy = ((y - my) ** 2).sum() / (n - 1)
        sxy = ((x - mx) * (y - my)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * mx * my * sxy
    b = (mx * mx + my * my) * (sx + sy)
    if a != 0:
        return float(a / (b + _EPS))
    return 1.0 if b == 0 else 0.0


def centroid(gt: np.ndarray) -> tuple[int, int]:
    """Split point (x, y): rounded foreground centroid plus one."""
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)) + 1, int(np.round(h / 2)) + 1
    y, x = np.argwhere(gt).mean(axis=0).round()
    return int(x) + 1, int(y) + 1


def region_similarity(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    h, w = gt.shape
    x, y = centroid(gt)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        p, g = pred[rs, cs], gtf[rs, cs]
        if p.size:
            score += p.size / (h * w) * _ssim(p, g)
    return score


def s_measure_parts(pred, gt) -> tuple[float, float]:
    return object_similarity(pred, gt), region_similarity(pred, gt)


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    pred, gt = _check(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        so, sr = s_measure_parts(pred, gt)
        score = alpha * so + (1.0 - alpha) * sr
    return float(min(max(score, 0.0), 1.0))


# -- E-measure ------------------------------------------------------------------


def enhanced_alignment(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    fm = (pred >= EM_THRESHOLD).astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        return 1.0 - fm
    if gt.all():
        return fm
    phi_fm = fm - fm.mean()
    phi_gt = g - g.mean()
    num = 2.0 * phi_gt * phi_fm
    den = phi_gt**2 + phi_fm**2
    xi = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return (1.0 + xi) ** 2 / 4.0


def e_measure(pred, gt) -> float:
    return float(enhanced_alignment(pred, gt).mean())


# -- reports --------------------------------------------------------------------

METRIC_NAMES = ("mF", "MAE", "Sm", "Em")


def evaluate_pair(pred, gt) -> dict:
    return {
        "mF": mean_f_measure(pred, gt),
        "MAE": mae(pred, gt),
        "Sm": s_measure(pred, gt),
        "Em": e_measure(pred, gt),
    }


@dataclass
class MetricsReport:
    images: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    empty_gt: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def add(self, name: str, pred, gt) -> dict:
        row = evaluate_pair(pred, gt)
        if not np.asarray(gt).any():
            self.empty_gt.append(name)
        self.images.append(name)
        self.rows.append(row)
        return row

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {k: float("nan") for k in METRIC_NAMES}
        out = {}
        for k in METRIC_NAMES:
            total = 0.0
            for row in self.rows:
                total += row[k]
            out[k] = total / len(self.rows)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("image",) + METRIC_NAMES)
        for name, row in zip(self.images, self.rows):
            writer.writerow([name] + [repr(row[k]) for k in METRIC_NAMES])
        agg = self.aggregate
        writer.writerow(["mean"] + [repr(agg[k]) for k in METRIC_NAMES])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("image")] + [len(n) for n in self.images] + [4])
        lines = [f"{'image':<{width}}  " + "  ".join(f"{k:>8}" for k in METRIC_NAMES)]
        for name, row in zip(self.images, self.rows):
            lines.append(f"{name:<{width}}  " + "  ".join(f"{row[k]:8.4f}" for k in METRIC_NAMES))
        agg = self.aggregate
        lines.append(f"{'mean':<{width}}  " + "  ".join(f"{agg[k]:8.4f}" for k in METRIC_NAMES))
        lines.append(f"images: {self.count}")
        if self.empty_gt:
            lines.append(f"empty ground truth (mF forced to 0): {', '.join(self.empty_gt)}")
        if self.unmatched:
            lines.append(f"unmatched stems skipped: {len(self.unmatched)}")
        return "\n".join(lines) + "\n"
