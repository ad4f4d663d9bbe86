"""Segmentation and pose-agreement metrics and their CSV/SVG outputs."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .transformer import PARAM_NAMES, RigidParams, wrap

GUARD = 1e-12
FOREGROUND = (1, 2, 3, 4, 5)
THRESHOLDS = np.round(np.arange(40, 101) / 100.0, 2)


class UndefinedMetric(ValueError):
    """Ground truth has no foreground, so weighted foreground IoU is undefined."""


def iou(gt, pred):
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    inter = np.count_nonzero(gt & pred)
    union = np.count_nonzero(gt | pred)
    return inter / (union + GUARD)


def dice(gt, pred):
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    inter = np.count_nonzero(gt & pred)
    return 2 * inter / (np.count_nonzero(gt) + np.count_nonzero(pred) + GUARD)


def class_weights(gt, classes):
    """Share of each class in the ground-truth foreground union."""
    gt = np.asarray(gt)
    counts = np.array([np.count_nonzero(gt == c) for c in classes], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise UndefinedMetric("ground truth has no foreground pixels")
    return counts / total


def weighted_fg_iou(gt, pred, classes):
    """sum_c w_c IoU_c with w_c = |GT == c| / |GT foreground|."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"label shapes differ: {gt.shape} vs {pred.shape}")
    classes = [c for c in classes if c != 0]
    w = class_weights(gt, classes)
    return float(sum(wc * iou(gt == c, pred == c) for wc, c in zip(w, classes) if wc > 0))


@dataclass
class Summary:
    median: float
    iqr: float
    q1: float
    q3: float
    n: int


def summarize(values):
    """Median and interquartile range with linear-interpolation quantiles."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return Summary(float(med), float(q3 - q1), float(q1), float(q3), int(v.size))


def success_curve(values, thresholds=THRESHOLDS):
    """Fraction of values at or above each threshold, and the trapezoid area
    over the threshold range normalized by its width (a perfect set scores 1)."""
    v = np.asarray(values, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    rates = np.array([np.count_nonzero(v >= th) / v.size for th in t]) if v.size else np.zeros(len(t))
    area = 0.0
    for i in range(1, len(t)):
        area += 0.5 * (rates[i - 1] + rates[i]) * (t[i] - t[i - 1])
    return t, rates, area / (t[-1] - t[0])


def failure_rate(values, threshold=0.9):
    """Fraction of values below ``threshold``."""
    v = np.asarray(values, dtype=np.float64)
    return np.count_nonzero(v < threshold) / v.size


@dataclass
class Regression:
    r: float
    slope: float
    intercept: float
    t_stat: float
    significant: bool
    n: int


def _component(values, component):
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, PARAM_NAMES.index(component)]
    return a


def regress_params(predicted, ground_truth, component, alpha=0.05):
    """Pearson R and least-squares line predicted = slope * gt + intercept.

    Rotation predictions are replaced by gt + wrap(pred - gt) first.
    ``significant`` flags |t| above the two-sided critical value at ``alpha``.
    """
    y = _component(predicted, component)
    x = _component(ground_truth, component)
    if len(x) < 3 or len(x) != len(y):
        raise ValueError("regression needs at least 3 matched pairs")
    if component == "theta":
        y = x + wrap(y - x)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise ValueError(f"ground truth {component} has zero variance")
    syy = float(dy @ dy)
    sxy = float(dx @ dy)
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    r = sxy / np.sqrt(sxx * syy) if syy > 0 else 0.0
    n = len(x)
    t = np.inf if abs(r) >= 1 else r * np.sqrt((n - 2) / (1 - r * r))
    crit = stats.t.ppf(1 - alpha / 2, n - 2)
    return Regression(float(r), slope, intercept, float(t), bool(abs(t) > crit), n)


@dataclass
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    band95: float
    sd: float
    differences: np.ndarray = field(repr=False)

    def fraction_within(self, limit):
        return float(np.mean(np.abs(self.differences) <= limit))


def bland_altman(predicted, ground_truth, wrap_rotation=False):
    """Bias, bias +/- 1.96 SD (population SD) and the 95th percentile of |d|."""
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(ground_truth, dtype=np.float64)
    if p.shape != g.shape or p.size < 2:
        raise ValueError("Bland-Altman needs at least 2 matched pairs")
    d = p - g
    if wrap_rotation:
        d = wrap(d)
    bias = float(d.mean())
    sd = float(d.std())
    band = float(np.percentile(np.abs(d), 95, method="linear"))
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, band, sd, d)


# ---------------------------------------------------------------------------
# Records and files
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    sample_id: str
    view: str
    unet_index: int
    iou: dict
    wfiou: float
    dice: dict
    pred_params: RigidParams = None
    gt_params: RigidParams = None


def evaluate_labels(sample_id, view, unet_index, gt, pred, classes):
    ious = {c: iou(gt == c, pred == c) for c in FOREGROUND}
    dices = {c: dice(gt == c, pred == c) for c in FOREGROUND}
    return EvalRecord(sample_id, view, unet_index, ious, weighted_fg_iou(gt, pred, classes), dices)


def _fmt(v):
    return f"{v:.17g}"


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "view", "unet_index", *(f"iou_c{c}" for c in FOREGROUND),
                    "wfiou", *(f"dice_c{c}" for c in FOREGROUND)])
        for r in records:
            w.writerow([r.sample_id, r.view, r.unet_index, *(_fmt(r.iou[c]) for c in FOREGROUND),
                        _fmt(r.wfiou), *(_fmt(r.dice[c]) for c in FOREGROUND)])


def write_curve_csv(path, thresholds, rates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "success_rate"])
        for t, r in zip(thresholds, rates):
            w.writerow([f"{t:.2f}", _fmt(r)])


def write_summary_csv(path, items):
    """items: iterable of (metric, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in items:
            w.writerow([k, _fmt(v) if isinstance(v, float) else v])


def _svg(path, width, height, body):
    with open(path, "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                 f'viewBox="0 0 {width} {height}">\n')
        fh.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
        fh.write(body)
        fh.write("</svg>\n")


def write_curve_svg(path, thresholds, rates, auc, size=(360, 260), pad=40):
    W, H = size
    sx = lambda t: pad + (t - 0.4) / 0.6 * (W - 2 * pad)
    sy = lambda r: H - pad - r * (H - 2 * pad)
    pts = " ".join(f"{sx(t):.2f},{sy(r):.2f}" for t, r in zip(thresholds, rates))
    body = (f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="1.5"/>\n'
            f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="gray"/>\n'
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="gray"/>\n'
            f'<text x="{W / 2}" y="{H - 8}" font-size="12" text-anchor="middle">threshold</text>\n'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">success rate (AUC {auc:.3f})</text>\n')
    _svg(path, W, H, body)


def write_bland_altman_svg(path, means, ba, title, size=(360, 260), pad=40):
    W, H = size
    means = np.asarray(means, dtype=np.float64)
    d = ba.differences
    lo_x, hi_x = float(means.min()), float(means.max())
    span = max(abs(ba.loa_low), abs(ba.loa_high), float(np.abs(d).max()), 1e-9) * 1.1
    sx = lambda v: pad + (v - lo_x) / max(hi_x - lo_x, 1e-9) * (W - 2 * pad)
    sy = lambda v: H / 2 - v / span * (H / 2 - pad)
    dots = "".join(f'<circle cx="{sx(m):.2f}" cy="{sy(v):.2f}" r="1.5"/>\n' for m, v in zip(means, d))
    lines = "".join(f'<line x1="{pad}" y1="{sy(v):.2f}" x2="{W - pad}" y2="{sy(v):.2f}" '
                    f'stroke="{c}" stroke-dasharray="4 2"/>\n'
                    for v, c in ((ba.bias, "blue"), (ba.loa_low, "red"), (ba.loa_high, "red")))
    body = dots + lines + f'<text x="{pad}" y="{pad - 10}" font-size="12">{title}</text>\n'
    _svg(path, W, H, body)
