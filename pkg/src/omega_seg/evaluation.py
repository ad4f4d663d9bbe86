"""Scoring predictions against held-out ground truth and writing report files."""

from pathlib import Path

import numpy as np

from .data import VIEW_CLASSES
from .metrics import (
    UndefinedMetric, bland_altman, evaluate_labels, failure_rate, regress_params, success_curve,
    summarize, write_bland_altman_svg, write_curve_csv, write_curve_svg, write_records_csv,
    write_summary_csv,
)
from .transformer import PARAM_NAMES, RigidParams


class LeakageError(RuntimeError):
    """Evaluation subjects overlap the subjects a checkpoint was trained on."""


def check_leakage(train_subjects, eval_subjects):
    overlap = sorted(set(train_subjects) & set(eval_subjects))
    if overlap:
        raise LeakageError(f"evaluation subjects were used for training: {', '.join(overlap)}")


def original_frame_labels(pred, unet_index):
    if unet_index == 0:
        return pred.labels[0]
    return pred.original_frame_probs(unet_index).argmax(axis=1).astype(np.uint8)


def evaluate_prediction(pred, dataset, idx, unet_indices=None):
    """EvalRecords for every image of ``idx`` and every requested U-Net.

    Hourglass maps are mapped back to the input frame first.  Images whose
    ground truth has no foreground are skipped and returned separately.
    """
    idx = np.asarray(idx)
    if unet_indices is None:
        unet_indices = range(len(pred.probs))
    records, excluded = [], []
    for u in unet_indices:
        labels = original_frame_labels(pred, u)
        for j, i in enumerate(idx):
            sid, view = dataset.sample_ids[i], str(dataset.views[i])
            try:
                rec = evaluate_labels(sid, view, u, dataset.labels[i], labels[j],
                                      VIEW_CLASSES[view])
            except UndefinedMetric:
                if u == unet_indices[0]:
                    excluded.append(sid)
                continue
            if pred.params.shape[1]:
                rec.pred_params = RigidParams.from_array(pred.params[j])
                rec.gt_params = RigidParams.from_array(dataset.params[i])
            records.append(rec)
    return records, excluded


def pose_errors(records):
    """Per-image (pred - gt) differences with rotation wrapped, from one U-Net's records."""
    recs = [r for r in records if r.pred_params is not None]
    if not recs:
        return None
    pred = np.array([r.pred_params.as_array() for r in recs])
    gt = np.array([r.gt_params.as_array() for r in recs])
    return pred, gt


def summarize_records(records, depth):
    """(summary items, curve) for a list of records covering U-Nets 0..depth."""
    items = []
    curve = None
    for u in range(depth + 1):
        vals = [r.wfiou for r in records if r.unet_index == u]
        if not vals:
            continue
        s = summarize(vals)
        items += [(f"unet{u}_wfiou_median", s.median), (f"unet{u}_wfiou_iqr", s.iqr),
                  (f"unet{u}_wfiou_q1", s.q1), (f"unet{u}_wfiou_q3", s.q3),
                  (f"unet{u}_n", s.n)]
        views = sorted({r.view for r in records if r.unet_index == u})
        for v in views:
            sv = summarize([r.wfiou for r in records if r.unet_index == u and r.view == v])
            items += [(f"unet{u}_{v}_wfiou_median", sv.median), (f"unet{u}_{v}_wfiou_iqr", sv.iqr)]
        if u == depth:
            t, rates, auc = success_curve(vals)
            curve = (t, rates, auc)
            items += [("final_auc", auc), ("final_failure_rate_0.9", failure_rate(vals, 0.9))]
    final = [r for r in records if r.unet_index == depth]
    pe = pose_errors(final)
    if pe is not None and len(pe[0]) >= 3:
        pred, gt = pe
        for j, name in enumerate(PARAM_NAMES):
            ba = bland_altman(pred[:, j], gt[:, j], wrap_rotation=name == "theta")
            items += [(f"{name}_ba_bias", ba.bias), (f"{name}_ba_loa_low", ba.loa_low),
                      (f"{name}_ba_loa_high", ba.loa_high), (f"{name}_ba_band95", ba.band95),
                      (f"{name}_abs_error_median", float(np.median(np.abs(ba.differences))))]
            if name in ("t_x", "t_y"):
                items.append((f"{name}_within_0.10", ba.fraction_within(0.10)))
            try:
                reg = regress_params(pred, gt, name)
                items += [(f"{name}_R", reg.r), (f"{name}_slope", reg.slope),
                          (f"{name}_intercept", reg.intercept),
                          (f"{name}_significant", int(reg.significant))]
            except ValueError:
                pass
    return items, curve


def write_report(out_dir, records, depth, excluded=(), svg=True):
    """Per-image CSV, success curve, summary and optional plots; returns summary items."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "metrics.csv", records)
    items, curve = summarize_records(records, depth)
    items.append(("excluded_no_foreground", len(excluded)))
    if curve is not None:
        write_curve_csv(out / "success_curve.csv", curve[0], curve[1])
        if svg:
            write_curve_svg(out / "success_curve.svg", *curve)
    write_summary_csv(out / "summary.csv", items)
    pe = pose_errors([r for r in records if r.unet_index == depth])
    if svg and pe is not None and len(pe[0]) >= 2:
        pred, gt = pe
        for j, name in enumerate(PARAM_NAMES):
            ba = bland_altman(pred[:, j], gt[:, j], wrap_rotation=name == "theta")
            write_bland_altman_svg(out / f"bland_altman_{name}.svg", (pred[:, j] + gt[:, j]) / 2,
                                   ba, f"{name}: bias {ba.bias:.3f}")
    return dict(items)
