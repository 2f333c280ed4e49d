"""Class-weighted cross-entropy, Dice similarity and run statistics.

Channel 0 is background, channel 1 is the foreground (prostate) class.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError, UsageError

PROB_CLAMP = 1e-7


def _binary_mask(mask, what="mask"):
    m = np.asarray(mask)
    if not ((m == 0) | (m == 1)).all():
        raise DataError(f"{what} must be binary")
    return m.astype(np.uint8)


def _as_batch_mask(mask):
    m = _binary_mask(mask)
    if m.ndim == 4:
        if m.shape[1] != 1:
            raise ShapeError(f"mask tensor must have a single channel, got {m.shape}")
        m = m[:, 0]
    if m.ndim != 3:
        raise ShapeError(f"mask batch must be (N, H, W) or (N, 1, H, W), got {m.shape}")
    return m


def class_weights(mask_batch):
    """Inverse pixel counts per class, ordered (background, foreground).

    A class absent from the batch gets weight 0.
    """
    m = _binary_mask(mask_batch)
    fg = int(m.sum())
    bg = int(m.size) - fg
    return np.array([1.0 / bg if bg else 0.0, 1.0 / fg if fg else 0.0])


def _loss_inputs(probs, mask, weights):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probabilities must be (N, 2, H, W), got {probs.shape}")
    m = _as_batch_mask(mask)
    if m.shape != (probs.shape[0], *probs.shape[2:]):
        raise ShapeError(f"mask shape {m.shape} does not match probabilities {probs.shape}")
    if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise DataError("probabilities are not normalized over the class axis")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (2,) or (weights < 0).any():
        raise DataError("class weights must be two non-negative values")
    p = np.clip(probs[:, 1], PROB_CLAMP, 1.0 - PROB_CLAMP)
    return p, m.astype(np.float64), weights[m]


def weighted_ce(probs, mask, weights):
    """L = -(1/n) sum_i w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)], n = pixel count."""
    p, y, w = _loss_inputs(probs, mask, weights)
    terms = w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(-terms.sum() / p.size)


def weighted_ce_grad(probs, mask, weights):
    """Gradient of :func:`weighted_ce` w.r.t. the probability tensor.

    The loss reads only the foreground channel, so the background channel
    gradient is zero; feeding this to the softmax backward gives the exact
    logit gradient.
    """
    p, y, w = _loss_inputs(probs, mask, weights)
    grad = np.zeros(np.shape(probs))
    grad[:, 1] = -(w / p.size) * (y / p - (1.0 - y) / (1.0 - p))
    return grad


def binarize(probs):
    """Per-pixel argmax over (background, foreground); exact ties go to background."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probabilities must be (N, 2, H, W), got {probs.shape}")
    return (probs[:, 1] > probs[:, 0]).astype(np.uint8)


def dsc(pred_mask, true_mask):
    """2|X n Y| / (|X| + |Y|) on the foreground class; 1.0 when both are empty."""
    x = _binary_mask(pred_mask, "pred_mask")
    y = _binary_mask(true_mask, "true_mask")
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    inter = int(np.count_nonzero(x & y))
    total = int(np.count_nonzero(x)) + int(np.count_nonzero(y))
    return 1.0 if total == 0 else 2.0 * inter / total


@dataclass(frozen=True)
class DscReport:
    per_image: tuple
    average: float
    maximum: float
    minimum: float


def report_stats(per_image_dsc):
    values = tuple(float(v) for v in per_image_dsc)
    if not values:
        raise UsageError("cannot summarize an empty DSC list")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise DataError("DSC values must lie in [0, 1]")
    # sorted summation keeps the mean permutation invariant bit for bit
    average = float(np.sum(np.sort(np.array(values)))) / len(values)
    lo, hi = min(values), max(values)
    return DscReport(per_image=values, average=min(max(average, lo), hi), maximum=hi, minimum=lo)


def reports_to_csv(reports):
    """Long layout: one ``run,avg,max,min`` row per report."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "avg", "max", "min"])
    for k, r in enumerate(reports, start=1):
        writer.writerow([k, f"{r.average:.6f}", f"{r.maximum:.6f}", f"{r.minimum:.6f}"])
    return buf.getvalue()


def reports_to_table(reports):
    """Wide layout: runs as columns, Average/Maximum/Minimum as rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["DSC"] + [f"Test run {k}" for k in range(1, len(reports) + 1)])
    for label, attr in (("Average", "average"), ("Maximum", "maximum"), ("Minimum", "minimum")):
        writer.writerow([label] + [f"{getattr(r, attr):.6f}" for r in reports])
    return buf.getvalue()
