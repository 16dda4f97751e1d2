"""Image- and pixel-level detection metrics plus the task-difficulty score.

All ranking metrics handle ties explicitly: ROC uses the Mann-Whitney
statistic with half-credit ties, average precision processes equal-score
blocks atomically, and F1-max sweeps the distinct score values with
``score >= threshold`` counted as a positive prediction.  Region overlap
(PRO) integrates the best achievable mean per-region recall as a step
function of false-positive rate up to a cap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class UndefinedMetric(ValueError):
    """A class needed by the metric is empty; the value is absent, not 0."""


def _scores_labels(scores, labels) -> tuple:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels must align")
    return s, y


def auroc(scores, labels) -> float:
    """P(score+ > score-) + half the tie probability, via tied ranks."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("auroc needs both classes")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _descending_blocks(s: np.ndarray, y: np.ndarray):
    """Yield (tp, fp) cumulative counts at each distinct-score boundary,
    scanning scores high to low."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j + 1].sum())
        fp += int(j - i + 1 - y_sorted[i:j + 1].sum())
        yield tp, fp
        i = j + 1


def average_precision(scores, labels) -> float:
    """Prefix AP over descending scores, ties processed as one block."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision needs a positive example")
    ap = 0.0
    prev_recall = 0.0
    for tp, fp in _descending_blocks(s, y):
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_max(scores, labels) -> float:
    """Best F1 over thresholds at the distinct score values."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("f1-max needs a positive example")
    best = 0.0
    for tp, fp in _descending_blocks(s, y):
        precision = tp / (tp + fp)
        recall = tp / n_pos
        if precision + recall > 0:
            f1 = 2.0 * precision * recall / (precision + recall)
            if f1 > best:
                best = f1
    return best


# --------------------------------------------------------------------------
# Per-region overlap


def _pro_curve_point(binary_maps: np.ndarray, region_labels: list,
                     region_counts: list, normal_pixels: int) -> tuple:
    overlaps = []
    fp = 0
    for b, labeled, count in zip(binary_maps, region_labels, region_counts):
        for region in range(1, count + 1):
            cells = labeled == region
            overlaps.append(np.sum(b & cells) / np.sum(cells))
        fp += int(np.sum(b & (labeled == 0)))
    fpr = fp / normal_pixels if normal_pixels else 0.0
    return fpr, float(np.mean(overlaps))


def pro(pixel_maps, gt_masks, fpr_cap: float = 0.3, steps: int = 100) -> float:
    """Mean per-region recall integrated over FPR in [0, cap], normalized.

    Thresholds sweep the observed score range; each threshold contributes the
    operating point (FPR, mean region overlap).  The monotone curve is
    integrated as a left step function so degenerate maps whose only
    operating point sits above the cap contribute zero area.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in pixel_maps]
    masks = [np.asarray(g) != 0 for g in gt_masks]
    if len(maps) != len(masks) or any(m.shape != g.shape for m, g in zip(maps, masks)):
        raise ValueError("score maps and masks must align")
    labeled_all, counts = [], []
    for g in masks:
        lab, n = ndimage.label(g, structure=EIGHT_CONNECTED)
        labeled_all.append(lab)
        counts.append(n)
    if sum(counts) == 0:
        raise UndefinedMetric("pro needs at least one anomalous region")
    normal_pixels = int(sum((~g).sum() for g in masks))

    lo = min(float(m.min()) for m in maps)
    hi = max(float(m.max()) for m in maps)
    thresholds = np.linspace(hi, lo, steps) if hi > lo else np.array([lo])

    points = [(0.0, 0.0)]
    for t in thresholds:
        binary = [m >= t for m in maps]
        points.append(_pro_curve_point(binary, labeled_all, counts, normal_pixels))
    points.sort(key=lambda p: p[0])

    area = 0.0
    for idx, (fpr, overlap) in enumerate(points):
        if fpr >= fpr_cap:
            break
        nxt = points[idx + 1][0] if idx + 1 < len(points) else fpr_cap
        area += overlap * (min(nxt, fpr_cap) - fpr)
    return area / fpr_cap


def task_difficulty(ref_features, ref_masks, test_features, test_masks) -> float:
    """Mean over anomalous test patches of their best cosine similarity to
    any anomalous reference patch."""
    from .autodiff import cosine

    refs = np.asarray(ref_features, dtype=np.float64).reshape(-1, np.shape(ref_features)[-1])
    tests = np.asarray(test_features, dtype=np.float64).reshape(-1, np.shape(test_features)[-1])
    rmask = np.asarray(ref_masks).reshape(-1)
    tmask = np.asarray(test_masks).reshape(-1)
    ref_rows = refs[rmask != 0]
    test_rows = tests[tmask != 0]
    if ref_rows.shape[0] == 0 or test_rows.shape[0] == 0:
        raise UndefinedMetric("task difficulty needs masked patches on both sides")
    total = 0.0
    for t in test_rows:
        best = -1.0
        for r in ref_rows:
            c = cosine(t, r)
            if c > best:
                best = c
        total += best
    return total / test_rows.shape[0]


# --------------------------------------------------------------------------
# Reports

REPORT_KEYS = ("image_auroc", "image_ap", "image_f1max",
               "pixel_auroc", "pixel_pro", "pixel_f1max",
               "task_difficulty", "n_pos_images", "n_neg_images")


@dataclass
class EvalReport:
    image_auroc: Optional[float]
    image_ap: Optional[float]
    image_f1max: Optional[float]
    pixel_auroc: Optional[float]
    pixel_pro: Optional[float]
    pixel_f1max: Optional[float]
    task_difficulty: Optional[float]
    n_pos_images: int
    n_neg_images: int

    def to_text(self) -> str:
        doc = {}
        for key in REPORT_KEYS:
            value = getattr(self, key)
            if isinstance(value, float):
                value = round(value, 6)
            doc[key] = value
        return json.dumps(doc, indent=2) + "\n"

    def summary_pair(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{100 * v:.1f}"

        return f"({fmt(self.image_auroc)} / {fmt(self.pixel_auroc)})"


def _maybe(fn, *args):
    try:
        return float(fn(*args))
    except UndefinedMetric:
        return None


def evaluate(image_scores, image_labels, pixel_maps=None, pixel_masks=None,
             difficulty: Optional[float] = None) -> EvalReport:
    """Assemble the standard report; empty-class metrics come back absent."""
    y = np.asarray(image_labels).astype(np.int64).ravel()
    report = EvalReport(
        image_auroc=_maybe(auroc, image_scores, y),
        image_ap=_maybe(average_precision, image_scores, y),
        image_f1max=_maybe(f1_max, image_scores, y),
        pixel_auroc=None,
        pixel_pro=None,
        pixel_f1max=None,
        task_difficulty=difficulty,
        n_pos_images=int(y.sum()),
        n_neg_images=int(y.size - y.sum()),
    )
    if pixel_maps is not None and pixel_masks is not None and len(pixel_maps):
        flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
        flat_labels = np.concatenate([(np.asarray(g) != 0).astype(np.int64).ravel() for g in pixel_masks])
        report.pixel_auroc = _maybe(auroc, flat_scores, flat_labels)
        report.pixel_f1max = _maybe(f1_max, flat_scores, flat_labels)
        report.pixel_pro = _maybe(pro, pixel_maps, pixel_masks)
    return report
