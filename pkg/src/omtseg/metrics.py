"""Evaluation metrics: mean IoU, panoptic quality, average precision.

Void handling in panoptic quality follows the COCO-panoptic convention,
spelled out exactly as implemented:

- a prediction/ground-truth pair matches when the categories agree and
  IoU > 0.5 (strictly), with the prediction's overlap with ground-truth
  void removed from the union:
  IoU = |p & g| / (|p| + |g| - |p & g| - |p & void|);
- the > 0.5 threshold on disjoint segments makes matches unique;
- an unmatched prediction with more than half of its area on ground-truth
  void is discarded rather than counted as a false positive;
- PQ = sum of matched IoUs / (TP + FP/2 + FN/2), SQ = sum / TP,
  RQ = TP / (TP + FP/2 + FN/2), all over the image's segments jointly.

Average precision uses mask IoU with score-sorted greedy matching at
IoU >= t per threshold (panoptic matching keeps its strict > 0.5), the
all-point interpolated area under the precision-recall curve, thresholds
0.50 to 0.95 in steps of 0.05, and a mean over categories present in the
ground truth.
"""

import numpy as np

from .errors import DimensionError

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


def mask_iou(a, b):
    """Intersection over union of two boolean masks (0 when both empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = a.sum() + b.sum() - inter
    if union == 0:
        return 0.0
    return float(inter / union)


def miou(pred_semantic, gt_semantic, n_categories):
    """Mean intersection-over-union over categories present somewhere.

    Returns (mean, per_class) where per_class[c] is NaN for categories
    absent from both maps; those are excluded from the mean.  Pixels
    labeled outside 0..n_categories-1 (e.g. void -1) belong to no class.
    """
    pred = np.asarray(pred_semantic)
    gt = np.asarray(gt_semantic)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"semantic maps differ in shape: {pred.shape} vs {gt.shape}"
        )
    per_class = np.full(n_categories, np.nan)
    for c in range(n_categories):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        per_class[c] = np.logical_and(p, g).sum() / union
    present = ~np.isnan(per_class)
    mean = float(per_class[present].mean()) if present.any() else 0.0
    return mean, per_class


class SegmentMatching:
    """Panoptic match sets: TP (pred id, gt id, IoU), FP ids, FN ids."""

    def __init__(self, tp, fp, fn):
        self.tp = list(tp)
        self.fp = list(fp)
        self.fn = list(fn)
        pred_ids = [p for p, _, _ in self.tp]
        gt_ids = [g for _, g, _ in self.tp]
        if len(set(pred_ids)) != len(pred_ids) or \
                len(set(gt_ids)) != len(gt_ids):
            raise ValueError("panoptic matching must be one-to-one")


def match_segments(pred, gt):
    """Match same-category segments between two panoptic maps.

    Returns a SegmentMatching under the void convention described in the
    module docstring.  pred and gt are PanopticMaps of equal extent.
    """
    if pred.shape != gt.shape:
        raise DimensionError(
            f"panoptic maps differ in shape: {pred.shape} vs {gt.shape}"
        )
    gt_void = gt.instance == gt.VOID_INSTANCE
    pred_segments = pred.segments()
    gt_segments = gt.segments()

    tp = []
    matched_pred = set()
    matched_gt = set()
    for pid, pcat, parea in pred_segments:
        pmask = pred.instance == pid
        void_overlap = int(np.logical_and(pmask, gt_void).sum())
        for gid, gcat, garea in gt_segments:
            if gcat != pcat or gid in matched_gt:
                continue
            inter = int(np.logical_and(pmask, gt.instance == gid).sum())
            if inter == 0:
                continue
            union = parea + garea - inter - void_overlap
            iou = inter / union if union > 0 else 0.0
            if iou > 0.5:
                tp.append((pid, gid, float(iou)))
                matched_pred.add(pid)
                matched_gt.add(gid)
                break

    fp = []
    for pid, _, parea in pred_segments:
        if pid in matched_pred:
            continue
        pmask = pred.instance == pid
        void_overlap = int(np.logical_and(pmask, gt_void).sum())
        if void_overlap / parea > 0.5:
            continue  # mostly unlabeled ground truth: ignored, not FP
        fp.append(pid)
    fn = [gid for gid, _, _ in gt_segments if gid not in matched_gt]
    return SegmentMatching(tp, fp, fn)


class PQResult:
    """Panoptic quality with its decomposition and match counts."""

    def __init__(self, pq, sq, rq, matching):
        self.pq = pq
        self.sq = sq
        self.rq = rq
        self.matching = matching

    @property
    def counts(self):
        m = self.matching
        return len(m.tp), len(m.fp), len(m.fn)


def panoptic_quality(pred, gt):
    """PQ, with SQ (mean matched IoU) and RQ (recognition F-score).

    The vacuous case (no segments on either side) reports zeros.
    """
    matching = match_segments(pred, gt)
    n_tp, n_fp, n_fn = len(matching.tp), len(matching.fp), len(matching.fn)
    denom = n_tp + 0.5 * n_fp + 0.5 * n_fn
    iou_sum = sum(iou for _, _, iou in matching.tp)
    sq = iou_sum / n_tp if n_tp else 0.0
    rq = n_tp / denom if denom > 0 else 0.0
    pq = iou_sum / denom if denom > 0 else 0.0
    return PQResult(pq, sq, rq, matching)


def _ap_single(pred_entries, n_gt, threshold):
    """All-point-interpolated AP for one category at one IoU threshold.

    pred_entries: (score, [IoU against each gt]) sorted by descending
    score; greedy matching assigns each prediction the best still-free
    ground truth with IoU >= threshold.
    """
    if n_gt == 0:
        return 0.0
    taken = np.zeros(n_gt, dtype=bool)
    flags = []
    for _score, ious in pred_entries:
        best, best_iou = -1, threshold
        for g in range(n_gt):
            if not taken[g] and ious[g] >= best_iou:
                best, best_iou = g, ious[g]
        if best >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    if not flags:
        return 0.0
    tp_cum = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / n_gt
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(flags)):
        if flags[i]:
            ap += (recall[i] - prev_r) * env[i]
            prev_r = recall[i]
    return float(ap)


class APResult:
    """Average precision per category and summarized over the dataset."""

    def __init__(self, per_category, thresholds=AP_THRESHOLDS):
        self.per_category = per_category  # cat -> array over thresholds
        self.thresholds = tuple(thresholds)

    def category_ap(self, cat):
        return float(self.per_category[cat].mean())

    def category_ap50(self, cat):
        return float(self.per_category[cat][0])

    @property
    def mean_ap(self):
        if not self.per_category:
            return 0.0
        return float(np.mean([v.mean() for v in self.per_category.values()]))

    @property
    def mean_ap50(self):
        if not self.per_category:
            return 0.0
        return float(np.mean([v[0] for v in self.per_category.values()]))


def average_precision(predictions, ground_truths,
                      thresholds=AP_THRESHOLDS):
    """AP over mask instances.

    predictions: (mask, category, score) triples; ground_truths:
    (mask, category) pairs.  Per category present in the ground truth,
    predictions are sorted by descending score (ties keep input order)
    and greedily matched at each IoU threshold; the mean over categories
    ignores categories without any ground truth.
    """
    gt_cats = sorted({c for _, c in ground_truths})
    per_category = {}
    for cat in gt_cats:
        gts = [np.asarray(m, dtype=bool) for m, c in ground_truths
               if c == cat]
        preds = [(float(s), np.asarray(m, dtype=bool))
                 for m, c, s in predictions if c == cat]
        order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
        entries = []
        for i in order:
            score, mask = preds[i]
            entries.append((score, [mask_iou(mask, g) for g in gts]))
        per_category[cat] = np.array([
            _ap_single(entries, len(gts), t) for t in thresholds
        ])
    return APResult(per_category, thresholds)


def render_report(summary, per_class_rows):
    """Produce the human-readable table and the flat key=value text.

    summary: (name, value) pairs; per_class_rows: (label, {metric: value})
    pairs.  NaN renders as "absent" in the table and is skipped in the
    key=value output.
    """
    lines = ["== summary =="]
    kv = []
    for name, value in summary:
        lines.append(f"{name:<16} {value:.6f}")
        kv.append(f"{name} = {value:.10g}")
    if per_class_rows:
        metrics = sorted({k for _, row in per_class_rows for k in row})
        header = f"{'class':<20}" + "".join(f"{m:>12}" for m in metrics)
        lines += ["", "== per class ==", header]
        for label, row in per_class_rows:
            cells = []
            for m in metrics:
                v = row.get(m)
                if v is None or (isinstance(v, float) and np.isnan(v)):
                    cells.append(f"{'absent':>12}")
                else:
                    cells.append(f"{v:>12.6f}")
                    kv.append(f"class.{label}.{m} = {v:.10g}")
            lines.append(f"{label:<20}" + "".join(cells))
    return "\n".join(lines) + "\n", "\n".join(kv) + "\n"
