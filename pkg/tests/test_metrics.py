"""Tests for mean IoU, panoptic quality, and average precision."""

import numpy as np
import pytest

from omtseg import metrics as M
from omtseg.errors import DimensionError
from omtseg.inference import PanopticMap


def rng_for(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# mean IoU
# ---------------------------------------------------------------------------

def test_miou_perfect_prediction():
    rng = rng_for(0)
    gt = rng.integers(0, 4, size=(8, 8))
    mean, per_class = M.miou(gt, gt, 4)
    assert mean == 1.0
    present = ~np.isnan(per_class)
    assert np.all(per_class[present] == 1.0)


def test_miou_strip_fixture():
    gt = np.array([[0, 0, 1, 1]])
    pred = np.array([[0, 1, 1, 1]])
    mean, per_class = M.miou(pred, gt, 2)
    np.testing.assert_allclose(per_class[0], 1 / 2, atol=1e-15)
    np.testing.assert_allclose(per_class[1], 2 / 3, atol=1e-15)
    np.testing.assert_allclose(mean, (1 / 2 + 2 / 3) / 2, atol=1e-15)


def test_miou_excludes_absent_classes():
    gt = np.zeros((4, 4), dtype=int)
    pred = np.zeros((4, 4), dtype=int)
    pred[0, 0] = 1  # class 1 appears only in the prediction: counted, IoU 0
    mean, per_class = M.miou(pred, gt, 3)
    assert np.isnan(per_class[2])  # class 2 nowhere: excluded
    np.testing.assert_allclose(per_class[1], 0.0)
    np.testing.assert_allclose(per_class[0], 15 / 16)
    np.testing.assert_allclose(mean, (15 / 16 + 0.0) / 2)


def test_miou_void_pixels_belong_to_no_class():
    gt = np.array([[0, -1], [1, -1]])
    pred = np.array([[0, 0], [1, 1]])
    _, per_class = M.miou(pred, gt, 2)
    # prediction claims the void pixels, growing each union
    np.testing.assert_allclose(per_class[0], 1 / 2)
    np.testing.assert_allclose(per_class[1], 1 / 2)


def test_miou_matches_pixel_counting_oracle():
    rng = rng_for(1)
    for _ in range(200):
        n_c = int(rng.integers(2, 6))
        pred = rng.integers(0, n_c, size=(8, 8))
        gt = rng.integers(0, n_c, size=(8, 8))
        mean, per_class = M.miou(pred, gt, n_c)
        vals = []
        for c in range(n_c):
            inter = 0
            union = 0
            for i in range(8):
                for j in range(8):
                    p = pred[i, j] == c
                    g = gt[i, j] == c
                    inter += int(p and g)
                    union += int(p or g)
            if union == 0:
                assert np.isnan(per_class[c])
            else:
                assert per_class[c] == inter / union
                vals.append(inter / union)
        assert mean == (sum(vals) / len(vals) if vals else 0.0)


def test_miou_shape_mismatch():
    with pytest.raises(DimensionError):
        M.miou(np.zeros((2, 2)), np.zeros((2, 3)), 2)


# ---------------------------------------------------------------------------
# panoptic quality
# ---------------------------------------------------------------------------

def pmap(category, instance, thing_flags):
    return PanopticMap(np.asarray(category), np.asarray(instance),
                       thing_flags)


def two_square_map():
    cat = -np.ones((6, 6), dtype=int)
    inst = np.zeros((6, 6), dtype=int)
    cat[0:3, 0:3] = 0
    inst[0:3, 0:3] = 1
    cat[3:6, 3:6] = 1
    inst[3:6, 3:6] = 2
    return pmap(cat, inst, [True, True])


def test_pq_perfect_prediction_is_one():
    gt = two_square_map()
    pred = two_square_map()
    res = M.panoptic_quality(pred, gt)
    assert res.pq == 1.0 and res.sq == 1.0 and res.rq == 1.0
    assert res.counts == (2, 0, 0)


def test_pq_no_predictions_single_gt():
    gt = two_square_map()
    empty = pmap(-np.ones((6, 6), dtype=int), np.zeros((6, 6), dtype=int),
                 [True, True])
    res = M.panoptic_quality(empty, gt)
    assert res.pq == 0.0 and res.counts == (0, 0, 2)


def test_pq_single_tp_point_six_plus_fp():
    # gt: one 10-pixel segment; matching pred covers 6 of those pixels and
    # nothing else -> IoU 6/10 = 0.6.  A second pred takes the remaining
    # 4 gt pixels plus 4 void pixels (exactly half, so it is kept) and has
    # IoU 4/10 against the already-matched gt -> false positive.
    cat_g = -np.ones((4, 8), dtype=int)
    inst_g = np.zeros((4, 8), dtype=int)
    cat_g[0, 0:8] = 0
    inst_g[0, 0:8] = 1
    cat_g[1, 0:2] = 0
    inst_g[1, 0:2] = 1
    gt = pmap(cat_g, inst_g, [True])

    cat_p = -np.ones((4, 8), dtype=int)
    inst_p = np.zeros((4, 8), dtype=int)
    cat_p[0, 0:6] = 0
    inst_p[0, 0:6] = 1
    cat_p[0, 6:8] = 0
    inst_p[0, 6:8] = 2
    cat_p[1, 0:2] = 0
    inst_p[1, 0:2] = 2
    cat_p[2, 0:4] = 0
    inst_p[2, 0:4] = 2
    pred = pmap(cat_p, inst_p, [True])

    res = M.panoptic_quality(pred, gt)
    np.testing.assert_allclose(res.sq, 0.6, atol=1e-12)
    np.testing.assert_allclose(res.rq, 1 / 1.5, atol=1e-12)
    np.testing.assert_allclose(res.pq, 0.6 / 1.5, atol=1e-12)
    assert res.counts == (1, 1, 0)


def test_pq_strictly_greater_than_half():
    # IoU exactly 0.5 must not match: |p| = |g| = 3, inter = 2, union = 4.
    # Fill the rest of the grid with a stuff segment so no void pixel can
    # shrink the union or absorb the prediction.
    cat_g = np.ones((2, 6), dtype=int)
    inst_g = 2 * np.ones((2, 6), dtype=int)
    cat_g[0, 0:3] = 0
    inst_g[0, 0:3] = 1
    gt = pmap(cat_g, inst_g, [True, False])

    cat_p = np.ones((2, 6), dtype=int)
    inst_p = 2 * np.ones((2, 6), dtype=int)
    cat_p[0, 1:4] = 0
    inst_p[0, 1:4] = 1
    pred = pmap(cat_p, inst_p, [True, False])

    res = M.panoptic_quality(pred, gt)
    # the stuff segments match each other; the 0.5-overlap pair does not
    assert res.counts == (1, 1, 1)
    np.testing.assert_allclose(res.pq, M.mask_iou(inst_p == 2, inst_g == 2)
                               / (1 + 0.5 + 0.5), atol=1e-12)


def test_pq_void_shrinks_union_and_absorbs_fps():
    # gt: left half void, right half one segment of category 0
    cat_g = -np.ones((4, 8), dtype=int)
    inst_g = np.zeros((4, 8), dtype=int)
    cat_g[:, 4:] = 0
    inst_g[:, 4:] = 1
    gt = pmap(cat_g, inst_g, [True])

    # pred A: claims the whole grid -> overlap 16, void overlap 16,
    # union = 32 + 16 - 16 - 16 = 16 -> IoU 1.0
    cat_p = np.zeros((4, 8), dtype=int)
    inst_p = np.ones((4, 8), dtype=int)
    pred = pmap(cat_p, inst_p, [True])
    res = M.panoptic_quality(pred, gt)
    assert res.counts == (1, 0, 0)
    np.testing.assert_allclose(res.pq, 1.0, atol=1e-12)

    # pred B: one matching segment plus one fully inside void -> discarded
    cat_p2 = -np.ones((4, 8), dtype=int)
    inst_p2 = np.zeros((4, 8), dtype=int)
    cat_p2[:, 4:] = 0
    inst_p2[:, 4:] = 1
    cat_p2[:, 0:2] = 0
    inst_p2[:, 0:2] = 2
    pred2 = pmap(cat_p2, inst_p2, [True])
    res2 = M.panoptic_quality(pred2, gt)
    assert res2.counts == (1, 0, 0)
    np.testing.assert_allclose(res2.pq, 1.0, atol=1e-12)


def test_pq_category_must_agree():
    gt = two_square_map()
    cat = -np.ones((6, 6), dtype=int)
    inst = np.zeros((6, 6), dtype=int)
    cat[0:3, 0:3] = 1  # right place, wrong category
    inst[0:3, 0:3] = 1
    pred = pmap(cat, inst, [True, True])
    res = M.panoptic_quality(pred, gt)
    assert res.counts == (0, 1, 2)


def random_panoptic(rng, n_cats=3, grid=8, max_segs=4):
    n = int(rng.integers(0, max_segs + 1))
    cat = -np.ones((grid, grid), dtype=int)
    inst = np.zeros((grid, grid), dtype=int)
    labels = rng.integers(0, n + 1, size=(grid, grid))
    for s in range(1, n + 1):
        sel = labels == s
        if not sel.any():
            continue
        cat[sel] = int(rng.integers(0, n_cats))
        inst[sel] = s
    return pmap(cat, inst, [True] * n_cats)


def test_pq_identity_and_relabeling_invariance():
    rng = rng_for(2)
    for _ in range(100):
        pred = random_panoptic(rng)
        gt = random_panoptic(rng)
        res = M.panoptic_quality(pred, gt)
        assert abs(res.pq - res.sq * res.rq) <= 1e-12

        # shuffle instance ids on both sides
        def relabel(pm, shift):
            inst = pm.instance.copy()
            out = inst.copy()
            for sid in np.unique(inst):
                if sid == 0:
                    continue
                out[inst == sid] = sid + shift
            return pmap(pm.category, out, pm.thing_flags)

        res2 = M.panoptic_quality(relabel(pred, 7), relabel(gt, 13))
        assert res2.pq == res.pq
        assert res2.counts == res.counts


def test_pq_reduces_to_mean_iou_for_single_segment_classes():
    # one segment per class on both sides, all overlapping > 0.5
    cat_g = -np.ones((4, 8), dtype=int)
    inst_g = np.zeros((4, 8), dtype=int)
    cat_g[:2, :] = 0
    inst_g[:2, :] = 1
    cat_g[2:, :] = 1
    inst_g[2:, :] = 2
    gt = pmap(cat_g, inst_g, [True, True])

    cat_p = cat_g.copy()
    inst_p = inst_g.copy()
    cat_p[1, 6:] = 1  # nudge two pixels from class 0 into class 1
    inst_p[1, 6:] = 2
    pred = pmap(cat_p, inst_p, [True, True])

    res = M.panoptic_quality(pred, gt)
    iou0 = M.mask_iou(cat_p == 0, cat_g == 0)
    iou1 = M.mask_iou(cat_p == 1, cat_g == 1)
    np.testing.assert_allclose(res.pq, (iou0 + iou1) / 2, atol=1e-12)


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def blob(grid, r0, r1, c0, c1):
    m = np.zeros((grid, grid), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def test_ap_perfect_single_instance():
    m = blob(8, 1, 5, 2, 6)
    res = M.average_precision([(m, 0, 0.3)], [(m, 0)])
    np.testing.assert_array_equal(res.per_category[0], np.ones(10))
    assert res.mean_ap == 1.0 and res.mean_ap50 == 1.0


def test_ap_zero_predictions():
    res = M.average_precision([], [(blob(8, 0, 4, 0, 4), 1)])
    assert res.mean_ap == 0.0
    np.testing.assert_array_equal(res.per_category[1], np.zeros(10))


def test_ap_ignores_categories_without_gt():
    m = blob(8, 0, 4, 0, 4)
    res = M.average_precision([(m, 0, 0.9), (m, 5, 0.9)], [(m, 0)])
    assert sorted(res.per_category) == [0]
    assert res.mean_ap == 1.0


def test_ap_half_iou_counts_at_threshold_50():
    # IoU exactly 0.5: matched at t=0.50, unmatched at t>0.50
    gt = blob(8, 0, 3, 0, 1)          # 3 pixels
    pred = blob(8, 1, 4, 0, 1)        # 3 pixels, 2 shared -> IoU 2/4
    assert M.mask_iou(pred, gt) == 0.5
    res = M.average_precision([(pred, 0, 0.8)], [(gt, 0)])
    assert res.per_category[0][0] == 1.0
    np.testing.assert_array_equal(res.per_category[0][1:], np.zeros(9))
    np.testing.assert_allclose(res.category_ap(0), 0.1)
    assert res.category_ap50(0) == 1.0


def ap_oracle(preds, gts, threshold):
    """Slow PR-curve recomputation: explicit greedy walk + interpolation."""
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    taken = [False] * len(gts)
    points = []  # (recall, precision) after each prediction
    tp = 0
    for rank, i in enumerate(order, start=1):
        mask = preds[i][0]
        best, best_iou = -1, threshold
        for g, gmask in enumerate(gts):
            if not taken[g]:
                iou = M.mask_iou(mask, gmask)
                if iou >= best_iou:
                    best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
            tp += 1
        points.append((tp / len(gts), tp / rank))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall <= prev_recall:
            continue
        best_prec = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_prec
        prev_recall = recall
    return ap


def test_ap_matches_brute_force_pr_oracle():
    rng = rng_for(3)
    for _ in range(200):
        n_p = int(rng.integers(0, 5))
        n_g = int(rng.integers(1, 4))
        preds = []
        for _ in range(n_p):
            m = rng.random((6, 6)) < rng.uniform(0.2, 0.7)
            preds.append((m, 0, float(rng.random())))
        gts = []
        for _ in range(n_g):
            m = rng.random((6, 6)) < rng.uniform(0.2, 0.7)
            gts.append((m, 0))
        res = M.average_precision(preds, gts)
        for ti, t in enumerate(M.AP_THRESHOLDS):
            want = ap_oracle([(m, s) for m, _, s in preds],
                             [m for m, _ in gts], t)
            np.testing.assert_allclose(res.per_category[0][ti], want,
                                       atol=1e-12)


def test_ap_invariant_to_input_order():
    rng = rng_for(4)
    preds = []
    for k in range(4):
        m = rng.random((6, 6)) < 0.4
        preds.append((m, 0, 0.1 + 0.2 * k))
    gts = [(rng.random((6, 6)) < 0.4, 0) for _ in range(2)]
    base = M.average_precision(preds, gts)
    shuffled = M.average_precision(preds[::-1], gts[::-1])
    np.testing.assert_allclose(base.per_category[0],
                               shuffled.per_category[0], atol=1e-12)


def test_ap_thresholds_table():
    assert len(M.AP_THRESHOLDS) == 10
    assert M.AP_THRESHOLDS[0] == 0.50
    assert M.AP_THRESHOLDS[-1] == 0.95


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def test_render_report_text_and_kv():
    text, kv = M.render_report(
        [("miou", 0.5), ("pq", 0.25)],
        [("sky", {"iou": 0.75}), ("person", {"iou": float("nan")})],
    )
    assert "== summary ==" in text and "== per class ==" in text
    assert "sky" in text and "absent" in text
    entries = dict(line.split(" = ") for line in kv.strip().splitlines())
    assert float(entries["miou"]) == 0.5
    assert float(entries["class.sky.iou"]) == 0.75
    assert "class.person.iou" not in entries
