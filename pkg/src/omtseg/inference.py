"""Open-vocabulary classification and panoptic merging.

Mask features are classified against the prompt's linguistic features by
cosine similarity; surviving query masks are merged into a per-pixel
(category, instance) map with objectness weighting, score thresholds, a
minimum segment area, and one shared instance id per stuff category.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError
from .text import format_prompt, tokenize


class PanopticMap:
    """Per-pixel category and instance ids; 0 / -1 mark void pixels.

    ``thing_flags[c]`` is True when category ``c`` is countable (things get
    one instance id per segment; all pixels of a stuff category share one).
    """

    VOID_INSTANCE = 0
    VOID_CATEGORY = -1

    def __init__(self, category, instance, thing_flags):
        self.category = np.asarray(category, dtype=np.int64)
        self.instance = np.asarray(instance, dtype=np.int64)
        self.thing_flags = list(thing_flags)
        self.validate()

    @property
    def shape(self):
        return self.instance.shape

    def validate(self):
        if self.category.shape != self.instance.shape:
            raise ContractError(
                f"category map {self.category.shape} != instance map "
                f"{self.instance.shape}"
            )
        void_i = self.instance == self.VOID_INSTANCE
        void_c = self.category == self.VOID_CATEGORY
        if not np.array_equal(void_i, void_c):
            raise ContractError("void pixels disagree between the two maps")
        n_cat = len(self.thing_flags)
        cats = self.category[~void_c]
        if cats.size and (cats.min() < 0 or cats.max() >= n_cat):
            raise ContractError("category id outside the category list")
        for seg_id in np.unique(self.instance[~void_i]):
            seg_cats = np.unique(self.category[self.instance == seg_id])
            if seg_cats.size != 1:
                raise ContractError(
                    f"instance {seg_id} spans categories {seg_cats}"
                )
        # Stuff categories own at most one instance id.
        for c in range(n_cat):
            if not self.thing_flags[c]:
                ids = np.unique(self.instance[(self.category == c)])
                if ids.size > 1:
                    raise ContractError(
                        f"stuff category {c} split into ids {ids}"
                    )

    def segments(self):
        """(instance id, category, area) for every non-void segment."""
        out = []
        for seg_id in np.unique(self.instance):
            if seg_id == self.VOID_INSTANCE:
                continue
            sel = self.instance == seg_id
            out.append((int(seg_id), int(self.category[sel][0]), int(sel.sum())))
        return out


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def classify(f_m, f_l):
    """Cosine-similarity classification of queries against categories.

    Returns (class index per query, [Q x C] similarity matrix).  A zero-norm
    feature row has similarity 0 against every partner; ties break toward
    the lowest category index.
    """
    fm = _as_array(f_m)
    fl = _as_array(f_l)
    if fl.ndim != 2 or fl.shape[0] < 1:
        raise ContractError("classification needs at least one category feature")
    nm = np.linalg.norm(fm, axis=1)
    nl = np.linalg.norm(fl, axis=1)
    denom = np.outer(nm, nl)
    sims = np.zeros((fm.shape[0], fl.shape[0]))
    ok = denom > 0.0
    raw = fm @ fl.T
    sims[ok] = raw[ok] / denom[ok]
    classes = sims.argmax(axis=1)
    return classes, sims


def panoptic_merge(seg, classes, thing_flags, out_h, out_w,
                   theta_obj=0.5, theta_mask=0.5, min_area=4,
                   use_objectness=True):
    """Merge per-query masks into one panoptic map.

    Queries whose objectness probability falls below ``theta_obj`` are
    dropped; each pixel goes to the surviving query with the highest
    objectness-weighted mask probability (mask logits are bilinearly
    upsampled to full resolution first); winning scores below ``theta_mask``
    and segments smaller than ``min_area`` become void.  Thing segments get
    fresh instance ids; all segments of one stuff category share an id.
    Ids come out contiguous 1..K in query order.
    """
    classes = np.asarray(classes, dtype=np.int64)
    obj_logits = _as_array(seg.objectness)
    mask_logits = _as_array(seg.mask_logits)
    n_q = obj_logits.shape[0]
    category = np.full((out_h, out_w), PanopticMap.VOID_CATEGORY, dtype=np.int64)
    instance = np.full((out_h, out_w), PanopticMap.VOID_INSTANCE, dtype=np.int64)

    obj = _sigmoid(obj_logits)
    kept = np.nonzero(obj >= theta_obj)[0] if use_objectness else np.arange(n_q)
    if kept.size == 0:
        return PanopticMap(category, instance, thing_flags)

    scores = np.empty((kept.size, out_h, out_w))
    for row, q in enumerate(kept):
        up = T.resize_plane(mask_logits[q], out_h, out_w)
        prob = _sigmoid(up)
        scores[row] = prob * (obj[q] if use_objectness else 1.0)

    winner_row = scores.argmax(axis=0)
    winner_score = np.take_along_axis(
        scores, winner_row[None], axis=0
    )[0]
    assigned = winner_score >= theta_mask
    winner_q = kept[winner_row]

    next_id = 1
    stuff_ids = {}
    for q in kept:
        pix = assigned & (winner_q == q)
        if pix.sum() < min_area:
            continue
        c = int(classes[q])
        if thing_flags[c]:
            seg_id = next_id
            next_id += 1
        else:
            seg_id = stuff_ids.get(c)
            if seg_id is None:
                seg_id = next_id
                stuff_ids[c] = seg_id
                next_id += 1
        instance[pix] = seg_id
        category[pix] = c
    return PanopticMap(category, instance, thing_flags)


class InferenceResult:
    """Panoptic map plus the raw per-query classification evidence."""

    def __init__(self, panoptic, classes, similarities, output, categories):
        self.panoptic = panoptic
        self.classes = classes
        self.similarities = similarities
        self.output = output
        self.categories = list(categories)


def infer(model, image, category_names, thing_flags=None,
          theta_obj=0.5, theta_mask=0.5, min_area=4, use_objectness=True):
    """Prompt -> encode -> decode -> classify -> merge, for arbitrary names."""
    if not category_names:
        raise ContractError("inference needs at least one category name")
    if thing_flags is None:
        thing_flags = [True] * len(category_names)
    if len(thing_flags) != len(category_names):
        raise ContractError("one thing/stuff flag per category is required")
    seq = tokenize(format_prompt(category_names), model.vocab)
    out = model(image, seq)
    classes, sims = classify(out.seg.mask_features, out.f_l)
    h = model.encoder.cfg.image_h
    w = model.encoder.cfg.image_w
    pan = panoptic_merge(
        out.seg, classes, thing_flags, h, w,
        theta_obj=theta_obj, theta_mask=theta_mask,
        min_area=min_area, use_objectness=use_objectness,
    )
    return InferenceResult(pan, classes, sims, out, category_names)
