"""Command-line surface: dataset generation, training, evaluation,
inference, gradient checking, and a built-in self-test battery.

Every subcommand accepts ``--config PATH`` (flat key = value file),
repeated ``--set key=value`` overrides, and ``--seed``.  Exit codes:
0 success, 1 validation or data failure, 2 usage error.
"""

import argparse
import itertools
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as data_io
from . import metrics as metrics_mod
from . import tensor as T
from .checkpoint import load_into_model
from .config import RunConfig
from .errors import ConfigError, ContractError, OmtsegError
from .inference import PanopticMap, infer
from .model import OMTSeg
from .text import PromptDelta, Vocabulary, embed_with_prompt, format_prompt, tokenize
from .training import (
    GroundTruthSegment,
    LossWeights,
    _lap_solve,
    _worker_count,
    compute_losses,
    hungarian_match,
    lion_step,
    lr_schedule,
    train,
)


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="flat key = value configuration file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")


def _build_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.set("seed", args.seed)
        cfg.validate()
    return cfg


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _cmd_gen_data(args):
    seed = args.seed if args.seed is not None else 0
    data_io.generate_synthetic(
        args.out, args.count, seed=seed, split=args.split,
        image_size=args.image_size, fmt=args.format,
    )
    print(f"wrote {args.count} {args.split} images to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _universe_vocab(categories):
    words = [w for name in categories for w in name.split()]
    return Vocabulary.build(words)


def _check_image_size(cfg, shape):
    size = cfg["model.image_size"]
    if shape != (size, size):
        raise ConfigError(
            f"dataset images are {shape[0]}x{shape[1]} but "
            f"model.image_size = {size}; override with "
            f"--set model.image_size={shape[0]}"
        )


def _cmd_train(args):
    cfg = _build_config(args)
    dataset = data_io.read_panoptic(args.data)
    if not dataset.samples:
        raise ContractError(f"dataset at {args.data} contains no images")
    _check_image_size(cfg, dataset.samples[0].panoptic.shape)
    samples, prompt, flags = data_io.to_train_samples(dataset)

    vocab = _universe_vocab(dataset.categories)
    model = OMTSeg(cfg, vocab)

    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.txt"))
    vocab.save(os.path.join(args.out, "vocab.txt"))
    with open(os.path.join(args.out, "prompt.txt"), "w",
              encoding="utf-8") as fh:
        for name, flag in zip(prompt, flags):
            fh.write(f"{name}\t{'thing' if flag else 'stuff'}\n")

    print(f"training on {len(samples)} images, prompt: {', '.join(prompt)}")
    result = train(samples, model, cfg, out_dir=args.out,
                   log_stream=sys.stdout)
    with open(os.path.join(args.out, "train.log"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(result.log_lines) + "\n")
    print(f"finished {result.steps} steps; checkpoint at "
          f"{result.checkpoint_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_run(run_dir, args):
    cfg_path = os.path.join(run_dir, "config.txt")
    if not os.path.exists(cfg_path):
        raise ConfigError(f"{run_dir} is not a training output directory "
                          "(missing config.txt)")
    cfg = RunConfig.load(cfg_path)
    if args.overrides:
        cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.set("seed", args.seed)
        cfg.validate()
    vocab = Vocabulary.load(os.path.join(run_dir, "vocab.txt"))
    model = OMTSeg(cfg, vocab)
    load_into_model(model, os.path.join(run_dir, "checkpoint"))
    return cfg, model


def _parse_name_list(raw):
    names = [s.strip() for s in raw.split(",") if s.strip()]
    if not names:
        raise ConfigError("expected a comma-separated list of names")
    return names


def _query_detections(result, h, w, theta_mask):
    """Per-query detection triples (mask, class, score) before merging."""
    seg = result.output.seg
    obj = _sigmoid(seg.objectness.data)
    logits = seg.mask_logits.data
    out = []
    for q in range(logits.shape[0]):
        prob = _sigmoid(T.resize_plane(logits[q], h, w))
        mask = prob >= theta_mask
        if mask.any():
            out.append((mask, int(result.classes[q]), float(obj[q])))
    return out


def _cmd_eval(args):
    cfg, model = _load_run(args.run, args)
    dataset = data_io.read_panoptic(args.data)
    if not dataset.samples:
        raise ContractError(f"dataset at {args.data} contains no images")
    _check_image_size(cfg, dataset.samples[0].panoptic.shape)

    if args.categories:
        names = _parse_name_list(args.categories)
    else:
        present = sorted({
            cat
            for s in dataset.samples
            for _id, cat, _a in s.panoptic.segments()
        })
        names = [dataset.categories[c] for c in present]
    universe_index = {n: i for i, n in enumerate(dataset.categories)}
    for n in names:
        if n not in universe_index:
            raise ConfigError(f"category {n!r} is not in the dataset universe")
    flags = [dataset.thing_flags[universe_index[n]] for n in names]
    # prompt index -> dataset category id (void passes through)
    lut = np.array([universe_index[n] for n in names] + [-1], dtype=np.int64)

    theta_obj = cfg["thresholds.objectness"]
    theta_mask = cfg["thresholds.mask"]
    min_area = cfg["thresholds.min_area"]
    n_universe = len(dataset.categories)
    h, w = dataset.samples[0].panoptic.shape
    pix = h * w
    n_img = len(dataset.samples)

    def run_one(i):
        sample = dataset.samples[i]
        res = infer(model, T.Tensor(sample.image), names, flags,
                    theta_obj=theta_obj, theta_mask=theta_mask,
                    min_area=min_area)
        pred = PanopticMap(lut[res.panoptic.category],
                           res.panoptic.instance, dataset.thing_flags)
        dets = _query_detections(res, h, w, theta_mask)
        return pred, dets

    workers = _worker_count()
    if workers > 1 and n_img > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(n_img)))
    else:
        results = [run_one(i) for i in range(n_img)]

    pred_cats = []
    gt_cats = []
    iou_sum = 0.0
    tp = fp = fn = 0
    ap_preds = []
    ap_gts = []
    for i, (pred, dets) in enumerate(results):
        gt = dataset.samples[i].panoptic
        pred_cats.append(pred.category)
        gt_cats.append(gt.category)
        matching = metrics_mod.match_segments(pred, gt)
        iou_sum += sum(entry[2] for entry in matching.tp)
        tp += len(matching.tp)
        fp += len(matching.fp)
        fn += len(matching.fn)
        # disjoint per-image slices of one global canvas keep instance
        # matching within the image while pooling the score ranking
        for mask, cls, score in dets:
            flat = np.zeros(n_img * pix, dtype=bool)
            flat[i * pix:(i + 1) * pix] = mask.ravel()
            ap_preds.append((flat, int(lut[cls]), score))
        for seg_id, cat, _area in gt.segments():
            flat = np.zeros(n_img * pix, dtype=bool)
            flat[i * pix:(i + 1) * pix] = (gt.instance == seg_id).ravel()
            ap_gts.append((flat, cat))

    miou_val, per_class = metrics_mod.miou(
        np.concatenate(pred_cats, axis=0), np.concatenate(gt_cats, axis=0),
        n_universe,
    )
    denom = tp + 0.5 * fp + 0.5 * fn
    pq = iou_sum / denom if denom > 0 else 0.0
    sq = iou_sum / tp if tp > 0 else 0.0
    rq = tp / denom if denom > 0 else 0.0
    ap = metrics_mod.average_precision(ap_preds, ap_gts)

    summary = [
        ("images", float(n_img)),
        ("miou", miou_val),
        ("pq", pq),
        ("sq", sq),
        ("rq", rq),
        ("map", ap.mean_ap),
        ("map50", ap.mean_ap50),
        ("tp", float(tp)),
        ("fp", float(fp)),
        ("fn", float(fn)),
    ]
    rows = []
    for name in names:
        uid = universe_index[name]
        row = {"iou": per_class[uid]}
        if uid in ap.per_category:
            row["ap"] = ap.category_ap(uid)
            row["ap50"] = ap.category_ap50(uid)
        rows.append((name, row))
    text, kv = metrics_mod.render_report(summary, rows)
    print(text)
    if args.report:
        with open(args.report + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        with open(args.report + ".kv", "w", encoding="utf-8") as fh:
            fh.write(kv)
        print(f"report written to {args.report}.txt and {args.report}.kv")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _cmd_infer(args):
    cfg, model = _load_run(args.run, args)
    names = _parse_name_list(args.categories)
    stuff = set(_parse_name_list(args.stuff)) if args.stuff else set()
    unknown = stuff - set(names)
    if unknown:
        raise ConfigError(f"--stuff names {sorted(unknown)} not in "
                          "--categories")
    flags = [n not in stuff for n in names]

    rgb = data_io.read_image(args.image)
    _check_image_size(cfg, rgb.shape[:2])
    image = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0

    prompt = format_prompt(names)
    print(f"prompt: {prompt}")
    res = infer(model, T.Tensor(image), names, flags,
                theta_obj=cfg["thresholds.objectness"],
                theta_mask=cfg["thresholds.mask"],
                min_area=cfg["thresholds.min_area"])
    lines = [f"prompt: {prompt}"]
    for seg_id, cat, area in res.panoptic.segments():
        kind = "thing" if flags[cat] else "stuff"
        line = f"segment {seg_id} {names[cat]} {kind} {area}"
        print(line)
        lines.append(line)
    if not res.panoptic.segments():
        print("no segments above thresholds")
    if args.out:
        data_io.write_image(args.out,
                            data_io.encode_segment_ids(res.panoptic.instance))
        print(f"panoptic map written to {args.out}")
    if args.record:
        with open(args.record, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_problem(cfg):
    """A deterministic image/targets/prompt triple at the configured size."""
    rng = np.random.default_rng(cfg["seed"])
    size = cfg["model.image_size"]
    image = rng.uniform(0.0, 1.0, size=(3, size, size))
    grid = size // 4
    a = np.zeros((grid, grid), dtype=bool)
    a[1:grid // 2, 1:grid // 2] = True
    b = np.zeros((grid, grid), dtype=bool)
    b[grid // 2 + 1:grid - 1, grid // 2 + 1:grid - 1] = True
    background = ~(a | b)
    categories = ["red circle", "blue square", "stripes"]
    targets = [
        GroundTruthSegment(a, 0),
        GroundTruthSegment(b, 1),
        GroundTruthSegment(background, 2, is_thing=False),
    ]
    return image, targets, categories


def _cmd_gradcheck(args):
    cfg = _build_config(args)
    image, targets, categories = _gradcheck_problem(cfg)
    vocab = _universe_vocab(data_io.default_universe().names)
    # Gradient integrity is checked for every parameter group, including
    # the encoder that training leaves frozen by default.
    model = OMTSeg(cfg, vocab, freeze_backbone=False)
    seq = tokenize(format_prompt(categories), vocab)
    weights = LossWeights.from_config(cfg)
    image_t = T.Tensor(image)

    # Pin the query-target assignment from one clean forward pass: the
    # matching is piecewise constant, and letting a probe step flip it
    # would put a jump inside the finite difference.
    first = model(image_t, seq)
    matches = [hungarian_match(layer, targets, weights, first.f_l)
               for layer in first.seg.layers]

    def loss():
        return compute_losses(model(image_t, seq), targets, weights,
                              matches=matches).total

    report = T.finite_difference_check(
        loss, model.trainable_parameters(), h=args.step,
        tolerance=args.tolerance, mode=args.mode, samples=args.samples,
        rng=np.random.default_rng(cfg["seed"]),
    )
    groups = {}
    for entry in report.entries:
        prefix = entry.name.split(".")[0]
        worst, count = groups.get(prefix, (0.0, 0))
        groups[prefix] = (max(worst, entry.max_rel_err), count + 1)
    for prefix in sorted(groups):
        worst, count = groups[prefix]
        flag = "ok" if worst < args.tolerance else "FAIL"
        print(f"{prefix}: max_rel_err={worst:.3e} over {count} tensors "
              f"[{flag}]")
    print(f"gradcheck: {'PASS' if report.passed else 'FAIL'} "
          f"(max {report.max_rel_err:.3e}, tolerance {args.tolerance:g})")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _selftest_matmul(rng):
    worst = 0.0
    for _ in range(5):
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        want = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    want[i, j] += a[i, k] * b[k, j]
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-12, f"max abs err {worst:.2e}"


def _selftest_conv(rng):
    worst = 0.0
    for _ in range(2):
        x = rng.standard_normal((2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=1).data
        pad = np.zeros((2, 7, 7))
        pad[:, 1:6, 1:6] = x
        want = np.zeros((3, 5, 5))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    want[o, i, j] = (pad[:, i:i + 3, j:j + 3] * k[o]).sum()
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-12, f"max abs err {worst:.2e}"


def _selftest_autodiff(rng):
    x = T.Tensor(rng.standard_normal((2, 3)))
    w1 = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w2 = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

    def f():
        return T.sum_(T.matmul(T.sigmoid(T.matmul(x, w1)), w2))

    report = T.finite_difference_check(
        f, [("w1", w1), ("w2", w2)], h=1e-5, tolerance=1e-6,
    )
    return report.passed, f"max rel err {report.max_rel_err:.2e}"


def _selftest_assignment(rng):
    for _ in range(20):
        t = int(rng.integers(1, 5))
        q = int(rng.integers(t, 7))
        cost = rng.uniform(0.0, 10.0, size=(t, q))
        cols = _lap_solve(cost)
        got = float(cost[np.arange(t), cols].sum())
        best = min(
            sum(cost[i, perm[i]] for i in range(t))
            for perm in itertools.permutations(range(q), t)
        )
        if abs(got - best) > 1e-9:
            return False, f"cost {got:.6f} vs brute force {best:.6f}"
    return True, "20 instances exact"


def _selftest_lion(rng):
    theta = 0.7
    m = 0.0
    grads = rng.standard_normal(5)
    lr, b1, b2, wd = 1e-2, 0.9, 0.99, 0.1
    p = T.Tensor(np.array(0.7), requires_grad=True)
    state = {"p": np.zeros(())}
    for g in grads:
        update = np.sign(b1 * m + (1 - b1) * g)
        theta = theta - lr * (update + wd * theta)
        m = b2 * m + (1 - b2) * g
        lion_step([("p", p)], {"p": np.array(g)}, state, lr,
                  beta1=b1, beta2=b2, weight_decay=wd)
    ok = float(p.data) == theta
    return ok, f"scalar trajectory {'matches' if ok else 'diverges'}"


def _selftest_schedule(_rng):
    ok = (lr_schedule(600, 3e-5, 600, 90000) == 3e-5
          and lr_schedule(90000, 3e-5, 600, 90000) == 0.0
          and lr_schedule(0, 3e-5, 600, 90000) == 0.0)
    return ok, "published profile endpoints"


def _selftest_miou(rng):
    for _ in range(10):
        pred = rng.integers(0, 4, size=(6, 6))
        gt = rng.integers(0, 4, size=(6, 6))
        _mean, per_class = metrics_mod.miou(pred, gt, 4)
        for c in range(4):
            inter = int(((pred == c) & (gt == c)).sum())
            union = int(((pred == c) | (gt == c)).sum())
            want = np.nan if union == 0 else inter / union
            have = per_class[c]
            if np.isnan(want) != np.isnan(have):
                return False, f"class {c} absence mismatch"
            if not np.isnan(want) and have != want:
                return False, f"class {c}: {have} != {want}"
    return True, "10 instances exact"


def _random_panoptic(rng):
    n = int(rng.integers(0, 4))
    cat = -np.ones((8, 8), dtype=int)
    inst = np.zeros((8, 8), dtype=int)
    labels = rng.integers(0, n + 1, size=(8, 8))
    for s in range(1, n + 1):
        sel = labels == s
        if sel.any():
            cat[sel] = int(rng.integers(0, 3))
            inst[sel] = s
    return PanopticMap(cat, inst, [True, True, True])


def _selftest_pq(rng):
    ident = _random_panoptic(rng)
    res = metrics_mod.panoptic_quality(ident, ident)
    if ident.segments() and res.pq != 1.0:
        return False, f"identity pq {res.pq}"
    for _ in range(10):
        pred = _random_panoptic(rng)
        gt = _random_panoptic(rng)
        r = metrics_mod.panoptic_quality(pred, gt)
        if abs(r.pq - r.sq * r.rq) > 1e-12:
            return False, "pq != sq * rq"
    return True, "identity and factorization hold"


def _selftest_ap(rng):
    mask = rng.random((6, 6)) < 0.5
    res = metrics_mod.average_precision([(mask, 0, 0.9)], [(mask, 0)])
    if res.mean_ap != 1.0:
        return False, f"perfect detection ap {res.mean_ap}"
    preds = [(rng.random((6, 6)) < 0.5, 0, 0.2 * k + 0.1) for k in range(3)]
    gts = [(rng.random((6, 6)) < 0.5, 0) for _ in range(2)]
    a = metrics_mod.average_precision(preds, gts)
    b = metrics_mod.average_precision(preds[::-1], gts[::-1])
    ok = np.allclose(a.per_category[0], b.per_category[0], atol=1e-12)
    return ok, "input order irrelevant"


def _selftest_codec(rng):
    rgb = data_io.encode_segment_ids(np.array([[70000]]))
    if tuple(rgb[0, 0]) != (112, 17, 1):
        return False, f"70000 -> {tuple(rgb[0, 0])}"
    ids = rng.integers(0, 256 ** 3, size=(16, 16))
    back = data_io.decode_segment_ids(data_io.encode_segment_ids(ids))
    return bool((back == ids).all()), "base-256 round trip"


def _selftest_config(_rng):
    cfg = RunConfig()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "config.txt")
        cfg.save(path)
        again = RunConfig.load(path)
    return cfg.serialize() == again.serialize(), "serialize fixed point"


def _selftest_prompt(rng):
    names = ["red circle", "stripes", "blue square"]
    vocab = _universe_vocab(data_io.default_universe().names)
    seq = tokenize(format_prompt(names), vocab)
    if seq.category_names != names:
        return False, f"round trip gave {seq.category_names}"
    table = T.Tensor(rng.standard_normal((len(vocab), 8)),
                     requires_grad=True)
    delta = PromptDelta(4, 8)
    tuned = embed_with_prompt(seq, table, delta, enabled=True)
    plain = embed_with_prompt(seq, table, delta, enabled=False)
    ok = (tuned.data == plain.data).all()
    return bool(ok), "zero deltas embed like the plain table"


SELFTESTS = [
    ("matmul-oracle", _selftest_matmul),
    ("conv2d-oracle", _selftest_conv),
    ("autodiff-fd", _selftest_autodiff),
    ("assignment-brute-force", _selftest_assignment),
    ("lion-scalar-oracle", _selftest_lion),
    ("lr-schedule", _selftest_schedule),
    ("miou-counting", _selftest_miou),
    ("pq-properties", _selftest_pq),
    ("ap-properties", _selftest_ap),
    ("panoptic-id-codec", _selftest_codec),
    ("config-round-trip", _selftest_config),
    ("prompt-round-trip", _selftest_prompt),
]


def _cmd_selftest(args):
    seed = args.seed if args.seed is not None else 0
    failures = 0
    for name, check in SELFTESTS:
        ok, detail = check(np.random.default_rng(seed))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    print(f"selftest: {len(SELFTESTS) - failures}/{len(SELFTESTS)} passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="omtseg",
        description="open-vocabulary panoptic segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, required=True,
                   help="number of images")
    p.add_argument("--split", choices=["seen", "unseen"], default="seen")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--format", choices=["png", "ppm"], default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="metrics report over a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--categories", default=None,
                   help="comma-separated prompt (default: dataset categories)")
    p.add_argument("--report", default=None, metavar="PREFIX",
                   help="write PREFIX.txt and PREFIX.kv")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="segment one image with a prompt")
    p.add_argument("--image", required=True, help="input PNG or PPM")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--categories", required=True,
                   help="comma-separated category names")
    p.add_argument("--stuff", default=None,
                   help="comma-separated subset of --categories to treat "
                        "as stuff")
    p.add_argument("--out", default=None,
                   help="write the panoptic id map as PNG/PPM")
    p.add_argument("--record", default=None,
                   help="write the prompt and segment table to a file")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model")
    p.add_argument("--mode", choices=["exhaustive", "sampled", "directional"],
                   default="directional")
    p.add_argument("--samples", type=int, default=1,
                   help="random probes per parameter")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-4,
                   help="central-difference step")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in oracle battery")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except OmtsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
