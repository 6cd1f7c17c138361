"""Set-prediction training: matching, losses, optimizer, and the loop.

Ground-truth segments are matched to object queries with an exact
augmenting-path assignment solver; matched queries take a per-pixel
binary cross-entropy mask loss and an objectness target of 1, unmatched
queries an objectness target of 0, and matched mask features align with
their category's text feature through a symmetric InfoNCE term.  The
optimizer is Lion (sign momentum with decoupled weight decay) under a
linear warmup / linear decay schedule.  Batch elements run forward and
backward on independent tapes (optionally across threads); gradients are
reduced in sample order so runs are bit-reproducible.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .text import format_prompt, tokenize


class GroundTruthSegment:
    """One training target: a stride-4 binary mask, its prompt category
    index, and whether it is a countable thing or background stuff."""

    def __init__(self, mask, category, is_thing=True):
        mask = np.asarray(mask)
        if mask.ndim != 2:
            raise DimensionError(
                f"segment mask must be 2-d, got shape {mask.shape}"
            )
        self.mask = mask.astype(bool)
        self.category = int(category)
        self.is_thing = bool(is_thing)
        if self.category < 0:
            raise ContractError("segment category index must be >= 0")

    @property
    def area(self):
        return int(self.mask.sum())


def validate_targets(segments):
    """Targets within one image must claim disjoint pixels."""
    if not segments:
        return
    total = np.zeros(segments[0].mask.shape, dtype=np.int64)
    for seg in segments:
        if seg.mask.shape != total.shape:
            raise DimensionError("target masks disagree on grid shape")
        total += seg.mask
    if (total > 1).any():
        raise ContractError("target masks overlap")


class LossWeights:
    """Loss mixture: mask, objectness, and contrastive weights plus the
    contrastive temperature.  All must be positive."""

    def __init__(self, lambda_mask=5.0, lambda_obj=2.0, lambda_con=1.0,
                 temperature=0.07):
        values = {
            "lambda_mask": lambda_mask,
            "lambda_obj": lambda_obj,
            "lambda_con": lambda_con,
            "temperature": temperature,
        }
        for name, v in values.items():
            if not (float(v) > 0.0):
                raise ConfigError(f"{name} must be positive, got {v}")
        self.lambda_mask = float(lambda_mask)
        self.lambda_obj = float(lambda_obj)
        self.lambda_con = float(lambda_con)
        self.temperature = float(temperature)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["loss.lambda_mask"], cfg["loss.lambda_obj"],
                   cfg["loss.lambda_con"], cfg["loss.temperature"])


class MatchResult:
    """Injective map from target segments to query indices."""

    def __init__(self, pairs, costs):
        self.pairs = [(int(t), int(q)) for t, q in pairs]
        self.costs = [float(c) for c in costs]
        if len(self.costs) != len(self.pairs):
            raise ContractError("one cost per matched pair required")
        qs = [q for _, q in self.pairs]
        ts = [t for t, _ in self.pairs]
        if len(set(qs)) != len(qs) or len(set(ts)) != len(ts):
            raise ContractError("assignment must be injective")

    def __len__(self):
        return len(self.pairs)

    @property
    def total_cost(self):
        return float(sum(self.costs))

    @property
    def matched_queries(self):
        return [q for _, q in self.pairs]

    @property
    def matched_targets(self):
        return [t for t, _ in self.pairs]


def _bce_np(logits, target):
    """Elementwise stable binary cross-entropy on raw logits (numpy).

    Non-finite logits propagate to non-finite costs (flagged by the
    caller) instead of warning mid-expression.
    """
    z = np.asarray(logits, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))


def _cosine_rows_np(a, b):
    """Cosine similarity between all row pairs; zero-norm rows give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na = np.where(na == 0.0, 1.0, na)
    nb = np.where(nb == 0.0, 1.0, nb)
    return (a / na) @ (b / nb).T


def _lap_solve(cost):
    """Exact min-cost assignment of all rows to distinct columns.

    Shortest-augmenting-path method with dual potentials; requires
    rows <= cols.  Returns row -> column indices.
    """
    n, m = cost.shape
    if n > m:
        raise ContractError("assignment solver needs rows <= cols")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # column -> 1-based row, 0 free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j] > 0:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def pair_cost_matrix(prediction, targets, weights, f_l):
    """[targets x queries] matching costs (plain numpy, no tape)."""
    logits = prediction.mask_logits.data
    obj = prediction.objectness.data
    f_m = prediction.mask_features.data
    f_l = np.asarray(f_l.data if isinstance(f_l, T.Tensor) else f_l)
    n_t = len(targets)
    n_q = logits.shape[0]
    cost = np.zeros((n_t, n_q))
    obj_pos = _bce_np(obj, 1.0)
    sims = _cosine_rows_np(f_m, f_l)
    for ti, seg in enumerate(targets):
        if seg.mask.shape != logits.shape[1:]:
            raise DimensionError(
                f"target mask {seg.mask.shape} does not match prediction "
                f"grid {logits.shape[1:]}"
            )
        if seg.category >= f_l.shape[0]:
            raise ContractError(
                f"target category {seg.category} outside prompt of "
                f"{f_l.shape[0]} categories"
            )
        tmask = seg.mask.astype(np.float64)
        mask_term = _bce_np(logits, tmask[None]).mean(axis=(1, 2))
        con_term = 1.0 - sims[:, seg.category]
        cost[ti] = (weights.lambda_mask * mask_term
                    + weights.lambda_obj * obj_pos
                    + weights.lambda_con * con_term)
    return cost


def hungarian_match(prediction, targets, weights, f_l):
    """Minimum-cost injective assignment of targets to queries.

    prediction: any object exposing mask_logits [Q x h x w], objectness
    [Q], and mask_features [Q x d] (one decoder layer's output).  With
    more targets than queries, the cheapest min(Q, #targets) pairs win.
    """
    n_q = prediction.mask_logits.shape[0]
    if n_q < 1:
        raise ContractError("need at least one query to match")
    validate_targets([t for t in targets])
    if not targets:
        return MatchResult([], [])
    cost = pair_cost_matrix(prediction, targets, weights, f_l)
    if not np.isfinite(cost).all():
        raise NumericError("matching costs contain non-finite values")
    n_t = len(targets)
    if n_t <= n_q:
        cols = _lap_solve(cost)
        pairs = [(t, int(cols[t])) for t in range(n_t)]
    else:
        rows = _lap_solve(cost.T)
        pairs = sorted((int(rows[q]), q) for q in range(n_q))
    return MatchResult(pairs, [cost[t, q] for t, q in pairs])


def mask_and_objectness_loss(seg, targets, matches):
    """Mask BCE over matched pairs and objectness BCE over all queries.

    Both terms are per-image averages (over matched masks' pixels and
    over queries respectively), summed across the decoder layers; one
    MatchResult per layer.  Returns (mask_term, objectness_term) on the
    active tape.
    """
    if len(matches) != len(seg.layers):
        raise ContractError(
            f"{len(seg.layers)} layers but {len(matches)} match results"
        )
    l_mask = None
    l_obj = None
    for layer, match in zip(seg.layers, matches):
        n_q = layer.objectness.shape[0]
        obj_target = np.zeros(n_q)
        if match.pairs:
            obj_target[match.matched_queries] = 1.0
            picked = T.take_rows(layer.mask_logits, match.matched_queries)
            stacked = np.stack(
                [targets[t].mask.astype(np.float64) for t in
                 match.matched_targets]
            )
            term = T.mean(T.bce_with_logits(picked, stacked))
            l_mask = term if l_mask is None else T.add(l_mask, term)
        obj = T.mean(T.bce_with_logits(layer.objectness, obj_target))
        l_obj = obj if l_obj is None else T.add(l_obj, obj)
    if l_mask is None:
        l_mask = T.zeros(())
    return l_mask, l_obj


def _normalize_rows(x, eps=1e-12):
    sq = T.sum_(T.mul(x, x), axis=1, keepdims=True)
    inv = T.power(T.add(sq, T.Tensor(np.full(sq.shape, eps))), -0.5)
    return T.mul(x, T.expand(inv, x.shape))


def contrastive_loss(f_m, categories, f_l, tau, pair_costs=None):
    """Symmetric InfoNCE between matched mask features and text features.

    f_m: [M x d] features of the matched queries; categories: the prompt
    category index for each row; f_l: [C x d] per-category text features.
    Row i is pushed toward its category over all C prompt categories, and
    each distinct matched category is pushed toward its best-matched
    query (lowest matching cost, then lowest row index) over the M rows.
    The two cross-entropies are averaged.  tau may be a float or a
    single-value Tensor.
    """
    categories = [int(c) for c in categories]
    m = f_m.shape[0]
    if m == 0:
        return T.zeros(())
    if len(categories) != m:
        raise DimensionError(
            f"{m} feature rows but {len(categories)} category indices"
        )
    n_c = f_l.shape[0]
    if any(c < 0 or c >= n_c for c in categories):
        raise ContractError("category index outside the prompt")
    sims = T.matmul(_normalize_rows(f_m), T.transpose(_normalize_rows(f_l),
                                                      (1, 0)))
    if isinstance(tau, T.Tensor):
        inv = T.power(T.reshape(tau, (1, 1)), -1.0)
        logits = T.mul(sims, T.expand(inv, sims.shape))
    else:
        logits = T.scale(sims, 1.0 / float(tau))

    one_hot = np.zeros((m, n_c))
    one_hot[np.arange(m), categories] = 1.0
    row_lp = T.log_softmax(logits, axis=1)
    dir_query = T.scale(T.sum_(T.mul(row_lp, one_hot)), -1.0 / m)

    costs = (list(pair_costs) if pair_costs is not None
             else [0.0] * m)
    if len(costs) != m:
        raise DimensionError("one pair cost per feature row required")
    best_row = {}
    for i, c in enumerate(categories):
        if c not in best_row or costs[i] < costs[best_row[c]]:
            best_row[c] = i
    col_target = np.zeros((m, n_c))
    for c, i in best_row.items():
        col_target[i, c] = 1.0
    col_lp = T.log_softmax(logits, axis=0)
    dir_cat = T.scale(T.sum_(T.mul(col_lp, col_target)), -1.0 / len(best_row))

    return T.scale(T.add(dir_query, dir_cat), 0.5)


class LossBreakdown:
    """Per-term losses for one image, with the per-layer matches used."""

    def __init__(self, total, l_mask, l_obj, l_con, matches):
        self.total = total
        self.l_mask = l_mask
        self.l_obj = l_obj
        self.l_con = l_con
        self.matches = matches


def compute_losses(output, targets, weights, matches=None):
    """Match every decoder layer and assemble the weighted total loss.

    output: the model's forward result (segmentation + text features);
    targets: GroundTruthSegments; matches: optional precomputed per-layer
    MatchResults (kept fixed during finite-difference probes, since the
    assignment is piecewise constant and must not flip mid-difference).
    """
    seg = output.seg
    f_l = output.f_l
    if matches is None:
        matches = [hungarian_match(layer, targets, weights, f_l)
                   for layer in seg.layers]
    l_mask, l_obj = mask_and_objectness_loss(seg, targets, matches)
    l_con = None
    for layer, match in zip(seg.layers, matches):
        if not match.pairs:
            continue
        f_m = T.take_rows(layer.mask_features, match.matched_queries)
        cats = [targets[t].category for t in match.matched_targets]
        term = contrastive_loss(f_m, cats, f_l, weights.temperature,
                                pair_costs=match.costs)
        l_con = term if l_con is None else T.add(l_con, term)
    if l_con is None:
        l_con = T.zeros(())
    total = T.add(
        T.add(T.scale(l_mask, weights.lambda_mask),
              T.scale(l_obj, weights.lambda_obj)),
        T.scale(l_con, weights.lambda_con),
    )
    return LossBreakdown(total, l_mask, l_obj, l_con, matches)


def lion_step(params, grads, state, lr, beta1=0.9, beta2=0.99,
              weight_decay=0.0):
    """One Lion update over named parameters, in place.

    update = sign(beta1 * m + (1 - beta1) * g); the parameter moves by
    -lr * (update + weight_decay * theta) and the momentum becomes
    beta2 * m + (1 - beta2) * g.  Missing gradients count as zero.
    """
    for name, p in params:
        m = state.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state[name] = m
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise DimensionError(
                f"gradient/state shape mismatch for {name}"
            )
        update = np.sign(beta1 * m + (1.0 - beta1) * g)
        p.data -= lr * (update + weight_decay * p.data)
        m *= beta2
        m += (1.0 - beta2) * g
    return state


def lr_schedule(step, base_lr, warmup, total):
    """Linear ramp 0 -> base over the warmup, then linear decay to 0."""
    if step <= 0 or step > total:
        return 0.0
    if warmup > 0 and step <= warmup:
        return base_lr * (step / warmup)
    remaining = total - warmup
    if remaining <= 0:
        return 0.0
    return base_lr * (1.0 - (step - warmup) / remaining)


class TrainSample:
    """One training example: image, its target segments, and the prompt."""

    def __init__(self, image, segments, categories):
        self.image = np.asarray(image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(
                f"image must be [3 x H x W], got {self.image.shape}"
            )
        self.segments = list(segments)
        self.categories = list(categories)
        validate_targets(self.segments)
        for seg in self.segments:
            if seg.category >= len(self.categories):
                raise ContractError(
                    "segment category index outside the sample's prompt"
                )


class TrainResult:
    """What a training run produced: the log and where it ran to."""

    def __init__(self, log_lines, steps, checkpoint_dir=None):
        self.log_lines = log_lines
        self.steps = steps
        self.checkpoint_dir = checkpoint_dir


def _format_log(step, lr, l_mask, l_obj, l_con, total):
    return (f"{step}, {lr:.10e}, {l_mask:.10e}, {l_obj:.10e}, "
            f"{l_con:.10e}, {total:.10e}")


def _worker_count():
    raw = os.environ.get("OMTSEG_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OMTSEG_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def train(dataset, model, cfg, out_dir=None, eval_fn=None, log_stream=None):
    """Run the optimization loop; deterministic given the config seed.

    Every step samples a batch, runs forward/backward per element on its
    own tape (across OMTSEG_THREADS workers when set), reduces gradients
    in sample order, and applies one Lion step under the warmup/decay
    schedule.  Log records are "step, lr, L_mask, L_obj, L_con, total".
    Checkpoints are written under out_dir every train.eval_every steps
    and at the end; eval_fn(model, step), when given, is invoked on the
    same cadence and its text is appended as a comment line.  A
    non-finite loss aborts with the step and per-term values.
    """
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    weights = LossWeights.from_config(cfg)
    total_steps = cfg["optim.total_steps"]
    batch_size = cfg["optim.batch_size"]
    base_lr = cfg["optim.lr"]
    warmup = cfg["optim.warmup"]
    log_every = cfg["train.log_every"]
    eval_every = cfg["train.eval_every"]
    rng = np.random.default_rng(cfg["seed"])
    params = model.trainable_parameters()
    state = {name: np.zeros_like(p.data) for name, p in params}
    workers = _worker_count()

    prompts = {}

    def sequence_for(sample_idx):
        if sample_idx not in prompts:
            prompt = format_prompt(dataset[sample_idx].categories)
            prompts[sample_idx] = tokenize(prompt, model.vocab)
        return prompts[sample_idx]

    def run_sample(sample_idx):
        sample = dataset[sample_idx]
        seq = sequence_for(sample_idx)
        with T.Tape() as tape:
            out = model(T.Tensor(sample.image), seq)
            losses = compute_losses(out, sample.segments, weights)
            grads = tape.backward(losses.total)
        grad_map = {}
        for name, p in params:
            g = grads.get(p)
            if g is not None:
                grad_map[name] = g
        return (grad_map, float(losses.l_mask.data),
                float(losses.l_obj.data), float(losses.l_con.data),
                float(losses.total.data))

    log_lines = []

    def emit(line):
        log_lines.append(line)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    def save(step):
        if out_dir is None:
            return None
        ckpt = os.path.join(out_dir, "checkpoint")
        save_checkpoint(ckpt, model.named_parameters())
        if eval_fn is not None:
            emit(f"# eval step {step}: {eval_fn(model, step)}")
        return ckpt

    ckpt_dir = None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(1, total_steps + 1):
            idx = rng.integers(0, len(dataset), size=batch_size)
            try:
                if pool is not None:
                    results = list(pool.map(run_sample, idx))
                else:
                    results = [run_sample(i) for i in idx]
            except NumericError as exc:
                raise NumericError(
                    f"aborted at step {step}: {exc}"
                ) from exc

            terms = np.array([r[1:] for r in results])
            mean_terms = terms.mean(axis=0)
            if not np.isfinite(mean_terms).all():
                raise NumericError(
                    f"non-finite loss at step {step}: "
                    f"L_mask={mean_terms[0]!r}, L_obj={mean_terms[1]!r}, "
                    f"L_con={mean_terms[2]!r}, total={mean_terms[3]!r}"
                )

            reduced = {}
            for grad_map, *_ in results:
                for name, g in grad_map.items():
                    if name in reduced:
                        reduced[name] += g
                    else:
                        reduced[name] = g.copy()
            for name in reduced:
                reduced[name] /= batch_size

            lr = lr_schedule(step, base_lr, warmup, total_steps)
            lion_step(params, reduced, state, lr,
                      beta1=cfg["optim.beta1"], beta2=cfg["optim.beta2"],
                      weight_decay=cfg["optim.weight_decay"])

            if step % log_every == 0 or step == total_steps:
                emit(_format_log(step, lr, *mean_terms))
            if eval_every > 0 and step % eval_every == 0:
                ckpt_dir = save(step) or ckpt_dir
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    if total_steps > 0:
        ckpt_dir = save(total_steps) or ckpt_dir
    return TrainResult(log_lines, total_steps, ckpt_dir)
