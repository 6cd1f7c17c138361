"""Synthetic dataset generation and the on-disk panoptic format.

Images are colored geometric shapes ("red circle", "blue triangle") over a
textured background ("stripes", "checker").  The category universe is split
into seen and unseen combinations: unseen categories pair colors and shapes
that each appear in training, but never together, which is what makes an
open-vocabulary prompt at inference time meaningful.

A dataset directory holds ``images/NNNN.png``, ``panoptic/NNNN.png``,
``manifest.txt``, and ``categories.txt``.  Panoptic PNGs encode segment id
``R + 256*G + 65536*B`` per pixel (0 = void); the manifest lists every
image and segment (id, category, thing|stuff, area) and must agree exactly
with the pixels.  PNG encoding needs Pillow; an uncompressed binary PPM
fallback covers environments without it.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    from PIL import Image as _PILImage
except ImportError:  # pragma: no cover - exercised only without Pillow
    _PILImage = None

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .inference import PanopticMap
from .training import GroundTruthSegment, TrainSample, _worker_count

COLOR_VALUES = {
    "red": (0.85, 0.15, 0.15),
    "blue": (0.20, 0.35, 0.85),
    "green": (0.15, 0.70, 0.25),
    "yellow": (0.90, 0.85, 0.20),
}
SHAPE_NAMES = ("circle", "square", "triangle")
TEXTURES = {
    "stripes": ((0.58, 0.58, 0.64), (0.40, 0.40, 0.48)),
    "checker": ((0.62, 0.55, 0.44), (0.44, 0.39, 0.31)),
}


class Universe:
    """Category universe: seen things, stuff, and withheld thing combos.

    Thing names are "<color> <shape>" pairs; every color and shape of an
    unseen combination must occur in some seen combination, so unseen
    categories are genuinely compositional rather than new words.
    """

    def __init__(self, seen_things, stuff, unseen_things=()):
        for name in list(seen_things) + list(unseen_things):
            color, _, shape = name.partition(" ")
            if color not in COLOR_VALUES or shape not in SHAPE_NAMES:
                raise ConfigError(
                    f"thing category {name!r} is not '<color> <shape>' over "
                    f"{sorted(COLOR_VALUES)} x {list(SHAPE_NAMES)}"
                )
        for name in stuff:
            if name not in TEXTURES:
                raise ConfigError(
                    f"stuff category {name!r} has no texture; "
                    f"choose from {sorted(TEXTURES)}"
                )
        if not seen_things or not stuff:
            raise ConfigError("universe needs seen things and stuff")
        seen_words = set()
        for name in seen_things:
            seen_words.update(name.split())
        for name in unseen_things:
            for word in name.split():
                if word not in seen_words:
                    raise ConfigError(
                        f"unseen category {name!r} uses word {word!r} that "
                        "appears in no seen category"
                    )
        self.names = list(seen_things) + list(stuff) + list(unseen_things)
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate category names in the universe")
        self.thing_flags = (
            [True] * len(seen_things)
            + [False] * len(stuff)
            + [True] * len(unseen_things)
        )
        self.seen_count = len(seen_things) + len(stuff)

    @property
    def seen_ids(self):
        return list(range(self.seen_count))

    @property
    def unseen_ids(self):
        return list(range(self.seen_count, len(self.names)))

    @property
    def stuff_ids(self):
        return [i for i, t in enumerate(self.thing_flags) if not t]

    def words(self):
        out = []
        for name in self.names:
            for w in name.split():
                if w not in out:
                    out.append(w)
        return out


def default_universe():
    """12 categories: 6 seen things + 2 stuff + 4 withheld combinations."""
    return Universe(
        seen_things=[
            "red circle", "blue square", "green triangle",
            "yellow circle", "red square", "blue triangle",
        ],
        stuff=["stripes", "checker"],
        unseen_things=[
            "blue circle", "green circle", "red triangle", "yellow square",
        ],
    )


class Sample:
    """One dataset element: image in [0,1], ground truth, category names."""

    def __init__(self, image, panoptic, categories):
        self.image = np.asarray(image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DimensionError(
                f"image must be [3 x H x W], got {self.image.shape}"
            )
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ContractError("image values must lie in [0, 1]")
        self.panoptic = panoptic
        self.categories = list(categories)
        if self.image.shape[1:] != panoptic.shape:
            raise DimensionError(
                f"image grid {self.image.shape[1:]} != ground truth grid "
                f"{panoptic.shape}"
            )
        if len(panoptic.thing_flags) != len(self.categories):
            raise ContractError(
                "ground truth flag list disagrees with the category list"
            )


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

def _texture(name, h, w):
    shade_a, shade_b = TEXTURES[name]
    ys, xs = np.mgrid[0:h, 0:w]
    if name == "stripes":
        sel = ((ys + xs) // 4) % 2 == 0
    else:
        sel = (((ys // 4) % 2) ^ ((xs // 4) % 2)) == 0
    canvas = np.where(sel[..., None], shade_a, shade_b)
    return canvas.astype(np.float64)


def _shape_mask(shape, h, w, cy, cx, r):
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        side = max(1, int(round(0.8 * r)))
        return (np.abs(dy) <= side) & (np.abs(dx) <= side)
    # upward-pointing isoceles triangle
    return (dy >= -r) & (dy <= r) & (np.abs(dx) * 2 <= dy + r)


def _render_sample(rng, universe, split, size, max_things):
    if split == "seen":
        pool = [i for i in universe.seen_ids if universe.thing_flags[i]]
    else:
        pool = universe.unseen_ids
    stuff_id = int(rng.choice(universe.stuff_ids))
    stuff_name = universe.names[stuff_id]
    canvas = _texture(stuff_name, size, size)

    instance = np.ones((size, size), dtype=np.int64)
    category = np.full((size, size), stuff_id, dtype=np.int64)
    next_id = 2
    occupied = np.zeros((size, size), dtype=bool)

    n_things = int(rng.integers(1, max_things + 1))
    for _ in range(n_things):
        cat = int(rng.choice(pool))
        color_name, _, shape = universe.names[cat].partition(" ")
        color = COLOR_VALUES[color_name]
        for _attempt in range(8):
            r = int(rng.integers(max(3, size // 10), max(4, size // 4)))
            cy = int(rng.integers(r, size - r)) if size > 2 * r else size // 2
            cx = int(rng.integers(r, size - r)) if size > 2 * r else size // 2
            mask = _shape_mask(shape, size, size, cy, cx, r)
            if mask.sum() >= 8 and not (mask & occupied).any():
                canvas[mask] = color
                instance[mask] = next_id
                category[mask] = cat
                occupied |= mask
                next_id += 1
                break

    canvas = canvas + rng.uniform(-0.02, 0.02, size=canvas.shape)
    quantized = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    image = quantized.astype(np.float64).transpose(2, 0, 1) / 255.0
    pan = PanopticMap(category, instance, universe.thing_flags)
    return Sample(image, pan, universe.names)


def generate_synthetic(out_dir, count, seed=0, universe=None, split="seen",
                       image_size=64, fmt=None, max_things=3):
    """Render ``count`` images and write a dataset directory.

    ``split="unseen"`` draws things only from the withheld combinations.
    Rendering is deterministic for a given seed regardless of worker count:
    each image gets an independent child generator, spawned in order.
    """
    if universe is None:
        universe = default_universe()
    if split not in ("seen", "unseen"):
        raise ConfigError(f"split must be 'seen' or 'unseen', got {split!r}")
    if split == "unseen" and not universe.unseen_ids:
        raise ConfigError(
            "unseen split requested but the universe withholds no categories"
        )
    if count < 0:
        raise ConfigError("count must be non-negative")
    if image_size < 16:
        raise ConfigError("image_size must be at least 16")

    children = np.random.SeedSequence(seed).spawn(max(count, 1))

    def render(i):
        return _render_sample(
            np.random.default_rng(children[i]), universe, split,
            image_size, max_things,
        )

    workers = _worker_count()
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(render, range(count)))
    else:
        samples = [render(i) for i in range(count)]

    write_panoptic(out_dir, samples, categories=universe.names,
                   thing_flags=universe.thing_flags, fmt=fmt,
                   image_size=image_size)
    return out_dir


# ---------------------------------------------------------------------------
# image files: PNG via Pillow, binary PPM fallback
# ---------------------------------------------------------------------------

def _default_format():
    return "png" if _PILImage is not None else "ppm"


def write_image(path, rgb):
    """Write an [H x W x 3] uint8 array; format chosen by extension."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if path.endswith(".png"):
        if _PILImage is None:
            raise ConfigError("PNG output requires Pillow; use fmt='ppm'")
        _PILImage.fromarray(rgb, mode="RGB").save(path)
    elif path.endswith(".ppm"):
        h, w, _ = rgb.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(rgb.tobytes())
    else:
        raise ConfigError(f"unsupported image extension in {path!r}")


def read_image(path):
    """Read a PNG or binary PPM back into an [H x W x 3] uint8 array."""
    if path.endswith(".png"):
        if _PILImage is None:
            raise ConfigError("PNG input requires Pillow")
        with _PILImage.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    if not path.endswith(".ppm"):
        raise ConfigError(f"unsupported image extension in {path!r}")
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ParseError("expected a binary P6 PPM with maxval 255",
                         path=path, line=1)
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace byte after the header
    pixels = np.frombuffer(data[pos : pos + 3 * h * w], dtype=np.uint8)
    if pixels.size != 3 * h * w:
        raise ParseError("truncated pixel data", path=path, line=1)
    return pixels.reshape(h, w, 3).copy()


def encode_segment_ids(ids):
    """Segment-id map -> RGB, pixel id = R + 256*G + 65536*B."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= 256 ** 3:
        raise ContractError("segment ids must fit in 24 bits")
    rgb = np.empty(ids.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = ids % 256
    rgb[..., 1] = (ids // 256) % 256
    rgb[..., 2] = ids // 65536
    return rgb


def decode_segment_ids(rgb):
    rgb = np.asarray(rgb, dtype=np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

class Dataset:
    """Samples read from a directory plus the shared category universe."""

    def __init__(self, samples, categories, thing_flags, directory=None):
        self.samples = list(samples)
        self.categories = list(categories)
        self.thing_flags = list(thing_flags)
        self.directory = directory

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def write_panoptic(directory, samples, categories=None, thing_flags=None,
                   fmt=None, image_size=None):
    """Write samples as a dataset directory; write∘read is the identity.

    ``categories``/``thing_flags`` default to the first sample's universe
    and must be passed explicitly for an empty dataset.
    """
    samples = list(samples)
    if categories is None:
        if not samples:
            raise ContractError(
                "an empty dataset needs an explicit category list"
            )
        categories = samples[0].categories
        thing_flags = samples[0].panoptic.thing_flags
    if thing_flags is None or len(thing_flags) != len(categories):
        raise ContractError("one thing/stuff flag per category is required")
    fmt = fmt or _default_format()
    if fmt not in ("png", "ppm"):
        raise ConfigError(f"image format must be png or ppm, got {fmt!r}")

    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "panoptic"), exist_ok=True)

    cat_lines = []
    for name, flag in zip(categories, thing_flags):
        cat_lines.append(f"{name}\t{'thing' if flag else 'stuff'}")
    with open(os.path.join(directory, "categories.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(cat_lines) + "\n")

    if samples:
        h, w = samples[0].panoptic.shape
    else:
        h = w = image_size or 0
    lines = [f"format {fmt}", f"size {h} {w}"]
    for i, sample in enumerate(samples):
        if sample.categories != list(categories):
            raise ContractError("all samples must share one category list")
        if sample.panoptic.shape != (h, w):
            raise ContractError("all samples must share one image size")
        name = f"{i:04d}"
        img_rel = f"images/{name}.{fmt}"
        pan_rel = f"panoptic/{name}.{fmt}"
        rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        write_image(os.path.join(directory, img_rel),
                    rgb.transpose(1, 2, 0))
        write_image(os.path.join(directory, pan_rel),
                    encode_segment_ids(sample.panoptic.instance))
        lines.append(f"image {name} {img_rel} {pan_rel}")
        for seg_id, cat, area in sample.panoptic.segments():
            kind = "thing" if thing_flags[cat] else "stuff"
            lines.append(f"segment {name} {seg_id} {cat} {kind} {area}")
    with open(os.path.join(directory, "manifest.txt"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return directory


def _read_categories(path):
    names = []
    flags = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("thing", "stuff"):
                raise ParseError(
                    "expected 'name<TAB>thing|stuff'", path=path, line=lineno
                )
            if parts[0] in names:
                raise ParseError(f"duplicate category {parts[0]!r}",
                                 path=path, line=lineno)
            names.append(parts[0])
            flags.append(parts[1] == "thing")
    if not names:
        raise ParseError("no categories declared", path=path, line=1)
    return names, flags


def read_panoptic(directory):
    """Read a dataset directory back into Samples, verifying every claim.

    The manifest's segment ids must be exactly the non-void ids present in
    the panoptic image, areas must match pixel counts, and the rebuilt
    ground truth must satisfy the panoptic invariants; any disagreement is
    a parse error naming the offending file and line.
    """
    cat_path = os.path.join(directory, "categories.txt")
    man_path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(cat_path):
        raise ParseError("missing categories.txt", path=cat_path, line=0)
    if not os.path.exists(man_path):
        raise ParseError("missing manifest.txt", path=man_path, line=0)
    names, flags = _read_categories(cat_path)

    fmt = None
    size = None
    images = []          # (image id, img_rel, pan_rel, lineno)
    segments = {}        # image id -> {seg id: (cat, kind, area, lineno)}
    with open(man_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "format":
                if len(parts) != 2 or parts[1] not in ("png", "ppm"):
                    raise ParseError("format must be png or ppm",
                                     path=man_path, line=lineno)
                fmt = parts[1]
            elif kind == "size":
                if len(parts) != 3:
                    raise ParseError("expected 'size H W'",
                                     path=man_path, line=lineno)
                try:
                    size = (int(parts[1]), int(parts[2]))
                except ValueError:
                    raise ParseError("size fields must be integers",
                                     path=man_path, line=lineno)
            elif kind == "image":
                if len(parts) != 4:
                    raise ParseError(
                        "expected 'image ID IMAGE-PATH PANOPTIC-PATH'",
                        path=man_path, line=lineno,
                    )
                if any(parts[1] == im[0] for im in images):
                    raise ParseError(f"duplicate image id {parts[1]!r}",
                                     path=man_path, line=lineno)
                images.append((parts[1], parts[2], parts[3], lineno))
                segments[parts[1]] = {}
            elif kind == "segment":
                if len(parts) != 6:
                    raise ParseError(
                        "expected 'segment IMAGE-ID SEG-ID CAT KIND AREA'",
                        path=man_path, line=lineno,
                    )
                img_id, seg_raw, cat_raw, seg_kind, area_raw = parts[1:]
                if img_id not in segments:
                    raise ParseError(
                        f"segment references undeclared image {img_id!r}",
                        path=man_path, line=lineno,
                    )
                try:
                    seg_id, cat, area = int(seg_raw), int(cat_raw), int(area_raw)
                except ValueError:
                    raise ParseError("segment fields must be integers",
                                     path=man_path, line=lineno)
                if seg_id <= 0:
                    raise ParseError("segment id 0 is reserved for void",
                                     path=man_path, line=lineno)
                if not 0 <= cat < len(names):
                    raise ParseError(f"category index {cat} out of range",
                                     path=man_path, line=lineno)
                if seg_kind not in ("thing", "stuff"):
                    raise ParseError("segment kind must be thing or stuff",
                                     path=man_path, line=lineno)
                if (seg_kind == "thing") != flags[cat]:
                    raise ParseError(
                        f"segment kind {seg_kind!r} contradicts "
                        f"categories.txt for {names[cat]!r}",
                        path=man_path, line=lineno,
                    )
                if seg_id in segments[img_id]:
                    raise ParseError(f"duplicate segment id {seg_id}",
                                     path=man_path, line=lineno)
                segments[img_id][seg_id] = (cat, seg_kind, area, lineno)
            else:
                raise ParseError(f"unknown record {kind!r}",
                                 path=man_path, line=lineno)
    if fmt is None:
        raise ParseError("manifest declares no format", path=man_path, line=1)

    samples = []
    for img_id, img_rel, pan_rel, decl_line in images:
        img_path = os.path.join(directory, img_rel)
        pan_path = os.path.join(directory, pan_rel)
        for p in (img_path, pan_path):
            if not os.path.exists(p):
                raise ParseError(f"missing file {p}", path=man_path,
                                 line=decl_line)
        rgb = read_image(img_path)
        ids = decode_segment_ids(read_image(pan_path))
        if size is not None and ids.shape != size:
            raise ParseError(
                f"panoptic grid {ids.shape} != declared size {size}",
                path=pan_path, line=0,
            )
        declared = segments[img_id]
        present = {int(v) for v in np.unique(ids) if v != 0}
        if present != set(declared):
            raise ParseError(
                f"manifest ids {sorted(declared)} != pixel ids "
                f"{sorted(present)} in {pan_rel}",
                path=man_path, line=decl_line,
            )
        category = np.full(ids.shape, PanopticMap.VOID_CATEGORY,
                           dtype=np.int64)
        for seg_id, (cat, _kind, area, seg_line) in declared.items():
            sel = ids == seg_id
            if int(sel.sum()) != area:
                raise ParseError(
                    f"segment {seg_id} area {int(sel.sum())} != declared "
                    f"{area}",
                    path=man_path, line=seg_line,
                )
            category[sel] = cat
        try:
            pan = PanopticMap(category, ids, flags)
        except ContractError as exc:
            raise ParseError(str(exc), path=pan_path, line=0)
        image = rgb.astype(np.float64).transpose(2, 0, 1) / 255.0
        samples.append(Sample(image, pan, names))
    return Dataset(samples, names, flags, directory=directory)


# ---------------------------------------------------------------------------
# training-set preparation
# ---------------------------------------------------------------------------

def majority_downsample(instance_map, stride):
    """Per-block majority vote over segment ids; void competes like any
    other id and ties go to the lowest id."""
    ids = np.asarray(instance_map)
    h, w = ids.shape
    if h % stride or w % stride:
        raise DimensionError(
            f"grid {ids.shape} is not divisible by stride {stride}"
        )
    values = np.unique(ids)
    counts = np.stack([
        (ids == v).reshape(h // stride, stride, w // stride, stride)
        .sum(axis=(1, 3))
        for v in values
    ])
    return values[np.argmax(counts, axis=0)]


def to_train_samples(dataset, category_names=None, stride=4):
    """Convert read samples into training samples with stride-4 targets.

    The prompt defaults to the categories that actually occur in the
    dataset, in universe order.  Segment masks are downsampled by block
    majority vote; segments that lose every block are dropped.
    Returns (samples, prompt names, prompt thing flags).
    """
    present = sorted({
        cat for s in dataset.samples for _, cat, _ in s.panoptic.segments()
    })
    if category_names is None:
        prompt = [dataset.categories[c] for c in present]
    else:
        prompt = list(category_names)
    index_of = {name: i for i, name in enumerate(prompt)}
    for c in present:
        if dataset.categories[c] not in index_of:
            raise ContractError(
                f"dataset category {dataset.categories[c]!r} missing from "
                "the training prompt"
            )
    prompt_flags = []
    universe_index = {name: i for i, name in enumerate(dataset.categories)}
    for name in prompt:
        if name not in universe_index:
            raise ContractError(f"prompt category {name!r} not in universe")
        prompt_flags.append(dataset.thing_flags[universe_index[name]])

    out = []
    for sample in dataset.samples:
        grid = majority_downsample(sample.panoptic.instance, stride)
        segs = []
        for seg_id, cat, _area in sample.panoptic.segments():
            mask = grid == seg_id
            if not mask.any():
                continue
            segs.append(GroundTruthSegment(
                mask, index_of[dataset.categories[cat]],
                is_thing=dataset.thing_flags[cat],
            ))
        out.append(TrainSample(sample.image, segs, prompt))
    return out, prompt, prompt_flags


def load_training_set(directory, category_names=None, stride=4):
    """Read a dataset directory and prepare it for the training loop."""
    return to_train_samples(read_panoptic(directory),
                            category_names=category_names, stride=stride)
