"""Visual adapter: spatial prior pyramid plus injector/extractor attention.

A small convolutional stem builds a stride-8/16/32 feature pyramid from the
raw image.  At scheduled encoder layers the injector adds pyramid context
into the backbone tokens (residual cross-attention) and the extractor
refines the pyramid from the freshly injected backbone state (cross-attention
plus a feed-forward, both residual).  The final pyramid feeds the
segmentation head.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
)

PYRAMID_STRIDES = (8, 16, 32)


class Conv2d(Module):
    """Convolution over [C,H,W] with bias, thin wrapper over the raw kernel op."""

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0):
        fan_in = c_in * k * k
        self.kernel = T.Tensor(
            rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(fan_in),
            requires_grad=True,
        )
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        y = T.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        b = T.reshape(self.bias, (y.shape[0], 1, 1))
        return T.add(y, T.expand(b, y.shape))


class FeaturePyramid:
    """Multi-scale maps [d x h x w] per stride, flattenable to one sequence.

    Flattening concatenates the levels coarsest-last in row-major token
    order; unflattening inverts it exactly (pure reshape/transpose).
    """

    def __init__(self, maps):
        self.maps = list(maps)  # (stride, Tensor[d, h, w]) pairs, in order
        if not self.maps:
            raise ContractError("feature pyramid needs at least one level")

    @property
    def strides(self):
        return tuple(s for s, _ in self.maps)

    def level(self, stride):
        for s, m in self.maps:
            if s == stride:
                return m
        raise ContractError(f"pyramid has no stride-{stride} level")

    def token_counts(self):
        return [m.shape[1] * m.shape[2] for _, m in self.maps]

    @property
    def total_tokens(self):
        return sum(self.token_counts())

    def flatten(self):
        """Concatenate all levels into a [total_tokens x d] sequence."""
        rows = []
        for _s, m in self.maps:
            d, h, w = m.shape
            rows.append(T.transpose(T.reshape(m, (d, h * w)), (1, 0)))
        return T.concat(rows, axis=0) if len(rows) > 1 else rows[0]

    def unflatten(self, tokens):
        """Rebuild a pyramid with this one's geometry from a flat sequence."""
        if tokens.shape[0] != self.total_tokens:
            raise DimensionError(
                f"expected {self.total_tokens} tokens, got {tokens.shape[0]}"
            )
        out = []
        offset = 0
        for (s, m), count in zip(self.maps, self.token_counts()):
            d, h, w = m.shape
            chunk = T.slice_axis(tokens, 0, offset, offset + count)
            out.append((s, T.reshape(T.transpose(chunk, (1, 0)), (d, h, w))))
            offset += count
        return FeaturePyramid(out)

    def scale_rows(self, table):
        """Per-token scale embedding: row i of ``table`` for level i's tokens."""
        ids = np.concatenate(
            [np.full(c, i, dtype=np.int64) for i, c in enumerate(self.token_counts())]
        )
        return T.take_rows(table, ids)


class SpatialPrior(Module):
    """Convolutional stem producing stride-8/16/32 maps projected to width d.

    Stem: stride-2 3x3 conv, two 3x3 convs, 2x2 max-pool (stride 4), then a
    stride-2 3x3 conv per extra octave; every level gets a 1x1 projection.
    """

    def __init__(self, model_dim, rng, stem_width=16):
        w = stem_width
        self.conv1 = Conv2d(3, w, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(w, w, 3, rng, stride=1, padding=1)
        self.conv3 = Conv2d(w, w, 3, rng, stride=1, padding=1)
        self.down8 = Conv2d(w, 2 * w, 3, rng, stride=2, padding=1)
        self.down16 = Conv2d(2 * w, 4 * w, 3, rng, stride=2, padding=1)
        self.down32 = Conv2d(4 * w, 4 * w, 3, rng, stride=2, padding=1)
        self.proj8 = Conv2d(2 * w, model_dim, 1, rng)
        self.proj16 = Conv2d(4 * w, model_dim, 1, rng)
        self.proj32 = Conv2d(4 * w, model_dim, 1, rng)

    def __call__(self, image):
        c, h, w = image.shape
        if h % 32 or w % 32:
            raise ConfigError(f"image {h}x{w} not divisible by 32")
        x = T.gelu(self.conv1(image))
        x = T.gelu(self.conv2(x))
        x = T.gelu(self.conv3(x))
        x = T.maxpool2d(x, 2, 2)
        s8 = T.gelu(self.down8(x))
        s16 = T.gelu(self.down16(s8))
        s32 = T.gelu(self.down32(s16))
        return FeaturePyramid([
            (8, self.proj8(s8)),
            (16, self.proj16(s16)),
            (32, self.proj32(s32)),
        ])


class SpatialInjector(Module):
    """Adds pyramid context into backbone tokens: F + CrossAttn(F, pyramid)."""

    def __init__(self, model_dim, head_count, rng):
        self.attn = MultiHeadAttention(AttentionConfig(model_dim, head_count), rng)

    def __call__(self, backbone_rows, pyramid, scale_embed):
        flat = pyramid.flatten()
        kv = T.add(flat, pyramid.scale_rows(scale_embed))
        return T.add(backbone_rows, self.attn(backbone_rows, kv, kv))


class MultiScaleExtractor(Module):
    """Refines the pyramid from backbone tokens: attention then FFN, residual."""

    def __init__(self, model_dim, head_count, ffn_hidden, rng):
        self.ln_q = LayerNorm(model_dim)
        self.ln_kv = LayerNorm(model_dim)
        self.attn = MultiHeadAttention(AttentionConfig(model_dim, head_count), rng)
        self.ln_ffn = LayerNorm(model_dim)
        self.ffn = FeedForward(model_dim, ffn_hidden, rng)

    def __call__(self, pyramid, backbone_rows, scale_embed):
        flat = pyramid.flatten()
        q = T.add(self.ln_q(flat), pyramid.scale_rows(scale_embed))
        kv = self.ln_kv(backbone_rows)
        refined = T.add(flat, self.attn(q, kv, kv))
        out = T.add(refined, self.ffn(self.ln_ffn(refined)))
        return pyramid.unflatten(out)


def default_schedule(n_layers, points=4):
    """Evenly spaced interaction layers ending at the last layer."""
    points = min(points, n_layers)
    return sorted({round(n_layers * (i + 1) / points) for i in range(points)})


class VisualAdapter(Module):
    """Spatial prior plus per-interaction injector/extractor blocks."""

    def __init__(self, model_dim, head_count, n_layers, ffn_hidden, rng,
                 schedule=None, stem_width=16):
        if schedule is None:
            schedule = default_schedule(n_layers)
        schedule = [int(i) for i in schedule]
        if any(i < 1 or i > n_layers for i in schedule):
            raise ConfigError(
                f"schedule {schedule} outside layer range 1..{n_layers}"
            )
        if any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError(f"schedule {schedule} must be strictly increasing")
        self.schedule = schedule
        self.spm = SpatialPrior(model_dim, rng, stem_width=stem_width)
        self.scale_embed = T.Tensor(
            rng.standard_normal((len(PYRAMID_STRIDES), model_dim)) * 0.02,
            requires_grad=True,
        )
        self.injectors = [
            SpatialInjector(model_dim, head_count, rng) for _ in schedule
        ]
        self.extractors = [
            MultiScaleExtractor(model_dim, head_count, ffn_hidden, rng)
            for _ in schedule
        ]

    def begin(self, image):
        """Start one forward pass: returns (encoder hook, pyramid getter).

        The hook fires at scheduled layers only: it injects the pyramid into
        the offered backbone rows, refines the pyramid from the injected
        rows, and hands the injected rows back to the encoder.
        """
        pyramid = self.spm(image)
        state = {"pyr": pyramid}
        slot = {layer: j for j, layer in enumerate(self.schedule)}

        def hook(layer_index, visual_rows):
            j = slot.get(layer_index)
            if j is None:
                return None
            injected = self.injectors[j](visual_rows, state["pyr"], self.scale_embed)
            state["pyr"] = self.extractors[j](
                state["pyr"], injected, self.scale_embed
            )
            return injected

        def pyramid_out():
            return state["pyr"]

        return hook, pyramid_out

    def zero_output_projections(self):
        """Zero every projection that writes into the backbone or pyramid.

        With these at zero the adapter is an exact identity: backbone rows
        and pyramid pass through unchanged.
        """
        for inj in self.injectors:
            inj.attn.w_out.zero_()
        for ext in self.extractors:
            ext.attn.w_out.zero_()
            ext.ffn.lin2.zero_()
