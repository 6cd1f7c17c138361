"""Segmentation head: mask-guided query decoding over visual and text tokens.

Learned object queries repeatedly (1) cross-attend to the flattened feature
pyramid restricted to their own previous mask, (2) cross-attend to the
per-category linguistic features, (3) self-attend, and (4) pass through a
feed-forward block — all as pre-norm residual steps.  After every layer a
shared output norm feeds three small heads: mask features (dotted against a
stride-4 pixel embedding map to rasterize mask logits) and an objectness
logit per query.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
)

MASK_ATTN_THRESHOLD = 0.5


class LayerPrediction:
    """One decoder layer's outputs, aligned on the query index."""

    def __init__(self, mask_logits, mask_features, objectness):
        self.mask_logits = mask_logits      # [Q, H/4, W/4]
        self.mask_features = mask_features  # [Q, d]
        self.objectness = objectness        # [Q]


class SegmentationOutput:
    """Final prediction plus the per-layer auxiliaries for deep supervision."""

    def __init__(self, layers):
        if not layers:
            raise ContractError("head produced no layers")
        self.layers = layers
        final = layers[-1]
        self.mask_logits = final.mask_logits
        self.mask_features = final.mask_features
        self.objectness = final.objectness


class PixelDecoder(Module):
    """Top-down fusion of the pyramid into a stride-4 pixel embedding map."""

    def __init__(self, model_dim, rng):
        self.lateral8 = Linear(model_dim, model_dim, rng)
        self.lateral16 = Linear(model_dim, model_dim, rng)
        self.lateral32 = Linear(model_dim, model_dim, rng)
        fan = model_dim * 9
        self.out_kernel = T.Tensor(
            rng.standard_normal((model_dim, model_dim, 3, 3)) / np.sqrt(fan),
            requires_grad=True,
        )
        self.out_bias = T.Tensor(np.zeros(model_dim), requires_grad=True)

    def _lateral(self, lin, feature_map):
        d, h, w = feature_map.shape
        rows = T.transpose(T.reshape(feature_map, (d, h * w)), (1, 0))
        mixed = lin(rows)
        return T.reshape(T.transpose(mixed, (1, 0)), (d, h, w))

    def __call__(self, pyramid):
        for s in (8, 16, 32):
            pyramid.level(s)  # raises ContractError when absent
        p32 = self._lateral(self.lateral32, pyramid.level(32))
        p16 = self._lateral(self.lateral16, pyramid.level(16))
        p8 = self._lateral(self.lateral8, pyramid.level(8))
        _, h16, w16 = p16.shape
        p16 = T.add(p16, T.bilinear_resize(p32, h16, w16))
        _, h8, w8 = p8.shape
        p8 = T.add(p8, T.bilinear_resize(p16, h8, w8))
        up4 = T.bilinear_resize(p8, 2 * h8, 2 * w8)
        out = T.conv2d(up4, self.out_kernel, stride=1, padding=1)
        b = T.reshape(self.out_bias, (out.shape[0], 1, 1))
        return T.add(out, T.expand(b, out.shape))


def mask_to_attention(prev_mask_logits, pyramid):
    """Boolean [Q x tokens] attention mask from previous mask logits.

    Mask probabilities are resampled to each pyramid level's grid and
    thresholded; a query whose mask admits no token at all falls back to
    full attention over every token.
    """
    q = prev_mask_logits.shape[0]
    probs = 1.0 / (1.0 + np.exp(-prev_mask_logits))
    pieces = []
    for _s, m in pyramid.maps:
        _d, h, w = m.shape
        level = np.empty((q, h * w), dtype=bool)
        for k in range(q):
            resized = T.resize_plane(probs[k], h, w)
            level[k] = (resized > MASK_ATTN_THRESHOLD).reshape(-1)
        pieces.append(level)
    mask = np.concatenate(pieces, axis=1)
    empty = ~mask.any(axis=1)
    mask[empty, :] = True
    return mask


class DecoderLayer(Module):
    """Masked visual cross-attention, text cross-attention, self-attention, FFN."""

    def __init__(self, model_dim, head_count, ffn_hidden, rng):
        cfg = AttentionConfig(model_dim, head_count)
        self.ln_visual = LayerNorm(model_dim)
        self.visual_attn = MultiHeadAttention(cfg, rng)
        self.ln_text = LayerNorm(model_dim)
        self.text_attn = MultiHeadAttention(cfg, rng)
        self.ln_self = LayerNorm(model_dim)
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.ln_ffn = LayerNorm(model_dim)
        self.ffn = FeedForward(model_dim, ffn_hidden, rng)

    def __call__(self, x, query_pos, visual_seq, f_l, attn_mask,
                 text_cross_attn=True, return_weights=False):
        q_in = T.add(self.ln_visual(x), query_pos)
        if return_weights:
            attended, weights = self.visual_attn(
                q_in, visual_seq, visual_seq, mask=attn_mask, return_weights=True
            )
        else:
            attended = self.visual_attn(q_in, visual_seq, visual_seq, mask=attn_mask)
            weights = None
        x = T.add(x, attended)
        if text_cross_attn and f_l is not None:
            x = T.add(x, self.text_attn(T.add(self.ln_text(x), query_pos), f_l, f_l))
        normed = self.ln_self(x)
        s_in = T.add(normed, query_pos)
        x = T.add(x, self.self_attn(s_in, s_in, normed))
        x = T.add(x, self.ffn(self.ln_ffn(x)))
        if return_weights:
            return x, weights
        return x


class SegmentationHead(Module):
    """Query set, decoder stack, and per-layer prediction heads."""

    def __init__(self, model_dim, head_count, ffn_hidden, n_queries, n_layers,
                 rng, text_cross_attn=True):
        self.n_queries = int(n_queries)
        self.n_layers = int(n_layers)
        self.text_cross_attn = bool(text_cross_attn)
        self.query_embed = T.Tensor(
            rng.standard_normal((n_queries, model_dim)) * 0.02, requires_grad=True
        )
        self.query_pos = T.Tensor(
            rng.standard_normal((n_queries, model_dim)) * 0.02, requires_grad=True
        )
        self.pixel_decoder = PixelDecoder(model_dim, rng)
        self.decoder_layers = [
            DecoderLayer(model_dim, head_count, ffn_hidden, rng)
            for _ in range(n_layers)
        ]
        self.ln_out = LayerNorm(model_dim)
        self.mask_head = Linear(model_dim, model_dim, rng)
        self.objectness_head = Linear(model_dim, 1, rng)

    def _predict(self, x, pixel_map):
        normed = self.ln_out(x)
        f_m = self.mask_head(normed)
        obj = T.reshape(self.objectness_head(normed), (self.n_queries,))
        d, h4, w4 = pixel_map.shape
        flat = T.reshape(pixel_map, (d, h4 * w4))
        logits = T.reshape(T.matmul(f_m, flat), (self.n_queries, h4, w4))
        return LayerPrediction(logits, f_m, obj)

    def __call__(self, pyramid, f_l):
        pixel_map = self.pixel_decoder(pyramid)
        visual_seq = pyramid.flatten()
        x = self.query_embed
        predictions = []
        prev_logits = None
        for layer in self.decoder_layers:
            attn_mask = (
                None if prev_logits is None
                else mask_to_attention(prev_logits, pyramid)
            )
            x = layer(
                x, self.query_pos, visual_seq, f_l, attn_mask,
                text_cross_attn=self.text_cross_attn,
            )
            pred = self._predict(x, pixel_map)
            predictions.append(pred)
            prev_logits = pred.mask_logits.data
        return SegmentationOutput(predictions)
