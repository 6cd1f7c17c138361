"""Fusion encoder: patch embedding plus N multiway transformer layers.

Vision and text tokens share one self-attention per layer, then split into
modality-specific feed-forward paths (visual rows through the V-FFN, text
rows through the L-FFN), each with its own residual + layer norm.  Per-layer
visual states are exposed so an adapter can inject and harvest features.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoidal_pe_2d,
)

MAX_TEXT_LEN = 128


class EncoderConfig:
    """Geometry of the fusion encoder."""

    def __init__(self, n_layers, model_dim, head_count, patch_size,
                 image_h, image_w, ffn_hidden):
        if n_layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {n_layers}")
        if image_h % patch_size or image_w % patch_size:
            raise ConfigError(
                f"image {image_h}x{image_w} not divisible by patch {patch_size}"
            )
        self.n_layers = int(n_layers)
        self.model_dim = int(model_dim)
        self.head_count = int(head_count)
        self.patch_size = int(patch_size)
        self.image_h = int(image_h)
        self.image_w = int(image_w)
        self.ffn_hidden = int(ffn_hidden)

    @property
    def grid_h(self):
        return self.image_h // self.patch_size

    @property
    def grid_w(self):
        return self.image_w // self.patch_size

    @property
    def n_patches(self):
        return self.grid_h * self.grid_w


class FusionState:
    """Concatenated token matrix plus the visual/text partition index."""

    def __init__(self, tokens, n_visual):
        self.tokens = tokens
        self.n_visual = int(n_visual)

    @property
    def visual(self):
        return T.slice_axis(self.tokens, 0, 0, self.n_visual)

    @property
    def textual(self):
        return T.slice_axis(self.tokens, 0, self.n_visual, self.tokens.shape[0])


class EncoderTrace:
    """Per-layer visual states plus the final visual and linguistic features."""

    def __init__(self, per_layer, f_v, f_l, text_tokens):
        self.per_layer = per_layer
        self.f_v = f_v
        self.f_l = f_l
        self.text_tokens = text_tokens


class PatchEmbed(Module):
    """Non-overlapping patch flattening followed by a linear projection."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        ps = cfg.patch_size
        self.proj = Linear(3 * ps * ps, cfg.model_dim, rng)

    def __call__(self, image):
        cfg = self.cfg
        c, h, w = image.shape
        if c != 3 or h != cfg.image_h or w != cfg.image_w:
            raise DimensionError(
                f"expected image 3x{cfg.image_h}x{cfg.image_w}, got {image.shape}"
            )
        ps = cfg.patch_size
        gh, gw = cfg.grid_h, cfg.grid_w
        x = T.reshape(image, (3, gh, ps, gw, ps))
        x = T.transpose(x, (1, 3, 0, 2, 4))  # grid-row, grid-col, c, py, px
        x = T.reshape(x, (gh * gw, 3 * ps * ps))
        return self.proj(x)


def modality_isolation_mask(n_visual, n_text):
    """Attention mask where each modality may only attend within itself."""
    n = n_visual + n_text
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_visual, :n_visual] = True
    mask[n_visual:, n_visual:] = True
    return mask


def diagonal_mask(n):
    """Self-only attention mask (each token sees exactly itself)."""
    return np.eye(n, dtype=bool)


def prompt_attention_mask(n_visual, blocks, separators=None, cross_modal=True,
                          summary_slots=None):
    """Attention mask that keeps each category block self-contained.

    Visual tokens attend everywhere within the visual span, and -- when
    ``cross_modal`` is set -- across to all text tokens.  A text token
    attends to its own category block plus the leading summary token
    (block id -1), and, when ``cross_modal`` is set, to all visual tokens.
    The summary token itself reads the full text span.

    ``summary_slots`` lists the per-category marker positions; those
    tokens exchange nothing with the visual span directly even under
    ``cross_modal`` — the marker neither reads patches nor serves as a
    key for them.  Cross-modal fusion flows entirely through the name
    words, which attend to the image and are read by it, and each marker
    condenses its own (vision-aware) words.  Letting markers read all
    patches drowns the handful of name-word values under the (identical)
    attended image mass and drives every category's text feature onto
    one shared direction; letting patches read markers hands the
    marker states to the mask objective as spare capacity, which
    flattens their per-category identity just as thoroughly.

    Separator tokens are purely structural, and the prompt grammar puts
    one between blocks but none after the last; if they took part in
    attention, the final block would see one fewer token than the rest
    and each separator's output would leak its block's identity into the
    visual rows.  So separators are hidden as keys from every text query,
    and as queries they read only the summary token, the visual span, and
    themselves.

    blocks: per-text-token block ids, -1 for the summary token.
    separators: optional per-text-token flags marking separator tokens.
    """
    n_text = len(blocks)
    n = n_visual + n_text
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_visual, :n_visual] = True
    if cross_modal:
        mask[:n_visual, n_visual:] = True
        mask[n_visual:, :n_visual] = True
        if summary_slots is not None:
            for pos in summary_slots:
                mask[n_visual + pos, :n_visual] = False
                mask[:n_visual, n_visual + pos] = False
    b = np.asarray(blocks, dtype=int)
    text_text = (b[:, None] == b[None, :]) | (b[:, None] == -1)
    text_text[:, b == -1] = True
    if separators is not None:
        sep = np.asarray(separators, dtype=bool)
        text_text[:, sep] = False
        text_text[sep, :] = False
        text_text[sep, b == -1] = True
        text_text[np.arange(n_text), np.arange(n_text)] = True
    mask[n_visual:, n_visual:] = text_text
    return mask


class MultiwayLayer(Module):
    """One fusion layer: shared self-attention, then modality-routed FFNs.

    Order per call: (1) multi-head self-attention over all tokens, residual,
    layer norm; (2) visual rows through the V-FFN and text rows through the
    L-FFN, each with residual + layer norm.
    """

    def __init__(self, cfg, rng):
        d = cfg.model_dim
        self.attn = MultiHeadAttention(AttentionConfig(d, cfg.head_count), rng)
        self.ln_attn = LayerNorm(d)
        self.v_ffn = FeedForward(d, cfg.ffn_hidden, rng)
        self.l_ffn = FeedForward(d, cfg.ffn_hidden, rng)
        self.ln_v = LayerNorm(d)
        self.ln_l = LayerNorm(d)

    def __call__(self, state, attn_mask=None):
        x = state.tokens
        attended = self.ln_attn(T.add(self.attn(x, x, x, mask=attn_mask), x))
        p = state.n_visual
        n = attended.shape[0]
        v = T.slice_axis(attended, 0, 0, p)
        v = self.ln_v(T.add(self.v_ffn(v), v))
        if n > p:
            l = T.slice_axis(attended, 0, p, n)
            l = self.ln_l(T.add(self.l_ffn(l), l))
            tokens = T.concat([v, l], axis=0)
        else:
            tokens = v
        return FusionState(tokens, p)


class FusionEncoder(Module):
    """Patch embedding, positional encodings, and the multiway layer stack."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.visual_pe = sinusoidal_pe_2d(cfg.grid_h, cfg.grid_w, cfg.model_dim)
        # Learned text positions start at the same scale as the sinusoidal
        # visual positions so neither modality dwarfs the other at assembly.
        self.text_pe = T.Tensor(
            rng.standard_normal((MAX_TEXT_LEN, cfg.model_dim)) * 0.5,
            requires_grad=True,
        )
        self.layers = [MultiwayLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def assemble(self, visual, text_embeds, text_pe_rows=None):
        """Concatenate [V; L] and add the modality-appropriate positions.

        ``text_pe_rows`` selects one learned position row per text token;
        when omitted, tokens take rows 0..n-1 in sequence order.  Prompt
        builders pass block-relative rows so that reordering whole category
        blocks permutes the token set without changing any token's position
        vector.
        """
        d = self.cfg.model_dim
        if visual.shape[-1] != d or text_embeds.shape[-1] != d:
            raise DimensionError(
                f"token width mismatch: visual {visual.shape}, "
                f"text {text_embeds.shape}, model {d}"
            )
        if visual.shape[0] != self.cfg.n_patches:
            raise DimensionError(
                f"expected {self.cfg.n_patches} visual tokens, got {visual.shape[0]}"
            )
        n_w = text_embeds.shape[0]
        if text_pe_rows is None:
            text_pe_rows = list(range(n_w))
        if len(text_pe_rows) != n_w:
            raise DimensionError(
                f"{len(text_pe_rows)} position rows for {n_w} text tokens"
            )
        if n_w > MAX_TEXT_LEN or (text_pe_rows and max(text_pe_rows) >= MAX_TEXT_LEN):
            raise DimensionError(f"prompt length {n_w} exceeds {MAX_TEXT_LEN}")
        v = T.add(visual, self.visual_pe)
        l = T.add(text_embeds, T.take_rows(self.text_pe, text_pe_rows))
        return FusionState(T.concat([v, l], axis=0), self.cfg.n_patches)

    def __call__(self, image, text_embeds, wls_slots, adapter_hook=None,
                 attn_mask=None, text_pe_rows=None):
        """Run all layers; returns the trace with F_V, F_L and per-layer states.

        ``adapter_hook(layer_index, visual_rows) -> replacement or None`` is
        offered the visual sub-block after every layer; ``wls_slots`` gives
        (position, category) pairs into the text block for F_L extraction.
        """
        visual = self.patch_embed(image)
        state = self.assemble(visual, text_embeds, text_pe_rows=text_pe_rows)
        p = state.n_visual
        per_layer = []
        for i, layer in enumerate(self.layers, start=1):
            state = layer(state, attn_mask=attn_mask)
            v = state.visual
            per_layer.append(v)
            if adapter_hook is not None:
                replacement = adapter_hook(i, v)
                if replacement is not None:
                    state = FusionState(
                        T.concat([replacement, state.textual], axis=0), p
                    )
        text_tokens = state.textual
        slot_rows = [pos for pos, _cat in wls_slots]
        f_l = T.take_rows(text_tokens, slot_rows) if slot_rows else None
        return EncoderTrace(per_layer, state.visual, f_l, text_tokens)
