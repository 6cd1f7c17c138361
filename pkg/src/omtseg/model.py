"""Full model: text frontend, fusion encoder, visual adapter, decoder head.

One forward pass embeds the prompt (with optional trainable marker deltas),
runs the multiway encoder with the adapter hook injecting/harvesting the
feature pyramid, and decodes object queries against the pyramid and the
per-category linguistic features.  Ablation flags disable text cross
attention (both the encoder's cross-modal attention and the head's text
stage), the adapter (the head then reads a resized patch-token grid), or
prompt tuning.
"""

import numpy as np

from . import tensor as T
from .adapter import PYRAMID_STRIDES, FeaturePyramid, VisualAdapter, default_schedule
from .encoder import EncoderConfig, FusionEncoder, prompt_attention_mask
from .head import SegmentationHead
from .nn import Module
from .text import (
    SEP_ID,
    PromptDelta,
    block_ids,
    embed_with_prompt,
    init_wls_row_from_cls,
    position_rows,
)


class ModelOutput:
    """Segmentation output plus the encoder trace and pyramid that fed it."""

    def __init__(self, seg, trace, pyramid):
        self.seg = seg
        self.trace = trace
        self.pyramid = pyramid

    @property
    def f_l(self):
        return self.trace.f_l


class OMTSeg(Module):
    """Open-vocabulary panoptic segmenter over a word-level prompt."""

    def __init__(self, cfg, vocab, rng=None, freeze_backbone=None):
        if rng is None:
            rng = np.random.default_rng(cfg["seed"])
        if freeze_backbone is None:
            freeze_backbone = cfg["train.freeze_backbone"]
        d = cfg["model.model_dim"]
        heads = cfg["model.head_count"]
        n_layers = cfg["model.n_layers"]
        ffn_hidden = cfg["model.ffn_hidden"]
        image = cfg["model.image_size"]

        self.vocab = vocab
        self.text_cross_attn = cfg["ablation.text_cross_attn"]
        self.use_adapter = cfg["ablation.visual_adapter"]
        self.prompt_tuning = cfg["ablation.prompt_tuning"]
        self.freeze_backbone = bool(freeze_backbone)

        # Text embeddings must enter the shared attention stack at the same
        # scale as patch tokens (pixel projections plus sinusoidal positions,
        # row norm ~ sqrt(d)); starting them orders of magnitude smaller lets
        # the attended visual mean swamp every token's identity and the
        # per-category text features collapse onto one direction.
        self.token_embed = T.Tensor(
            rng.standard_normal((len(vocab), d)) * 0.5, requires_grad=True
        )
        init_wls_row_from_cls(self.token_embed)
        self.prompt_delta = PromptDelta(cfg["model.prompt_pool"], d, rng)
        self.encoder = FusionEncoder(
            EncoderConfig(
                n_layers, d, heads, cfg["model.patch_size"], image, image,
                ffn_hidden,
            ),
            rng,
        )
        self.adapter = VisualAdapter(
            d, heads, n_layers, ffn_hidden, rng,
            schedule=default_schedule(n_layers, cfg["model.adapter_points"]),
            stem_width=cfg["model.stem_width"],
        )
        self.head = SegmentationHead(
            d, heads, ffn_hidden, cfg["model.n_queries"],
            cfg["model.decoder_layers"], rng,
            text_cross_attn=self.text_cross_attn,
        )

    def _patch_grid_pyramid(self, f_v):
        """Adapter-disabled fallback: resize the patch-token grid per stride."""
        cfg = self.encoder.cfg
        d = cfg.model_dim
        grid = T.reshape(T.transpose(f_v, (1, 0)), (d, cfg.grid_h, cfg.grid_w))
        maps = []
        for s in PYRAMID_STRIDES:
            maps.append((s, T.bilinear_resize(grid, cfg.image_h // s,
                                              cfg.image_w // s)))
        return FeaturePyramid(maps)

    def __call__(self, image, seq):
        text_embeds = embed_with_prompt(
            seq, self.token_embed, self.prompt_delta, enabled=self.prompt_tuning
        )
        attn_mask = prompt_attention_mask(
            self.encoder.cfg.n_patches, block_ids(seq),
            separators=[tid == SEP_ID for tid in seq.ids],
            cross_modal=self.text_cross_attn,
            summary_slots=[pos for pos, _cat in seq.wls_slots],
        )
        pe_rows = position_rows(seq)
        if self.use_adapter:
            hook, pyramid_out = self.adapter.begin(image)
            trace = self.encoder(
                image, text_embeds, seq.wls_slots,
                adapter_hook=hook, attn_mask=attn_mask, text_pe_rows=pe_rows,
            )
            pyramid = pyramid_out()
        else:
            trace = self.encoder(
                image, text_embeds, seq.wls_slots, attn_mask=attn_mask,
                text_pe_rows=pe_rows,
            )
            pyramid = self._patch_grid_pyramid(trace.f_v)
        seg = self.head(pyramid, trace.f_l)
        return ModelOutput(seg, trace, pyramid)

    def trainable_parameters(self):
        """Named parameters honoring the backbone freeze flag.

        Freezing excludes the fusion encoder only; token embeddings, prompt
        deltas, the adapter, and the head still train.  The encoder serves
        two objectives at once, and when its weights move the heavily
        weighted mask term recruits the text pathway as spare capacity:
        every per-category text feature drifts onto one shared direction and
        cosine classification becomes impossible.  With the encoder fixed,
        mask quality is carried by the adapter and head while the
        contrastive term shapes category identity through the embeddings,
        so the default keeps the backbone frozen during training.
        """
        params = self.named_parameters()
        if not self.freeze_backbone:
            return params
        return [(n, p) for n, p in params if not n.startswith("encoder.")]
