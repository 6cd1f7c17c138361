"""Reusable neural blocks: attention, feed-forward, embeddings, positions.

Every block is a plain object holding ``Tensor`` parameters; gradients flow
through the active tape exactly as for raw tensor ops.  Blocks are stateless
between calls, so one parameter set may serve concurrent forward passes on
separate tapes.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "AttentionConfig",
    "MultiHeadAttention",
    "FeedForward",
    "Embedding",
    "sinusoidal_pe_2d",
    "embedding_lookup",
]


class Module:
    """Base class for parameterized blocks.

    Parameters are discovered by walking instance attributes (tensors with
    ``requires_grad``, sub-modules, and lists of either), in attribute
    creation order, which keeps parameter naming deterministic.
    """

    def named_parameters(self, prefix=""):
        found = []
        for name, value in vars(self).items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, T.Tensor):
                if value.requires_grad:
                    found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_parameters(f"{path}.{i}"))
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        found.append((f"{path}.{i}", item))
        return found

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _param(rng, shape, scale):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class Linear(Module):
    """Affine map y = x W + b with W of shape [n_in, n_out]."""

    def __init__(self, n_in, n_out, rng, zero_init=False):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        if zero_init:
            self.weight = T.Tensor(np.zeros((n_in, n_out)), requires_grad=True)
        else:
            self.weight = _param(rng, (n_in, n_out), 1.0 / np.sqrt(n_in))
        self.bias = T.Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    def zero_(self):
        """Zero weight and bias in place (used by identity/ablation probes)."""
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class LayerNorm(Module):
    """Last-axis layer normalization with learned gain and bias."""

    def __init__(self, dim):
        self.gain = T.Tensor(np.ones(dim), requires_grad=True)
        self.bias = T.Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class AttentionConfig:
    """Head geometry for one attention block: model width and head count."""

    def __init__(self, model_dim, head_count):
        self.model_dim = int(model_dim)
        self.head_count = int(head_count)
        if self.model_dim % self.head_count != 0:
            raise ConfigError(
                f"head_count {head_count} must divide model_dim {model_dim}"
            )

    @property
    def head_dim(self):
        return self.model_dim // self.head_count


MASK_NEG = -1e9


class MultiHeadAttention(Module):
    """Scaled dot-product attention over full sequences, optionally masked.

    One set of q/k/v projections plus a single shared output projection.
    ``mask`` is a boolean [queries x keys] matrix where True marks attendable
    positions; weights outside the mask are exactly zero (large negative
    additive bias before softmax, then a hard zeroing afterwards).
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        d = cfg.model_dim
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_out = Linear(d, d, rng)

    def _split_heads(self, x, n):
        h, hd = self.cfg.head_count, self.cfg.head_dim
        return T.transpose(T.reshape(x, (n, h, hd)), (1, 0, 2))

    def __call__(self, q_in, k_in, v_in, mask=None, return_weights=False):
        d = self.cfg.model_dim
        if q_in.shape[-1] != d or k_in.shape[-1] != d:
            raise DimensionError(
                f"attention expects width {d}, got query {q_in.shape} "
                f"and key {k_in.shape}"
            )
        n_q, n_k = q_in.shape[0], k_in.shape[0]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n_q, n_k):
                raise DimensionError(
                    f"mask shape {mask.shape} does not match ({n_q}, {n_k})"
                )
            if not mask.any(axis=1).all():
                raise ContractError("attention mask has a fully-masked query row")

        q = self._split_heads(self.w_q(q_in), n_q)
        k = self._split_heads(self.w_k(k_in), n_k)
        v = self._split_heads(self.w_v(v_in), n_k)

        scores = T.scale(
            T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.cfg.head_dim)
        )
        if mask is not None:
            scores = T.add(scores, T.Tensor(np.where(mask, 0.0, MASK_NEG)))
        weights = T.softmax(scores, axis=-1)
        if mask is not None:
            weights = T.mul(weights, T.Tensor(mask.astype(weights.data.dtype)))

        ctx = T.matmul(weights, v)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n_q, d))
        out = self.w_out(merged)
        if return_weights:
            return out, weights.data.copy()
        return out


class FeedForward(Module):
    """Two-layer position-wise network: linear -> gelu -> linear."""

    def __init__(self, dim, hidden_dim, rng):
        self.lin1 = Linear(dim, hidden_dim, rng)
        self.lin2 = Linear(hidden_dim, dim, rng)

    def __call__(self, x):
        return self.lin2(T.gelu(self.lin1(x)))


def sinusoidal_pe_2d(h_tokens, w_tokens, d):
    """Fixed 2D positional encoding for an h x w token grid, row-major.

    The first d/2 channels encode the row index and the last d/2 the column
    index, each as interleaved sin/cos at geometrically spaced frequencies.
    Position (0, 0) therefore reads 0 on every sine channel and 1 on every
    cosine channel.
    """
    if d % 4 != 0:
        raise ConfigError(f"2d positional encoding needs d divisible by 4, got {d}")
    half = d // 2

    def axis_encoding(n_pos, width):
        pos = np.arange(n_pos, dtype=float)[:, None]
        k = np.arange(width // 2, dtype=float)[None, :]
        angles = pos / np.power(10000.0, 2.0 * k / width)
        enc = np.zeros((n_pos, width))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        return enc

    rows = axis_encoding(h_tokens, half)
    cols = axis_encoding(w_tokens, half)
    pe = np.zeros((h_tokens * w_tokens, d))
    for r in range(h_tokens):
        for c in range(w_tokens):
            pe[r * w_tokens + c, :half] = rows[r]
            pe[r * w_tokens + c, half:] = cols[c]
    return T.Tensor(pe)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` by integer id; gradients scatter-add back."""
    return T.take_rows(table, ids)


class Embedding(Module):
    """Learned id -> vector table."""

    def __init__(self, n_rows, dim, rng, scale=0.02):
        self.table = _param(rng, (n_rows, dim), scale)

    def __call__(self, ids):
        return embedding_lookup(self.table, ids)
