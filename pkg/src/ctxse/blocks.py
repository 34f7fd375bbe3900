"""Differentiable building blocks for the enhancement frontend.

All blocks operate on unbatched (frames, channels) tensors; batching is done
by looping at the training level, which keeps variable-length noise contexts
simple. Every block is causal in its input stream: an output frame depends
only on the current and earlier frames.
"""
from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .validation import EmptyContextError, ShapeError


def receptive_field(num_blocks, attn_window, conv_kernel):
    """Frames of past lookback accumulated by a stack of conformer blocks."""
    return num_blocks * ((attn_window - 1) + (conv_kernel - 1))


class FilmLayer(nn.Module):
    """Feature-wise linear modulation: x + scale(cond) * x + shift(cond).

    Both affine maps are zero-initialized, so a fresh layer is the identity
    for every conditioner. The conditioner may be a single vector (broadcast
    over frames) or one vector per frame.
    """

    def __init__(self, cond_dim, d_model):
        super().__init__()
        self.cond_dim = cond_dim
        self.scale = nn.Linear(cond_dim, d_model)
        self.shift = nn.Linear(cond_dim, d_model)
        for lin in (self.scale, self.shift):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, cond):
        if cond.shape[-1] != self.cond_dim:
            raise ShapeError(
                f"conditioner has {cond.shape[-1]} channels, expected {self.cond_dim}"
            )
        return x + self.scale(cond) * x + self.shift(cond)


@lru_cache(maxsize=64)
def _causal_mask(num_q, num_kv, window):
    """Bool (num_q, num_kv) matrix, True where query t may attend key s."""
    offset = torch.arange(num_q).unsqueeze(1) - torch.arange(num_kv).unsqueeze(0)
    allowed = offset >= 0
    if window is not None:
        allowed &= offset < window
    return allowed


@lru_cache(maxsize=64)
def _band_mask(num_q, window):
    """Bool (num_q, window) matrix: slot j of query t maps to key t - window + 1 + j."""
    slots = torch.arange(window).unsqueeze(0)
    return slots >= (window - 1) - torch.arange(num_q).unsqueeze(1)


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention over (frames, channels) inputs.

    Self-attention (context=None) is causal: frame t attends to frames
    [t - causal_window + 1, t], the window including the current frame.
    Windowed self-attention runs on a banded score layout, O(frames * window)
    instead of O(frames^2). Cross-attention attends to every context frame,
    unmasked.
    """

    def __init__(self, d_model, num_heads, causal_window=None):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.causal_window = causal_window
        self.q_proj = nn.Linear(d_model, d_model)
        # No key bias: softmax is invariant to the per-query constant shift a
        # key bias induces, so the parameter would be untrainable.
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x, context=None, return_weights=False):
        kv = x if context is None else context
        num_q, num_kv = x.shape[0], kv.shape[0]
        if num_kv == 0:
            raise EmptyContextError(
                "attention requires at least one key/value frame; zero-fill "
                "missing context before the forward pass"
            )
        q = self.q_proj(x).reshape(num_q, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(kv).reshape(num_kv, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(kv).reshape(num_kv, self.num_heads, self.head_dim).transpose(0, 1)
        scale = math.sqrt(self.head_dim)
        banded = (context is None and not return_weights
                  and self.causal_window is not None and self.causal_window < num_kv)
        if banded:
            window = self.causal_window
            pad_k = F.pad(k, (0, 0, window - 1, 0)).unfold(1, window, 1)  # (h, T, dh, W)
            pad_v = F.pad(v, (0, 0, window - 1, 0)).unfold(1, window, 1)
            scores = torch.einsum("htd,htdw->htw", q, pad_k) / scale
            scores = scores.masked_fill(~_band_mask(num_q, window), float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            out = torch.einsum("htw,htdw->htd", weights, pad_v)
        else:
            scores = q @ k.transpose(-2, -1) / scale
            if context is None:
                allowed = _causal_mask(num_q, num_kv, self.causal_window)
                scores = scores.masked_fill(~allowed, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            out = weights @ v
        out = self.out_proj(out.transpose(0, 1).reshape(num_q, -1))
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    """Pre-norm feed-forward sublayer: LayerNorm -> Linear(4x) -> SiLU -> Linear."""

    def __init__(self, d_model, mult=4):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.linear_in = nn.Linear(d_model, mult * d_model)
        self.linear_out = nn.Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.linear_out(F.silu(self.linear_in(self.norm(x))))


class ConvModule(nn.Module):
    """Pre-norm convolution sublayer: pointwise+GLU -> causal depthwise -> norm -> SiLU -> pointwise.

    The depthwise convolution is left-padded so frame t sees only frames
    [t - kernel + 1, t]; per-frame layer norm is used where the usual recipe
    has batch norm, whose batch statistics would leak across frames.
    """

    def __init__(self, d_model, kernel=15):
        super().__init__()
        self.kernel = kernel
        self.norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Linear(d_model, 2 * d_model)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, groups=d_model)
        self.mid_norm = nn.LayerNorm(d_model)
        self.pointwise_out = nn.Linear(d_model, d_model)

    def forward(self, x):
        y = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        y = F.pad(y.transpose(0, 1), (self.kernel - 1, 0))
        y = self.depthwise(y).transpose(0, 1)
        return self.pointwise_out(F.silu(self.mid_norm(y)))


class ConformerBlock(nn.Module):
    """Standard conformer block with causal attention and convolution.

    Half-step FFN -> windowed causal self-attention -> causal conv ->
    half-step FFN -> layer norm, each sublayer with a residual connection.
    """

    def __init__(self, d_model, num_heads=4, conv_kernel=15, attn_window=65, ff_mult=4):
        super().__init__()
        self.ff_in = FeedForward(d_model, ff_mult)
        self.attn_norm = nn.LayerNorm(d_model)
        self.mhsa = MultiHeadAttention(d_model, num_heads, causal_window=attn_window)
        self.conv = ConvModule(d_model, conv_kernel)
        self.ff_out = FeedForward(d_model, ff_mult)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x):
        x = x + 0.5 * self.ff_in(x)
        x = x + self.mhsa(self.attn_norm(x))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff_out(x)
        return self.norm(x)


class CrossAttentionBlock(nn.Module):
    """Conformer-style block that fuses an input stream with a context stream.

    The input is first modulated by the speaker embedding (FiLM), then both
    streams run through half-step feed-forward and causal conv sublayers.
    Cross-attention summarizes the processed context once per input frame,
    the summary is merged back through a frame-wise FiLM layer, and the
    merged features are refined by an attention sublayer and a final
    feed-forward + layer norm. The context stream passes through unchanged.

    variant="proposed": the cross-attention summary keeps no residual (the
    FiLM merge alone reinjects it) and the refinement attention is windowed
    causal self-attention.
    variant="prior": the summary keeps a residual connection and the
    refinement step is a second cross-attention over the context.
    """

    VARIANTS = ("proposed", "prior")

    def __init__(self, d_model, cond_dim=256, num_heads=4, conv_kernel=15,
                 attn_window=65, ff_mult=4, variant="proposed"):
        super().__init__()
        if variant not in self.VARIANTS:
            raise ValueError(f"variant must be one of {self.VARIANTS}, got {variant!r}")
        self.variant = variant
        self.speaker_film = FilmLayer(cond_dim, d_model)
        self.ff_in = FeedForward(d_model, ff_mult)
        self.ff_ctx = FeedForward(d_model, ff_mult)
        self.conv_in = ConvModule(d_model, conv_kernel)
        self.conv_ctx = ConvModule(d_model, conv_kernel)
        self.cross_attn = MultiHeadAttention(d_model, num_heads)
        self.merge_film = FilmLayer(d_model, d_model)
        self.refine_attn = MultiHeadAttention(d_model, num_heads, causal_window=attn_window)
        self.ff_out = FeedForward(d_model, ff_mult)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, ctx, speaker, return_intermediates=False):
        modulated = self.speaker_film(x, speaker)
        x_ff = modulated + 0.5 * self.ff_in(modulated)
        ctx_ff = ctx + 0.5 * self.ff_ctx(ctx)
        x_conv = x_ff + self.conv_in(x_ff)
        ctx_conv = ctx_ff + self.conv_ctx(ctx_ff)
        summary = self.cross_attn(x_conv, context=ctx_conv)
        if self.variant == "prior":
            summary = x_conv + summary
        merged = self.merge_film(x_conv, summary)
        if self.variant == "proposed":
            refined = merged + self.refine_attn(merged)
        else:
            refined = merged + self.refine_attn(merged, context=ctx_conv)
        y = self.norm(refined + 0.5 * self.ff_out(refined))
        if return_intermediates:
            inter = {
                "modulated": modulated,
                "x_conv": x_conv,
                "ctx_conv": ctx_conv,
                "summary": summary,
                "merged": merged,
                "refined": refined,
            }
            return y, ctx, inter
        return y, ctx


def sinusoidal_table(max_index, d_model):
    """Sinusoidal positional table with rows p(0) .. p(max_index)."""
    pos = torch.arange(max_index + 1, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, d_model, 2, dtype=torch.float64)
    angles = pos / torch.pow(10000.0, idx / d_model)
    table = torch.zeros(max_index + 1, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : table[:, 1::2].shape[1]])
    return table.to(torch.get_default_dtype())


def positional_embedding(length, mode, table):
    """Positional rows for a sequence of `length` frames.

    absolute: frame t (1-based) receives row p(t).
    reversed: frame t receives p(length - t), i.e. the table is indexed by
      distance from the final frame, so sequences of different lengths align
      on their most recent frames and the final frame always receives p(0).
    none: an all-zero matrix.
    """
    if mode not in ("absolute", "reversed", "none"):
        raise ValueError(f"unknown positional mode {mode!r}")
    max_index = table.shape[0] - 1
    if length > max_index:
        raise ValueError(f"sequence of {length} frames exceeds table capacity {max_index}")
    if mode == "none":
        return torch.zeros(length, table.shape[1], dtype=table.dtype, device=table.device)
    if mode == "absolute":
        return table[1 : length + 1]
    return torch.flip(table[:length], dims=(0,))
