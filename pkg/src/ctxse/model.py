"""Full enhancement frontend: primary encoder, noise-context encoder,
cross-attention encoder, and mask head, plus the training-time context
augmentations (random context trimming and signal dropout).

The model consumes log mel features of the noisy signal stacked with the
playback reference, an encoded noise-context sequence, and a speaker
embedding, and estimates a per-bin ratio mask in [0, 1]. Missing context
signals are represented by all-zero stand-ins of fixed shape so that the
same network handles every combination of available signals.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .blocks import (
    ConformerBlock,
    CrossAttentionBlock,
    FilmLayer,
    positional_embedding,
    sinusoidal_table,
)
from .features import stack_features
from .validation import (
    ShapeError,
    check_features,
    check_probability,
    check_speaker_embedding,
)

# Zero-fill stand-in sizes for dropped signals: the noise context substitute
# spans 6 seconds at the 10 ms feature hop, the speaker embedding is 256-dim.
NOISE_CONTEXT_FILL_FRAMES = 600
DVECTOR_DIM = 256

PE_MODES = ("absolute", "reversed", "none")
PRIMARY_PE_MODES = ("absolute", "none")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and context-dropout settings for the frontend."""

    num_channels: int = 128        # mel channels per signal
    d_model: int = 64
    num_blocks: int = 2            # conformer blocks in the primary and noise encoders
    num_cross_blocks: int = 2      # cross-attention blocks
    num_heads: int = 4
    conv_kernel: int = 15
    attn_window: int = 65          # causal self-attention lookback, current frame included
    pe_mode: str = "none"          # noise-context positions: absolute | reversed | none
    primary_pe: str = "absolute"   # positions on the stacked primary input: absolute | none
    ca_variant: str = "proposed"   # cross-attention block wiring: proposed | prior
    dropout_prob: float = 0.2      # per-signal drop probability during training
    dvector_dim: int = DVECTOR_DIM
    context_fill_frames: int = NOISE_CONTEXT_FILL_FRAMES
    pe_max_len: int = 2000

    def validate(self):
        if self.num_blocks < 1 or self.num_cross_blocks < 1:
            raise ValueError("num_blocks and num_cross_blocks must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}")
        if self.primary_pe not in PRIMARY_PE_MODES:
            raise ValueError(f"primary_pe must be one of {PRIMARY_PE_MODES}")
        if self.ca_variant not in CrossAttentionBlock.VARIANTS:
            raise ValueError(f"ca_variant must be one of {CrossAttentionBlock.VARIANTS}")
        check_probability(self.dropout_prob, "dropout_prob")
        if self.pe_max_len < self.context_fill_frames:
            raise ValueError("pe_max_len must cover context_fill_frames")
        return self


@dataclass(frozen=True)
class ContextBundle:
    """The three optional context signals; None marks an absent signal.

    playback: (frames, channels) LFBE of the device playback reference,
      frame-aligned with the utterance.
    noise_context: (context_frames, channels) LFBE of noise-only audio
      captured just before the utterance, at most the fill length.
    dvector: (dvector_dim,) unit-norm speaker embedding, or all-zero once
      dropped.
    """

    playback: np.ndarray | None = None
    noise_context: np.ndarray | None = None
    dvector: np.ndarray | None = None


def _as_prob_triple(probs):
    if np.isscalar(probs):
        p = check_probability(probs)
        return p, p, p
    playback, noise_context, dvector = probs
    return (
        check_probability(playback, "playback probability"),
        check_probability(noise_context, "noise-context probability"),
        check_probability(dvector, "dvector probability"),
    )


def zero_fill_bundle(bundle, utterance_frames, num_channels=128,
                     context_frames=NOISE_CONTEXT_FILL_FRAMES,
                     dvector_dim=DVECTOR_DIM) -> ContextBundle:
    """Materialize absent signals as the all-zero stand-ins the model expects.

    A missing playback becomes zeros with the utterance's frame count, a
    missing noise context becomes a zero matrix of the full fill length, and
    a missing speaker embedding becomes the all-zero vector.
    """
    playback = bundle.playback
    if playback is None:
        playback = np.zeros((utterance_frames, num_channels))
    noise_context = bundle.noise_context
    if noise_context is None:
        noise_context = np.zeros((context_frames, num_channels))
    dvector = bundle.dvector
    if dvector is None:
        dvector = np.zeros(dvector_dim)
    return ContextBundle(playback=playback, noise_context=noise_context, dvector=dvector)


def signal_dropout(bundle, probs, rng, utterance_frames, num_channels=128,
                   context_frames=NOISE_CONTEXT_FILL_FRAMES,
                   dvector_dim=DVECTOR_DIM) -> ContextBundle:
    """Independently drop each context signal and zero-fill the result.

    One uniform draw is consumed per signal in the fixed order (playback,
    noise context, dvector) regardless of presence, so a given generator
    state always yields the same drop pattern. Already-absent signals are
    zero-filled the same way as dropped ones.
    """
    p_playback, p_noise, p_dvector = _as_prob_triple(probs)
    draws = rng.random(3)
    kept = ContextBundle(
        playback=None if draws[0] < p_playback else bundle.playback,
        noise_context=None if draws[1] < p_noise else bundle.noise_context,
        dvector=None if draws[2] < p_dvector else bundle.dvector,
    )
    return zero_fill_bundle(kept, utterance_frames, num_channels,
                            context_frames, dvector_dim)


def random_trim_noise_context(ctx, rng, fill_frames=NOISE_CONTEXT_FILL_FRAMES) -> np.ndarray:
    """Keep the last k frames of the context, k uniform on {0, .., frames}.

    The suffix is kept because it is the audio closest to the utterance
    onset. k = 0 yields the zero-filled substitute used for dropped
    contexts, so downstream attention never sees an empty sequence.
    """
    ctx = check_features(ctx, "noise context")
    total = ctx.shape[0]
    if total > fill_frames:
        raise ShapeError(f"noise context of {total} frames exceeds the "
                         f"{fill_frames}-frame limit")
    k = int(rng.integers(0, total + 1))
    if k == 0:
        return np.zeros((fill_frames, ctx.shape[1]))
    return ctx[total - k:].copy()


class FrontendModel(nn.Module):
    """Mask-estimating enhancement frontend.

    Pipeline: stacked (noisy + playback) features -> input projection
    [+ absolute positions] -> N x (speaker FiLM + conformer block) in the
    primary encoder; the noise context runs through its own projection,
    positional mode, and N standard conformer blocks; M cross-attention
    blocks fuse the two streams with speaker FiLM at each block entry; a
    linear head with logistic squashing emits the (frames, channels) mask.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        f = config.num_channels
        self.input_proj = nn.Linear(2 * f, d)
        self.primary_films = nn.ModuleList(
            FilmLayer(config.dvector_dim, d) for _ in range(config.num_blocks)
        )
        self.primary_blocks = nn.ModuleList(
            ConformerBlock(d, config.num_heads, config.conv_kernel, config.attn_window)
            for _ in range(config.num_blocks)
        )
        self.noise_proj = nn.Linear(f, d)
        self.noise_blocks = nn.ModuleList(
            ConformerBlock(d, config.num_heads, config.conv_kernel, config.attn_window)
            for _ in range(config.num_blocks)
        )
        self.cross_blocks = nn.ModuleList(
            CrossAttentionBlock(d, config.dvector_dim, config.num_heads,
                                config.conv_kernel, config.attn_window,
                                variant=config.ca_variant)
            for _ in range(config.num_cross_blocks)
        )
        self.mask_head = nn.Linear(d, f)
        self.register_buffer("pe_table", sinusoidal_table(config.pe_max_len, d),
                             persistent=False)

    @property
    def dtype(self):
        return self.mask_head.weight.dtype

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def encode_noise_context(self, ctx):
        """Project, add positions per pe_mode, and run the noise-context blocks."""
        if ctx.shape[-1] != self.config.num_channels:
            raise ShapeError(f"noise context has {ctx.shape[-1]} channels, "
                             f"expected {self.config.num_channels}")
        encoded = self.noise_proj(ctx)
        if self.config.pe_mode != "none":
            encoded = encoded + positional_embedding(
                encoded.shape[0], self.config.pe_mode, self.pe_table
            )
        for block in self.noise_blocks:
            encoded = block(encoded)
        return encoded

    def forward(self, stacked, noise_context, dvector):
        """stacked: (T, 2F); noise_context: (S, F); dvector: (dvector_dim,) -> (T, F) mask."""
        if stacked.shape[-1] != 2 * self.config.num_channels:
            raise ShapeError(f"stacked input has {stacked.shape[-1]} channels, "
                             f"expected {2 * self.config.num_channels}")
        x = self.input_proj(stacked)
        if self.config.primary_pe == "absolute":
            x = x + positional_embedding(x.shape[0], "absolute", self.pe_table)
        for film, block in zip(self.primary_films, self.primary_blocks):
            x = block(film(x, dvector))
        ctx = self.encode_noise_context(noise_context)
        for cross in self.cross_blocks:
            x, ctx = cross(x, ctx, dvector)
        return torch.sigmoid(self.mask_head(x))

    def estimate_mask(self, noisy_features, bundle: ContextBundle) -> np.ndarray:
        """Estimate the enhancement mask for one utterance.

        Absent context signals are zero-filled exactly as during training.
        Pure: no parameters or buffers are modified.
        """
        cfg = self.config
        noisy = check_features(noisy_features, "noisy features", cfg.num_channels)
        bundle = zero_fill_bundle(bundle, noisy.shape[0], cfg.num_channels,
                                  cfg.context_fill_frames, cfg.dvector_dim)
        playback = check_features(bundle.playback, "playback", cfg.num_channels)
        if playback.shape[0] != noisy.shape[0]:
            raise ShapeError(f"playback has {playback.shape[0]} frames, "
                             f"utterance has {noisy.shape[0]}")
        ctx = check_features(bundle.noise_context, "noise context", cfg.num_channels)
        if not 1 <= ctx.shape[0] <= cfg.context_fill_frames:
            raise ShapeError(f"noise context must have 1..{cfg.context_fill_frames} "
                             f"frames, got {ctx.shape[0]}")
        dvector = check_speaker_embedding(bundle.dvector, cfg.dvector_dim)
        stacked = torch.as_tensor(stack_features(noisy, playback), dtype=self.dtype)
        ctx_t = torch.as_tensor(ctx, dtype=self.dtype)
        dvec_t = torch.as_tensor(dvector, dtype=self.dtype)
        with torch.no_grad():
            mask = self.forward(stacked, ctx_t, dvec_t)
        return mask.cpu().numpy()


def build_model(config: ModelConfig, seed=0) -> FrontendModel:
    """Construct a frontend with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return FrontendModel(config)


def strip_signal(bundle: ContextBundle, missing: str) -> ContextBundle:
    """Return a copy of the bundle with one signal removed (or unchanged for 'none')."""
    if missing == "none":
        return bundle
    if missing == "playback":
        return replace(bundle, playback=None)
    if missing == "noise_context":
        return replace(bundle, noise_context=None)
    if missing == "dvector":
        return replace(bundle, dvector=None)
    raise ValueError(f"unknown signal {missing!r}")
