import numpy as np
import pytest
import torch

from ctxse.blocks import receptive_field
from ctxse.model import (
    ContextBundle,
    ModelConfig,
    build_model,
    random_trim_noise_context,
    signal_dropout,
    strip_signal,
    zero_fill_bundle,
)
from ctxse.validation import ShapeError

TINY = ModelConfig(num_channels=8, d_model=16, num_blocks=1, num_cross_blocks=1,
                   num_heads=2, conv_kernel=3, attn_window=4, dvector_dim=8,
                   context_fill_frames=20, pe_max_len=64, dropout_prob=0.0)


def unit_vector(dim, seed=0):
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def tiny_bundle(rng, frames=10, present=("playback", "noise_context", "dvector")):
    return ContextBundle(
        playback=rng.standard_normal((frames, 8)) if "playback" in present else None,
        noise_context=rng.standard_normal((12, 8)) if "noise_context" in present else None,
        dvector=unit_vector(8, seed=3) if "dvector" in present else None,
    )


class TestSignalDropout:
    def test_zero_probability_keeps_signals(self):
        rng = np.random.default_rng(0)
        bundle = tiny_bundle(rng, present=("noise_context", "dvector"))
        out = signal_dropout(bundle, 0.0, rng, utterance_frames=10, num_channels=8,
                             context_frames=20, dvector_dim=8)
        assert np.array_equal(out.noise_context, bundle.noise_context)
        assert np.array_equal(out.dvector, bundle.dvector)
        # absent playback is zero-filled to the utterance length
        assert out.playback.shape == (10, 8)
        assert not out.playback.any()

    def test_full_dropout_zero_fill_shapes(self):
        rng = np.random.default_rng(1)
        bundle = ContextBundle(playback=rng.standard_normal((97, 128)),
                               noise_context=rng.standard_normal((300, 128)),
                               dvector=unit_vector(256))
        out = signal_dropout(bundle, 1.0, rng, utterance_frames=97)
        assert out.playback.shape == (97, 128) and not out.playback.any()
        assert out.noise_context.shape == (600, 128) and not out.noise_context.any()
        assert out.dvector.shape == (256,) and not out.dvector.any()

    def test_fixed_seed_reproduces_pattern(self):
        bundle = tiny_bundle(np.random.default_rng(2))
        kwargs = dict(utterance_frames=10, num_channels=8, context_frames=20,
                      dvector_dim=8)
        out_a = [signal_dropout(bundle, 0.5, np.random.default_rng(7), **kwargs)
                 for _ in range(5)]
        out_b = [signal_dropout(bundle, 0.5, np.random.default_rng(7), **kwargs)
                 for _ in range(5)]
        for a, b in zip(out_a, out_b):
            assert np.array_equal(a.playback, b.playback)
            assert np.array_equal(a.noise_context, b.noise_context)
            assert np.array_equal(a.dvector, b.dvector)

    def test_empirical_drop_rate(self):
        bundle = ContextBundle(playback=np.ones((3, 4)), noise_context=np.ones((5, 4)),
                               dvector=unit_vector(6))
        rng = np.random.default_rng(11)
        probs = (0.2, 0.5, 0.8)
        trials = 2000
        drops = np.zeros(3)
        for _ in range(trials):
            out = signal_dropout(bundle, probs, rng, utterance_frames=3,
                                 num_channels=4, context_frames=8, dvector_dim=6)
            drops += [not out.playback.any(), not out.noise_context.any(),
                      not out.dvector.any()]
        assert np.all(np.abs(drops / trials - probs) < 0.04)

    def test_bad_probability(self):
        bundle = tiny_bundle(np.random.default_rng(3))
        with pytest.raises(ValueError):
            signal_dropout(bundle, 1.5, np.random.default_rng(0), utterance_frames=10)


class TestRandomTrim:
    def test_suffix_and_determinism(self):
        ctx = np.random.default_rng(4).standard_normal((12, 8))
        out_a = random_trim_noise_context(ctx, np.random.default_rng(9), fill_frames=20)
        out_b = random_trim_noise_context(ctx, np.random.default_rng(9), fill_frames=20)
        assert np.array_equal(out_a, out_b)
        k = out_a.shape[0]
        if k != 20 or out_a.any():  # not the zero-filled k=0 case
            assert np.array_equal(out_a, ctx[12 - k:])

    def test_all_lengths_reachable(self):
        ctx = np.arange(12, dtype=float).reshape(3, 4)
        seen = set()
        for seed in range(60):
            out = random_trim_noise_context(ctx, np.random.default_rng(seed),
                                            fill_frames=6)
            if out.shape[0] == 6 and not out.any():
                seen.add(0)
            else:
                assert np.array_equal(out, ctx[3 - out.shape[0]:])
                seen.add(out.shape[0])
        assert seen == {0, 1, 2, 3}

    def test_zero_length_input_maps_to_fill(self):
        out = random_trim_noise_context(np.zeros((0, 4)), np.random.default_rng(0),
                                        fill_frames=6)
        assert out.shape == (6, 4) and not out.any()

    def test_oversize_context_rejected(self):
        with pytest.raises(ShapeError):
            random_trim_noise_context(np.zeros((7, 4)), np.random.default_rng(0),
                                      fill_frames=6)


class TestZeroFill:
    def test_shapes(self):
        out = zero_fill_bundle(ContextBundle(), utterance_frames=97)
        assert out.playback.shape == (97, 128)
        assert out.noise_context.shape == (600, 128)
        assert out.dvector.shape == (256,)
        assert not (out.playback.any() or out.noise_context.any() or out.dvector.any())

    def test_strip_signal(self):
        bundle = tiny_bundle(np.random.default_rng(5))
        assert strip_signal(bundle, "none") is bundle
        assert strip_signal(bundle, "playback").playback is None
        assert strip_signal(bundle, "noise_context").noise_context is None
        assert strip_signal(bundle, "dvector").dvector is None
        with pytest.raises(ValueError):
            strip_signal(bundle, "unknown")


class TestFrontendModel:
    def test_mask_shape_range_and_purity(self):
        model = build_model(TINY, seed=0)
        rng = np.random.default_rng(6)
        noisy = rng.standard_normal((10, 8))
        bundle = tiny_bundle(rng)
        mask_a = model.estimate_mask(noisy, bundle)
        mask_b = model.estimate_mask(noisy, bundle)
        assert mask_a.shape == (10, 8)
        assert mask_a.min() >= 0.0 and mask_a.max() <= 1.0
        assert np.array_equal(mask_a, mask_b)

    def test_all_zero_bundle_forward_finite(self):
        for seed in range(10):
            model = build_model(TINY, seed=seed)
            noisy = np.random.default_rng(seed).standard_normal((6, 8))
            mask = model.estimate_mask(noisy, ContextBundle())
            assert np.all(np.isfinite(mask))
            assert mask.min() >= 0.0 and mask.max() <= 1.0

    def test_end_to_end_causality(self):
        model = build_model(TINY, seed=1)
        rng = np.random.default_rng(7)
        noisy = rng.standard_normal((14, 8))
        bundle = tiny_bundle(rng, frames=14)
        base = model.estimate_mask(noisy, bundle)
        cut = 9
        noisy2 = noisy.copy()
        noisy2[cut:] += 1.0
        playback2 = bundle.playback.copy()
        playback2[cut:] -= 0.5
        bundle2 = ContextBundle(playback=playback2, noise_context=bundle.noise_context,
                                dvector=bundle.dvector)
        out = model.estimate_mask(noisy2, bundle2)
        assert np.array_equal(out[:cut], base[:cut])
        assert not np.array_equal(out[cut:], base[cut:])

    def test_playback_frame_mismatch_rejected(self):
        model = build_model(TINY, seed=0)
        rng = np.random.default_rng(8)
        bundle = ContextBundle(playback=rng.standard_normal((9, 8)))
        with pytest.raises(ShapeError):
            model.estimate_mask(rng.standard_normal((10, 8)), bundle)

    def test_dvector_norm_enforced(self):
        model = build_model(TINY, seed=0)
        rng = np.random.default_rng(9)
        bundle = ContextBundle(dvector=np.full(8, 2.0))
        with pytest.raises(ValueError):
            model.estimate_mask(rng.standard_normal((10, 8)), bundle)

    def test_deterministic_build_and_parameter_count(self):
        a = build_model(TINY, seed=3)
        b = build_model(TINY, seed=3)
        assert a.parameter_count() == b.parameter_count()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=30, num_heads=4).validate()
        with pytest.raises(ValueError):
            ModelConfig(pe_mode="sideways").validate()
        with pytest.raises(ValueError):
            ModelConfig(dropout_prob=1.5).validate()
        with pytest.raises(ValueError):
            ModelConfig(num_blocks=0).validate()


class TestNoiseContextEncoding:
    def encode(self, model, ctx):
        with torch.no_grad():
            return model.encode_noise_context(
                torch.as_tensor(ctx, dtype=model.dtype)).numpy()

    def test_shift_equivariance_without_positions(self):
        cfg = ModelConfig(num_channels=8, d_model=16, num_blocks=1,
                          num_cross_blocks=1, num_heads=2, conv_kernel=3,
                          attn_window=4, dvector_dim=8, context_fill_frames=80,
                          pe_max_len=128, pe_mode="none")
        model = build_model(cfg, seed=2)
        rng = np.random.default_rng(10)
        ctx = rng.standard_normal((30, 8))
        shift = 7
        shifted = np.concatenate([rng.standard_normal((shift, 8)), ctx], axis=0)
        field = receptive_field(cfg.num_blocks, cfg.attn_window, cfg.conv_kernel)
        base = self.encode(model, ctx)
        moved = self.encode(model, shifted)
        assert np.max(np.abs(moved[field + shift:] - base[field:])) < 1e-5

    def test_absolute_positions_break_shift_equivariance(self):
        cfg = ModelConfig(num_channels=8, d_model=16, num_blocks=1,
                          num_cross_blocks=1, num_heads=2, conv_kernel=3,
                          attn_window=4, dvector_dim=8, context_fill_frames=80,
                          pe_max_len=128, pe_mode="absolute")
        model = build_model(cfg, seed=2)
        rng = np.random.default_rng(10)
        ctx = rng.standard_normal((30, 8))
        shift = 7
        shifted = np.concatenate([rng.standard_normal((shift, 8)), ctx], axis=0)
        field = receptive_field(cfg.num_blocks, cfg.attn_window, cfg.conv_kernel)
        base = self.encode(model, ctx)
        moved = self.encode(model, shifted)
        assert np.max(np.abs(moved[field + shift:] - base[field:])) > 1e-3

    def test_output_shape(self):
        model = build_model(TINY, seed=0)
        out = self.encode(model, np.random.default_rng(11).standard_normal((12, 8)))
        assert out.shape == (12, 16)
