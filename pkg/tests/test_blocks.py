import numpy as np
import pytest
import torch

from ctxse.blocks import (
    ConformerBlock,
    CrossAttentionBlock,
    FilmLayer,
    MultiHeadAttention,
    positional_embedding,
    receptive_field,
    sinusoidal_table,
)
from ctxse.training import grad_check, model_parameters
from ctxse.validation import EmptyContextError, ShapeError

torch.manual_seed(0)


def rand(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


class TestFilm:
    def test_zero_init_is_identity(self):
        film = FilmLayer(256, 16).double()
        x = rand(10, 16, seed=1)
        for seed in range(3):
            m = rand(256, seed=seed)
            assert torch.equal(film(x, m), x)

    def test_scalar_example(self):
        film = FilmLayer(1, 1).double()
        with torch.no_grad():
            film.scale.weight.fill_(0.5)
            film.shift.weight.fill_(1.0)
        x = torch.tensor([[2.0]], dtype=torch.float64)
        m = torch.tensor([1.0], dtype=torch.float64)
        # 2 + 0.5*2 + 1 = 4
        assert torch.allclose(film(x, m), torch.tensor([[4.0]], dtype=torch.float64))

    def test_zero_embedding_with_zero_bias_is_identity(self):
        film = FilmLayer(8, 4).double()
        with torch.no_grad():
            film.scale.weight.normal_()
            film.shift.weight.normal_()
        x = rand(5, 4, seed=2)
        assert torch.equal(film(x, torch.zeros(8, dtype=torch.float64)), x)

    def test_framewise_conditioner(self):
        film = FilmLayer(4, 4).double()
        with torch.no_grad():
            film.scale.weight.normal_()
            film.shift.weight.normal_()
        x = rand(6, 4, seed=3)
        cond = rand(6, 4, seed=4)
        out = film(x, cond)
        assert out.shape == x.shape
        row = x[2] + film.scale(cond[2]) * x[2] + film.shift(cond[2])
        assert torch.allclose(out[2], row)

    def test_dim_mismatch(self):
        film = FilmLayer(8, 4)
        with pytest.raises(ShapeError):
            film(torch.zeros(5, 4), torch.zeros(9))


class TestSelfAttention:
    def test_future_perturbation_leaves_past_unchanged(self):
        attn = MultiHeadAttention(16, 4, causal_window=65).double()
        x = rand(12, 16, seed=5)
        base = attn(x)
        bumped = x.clone()
        bumped[8] += 1.0
        out = attn(bumped)
        assert torch.equal(out[:8], base[:8])
        assert not torch.equal(out[8:], base[8:])

    def test_single_frame_is_projected_value(self):
        attn = MultiHeadAttention(16, 4, causal_window=65).double()
        x = rand(1, 16, seed=6)
        expected = attn.out_proj(attn.v_proj(x))
        assert torch.allclose(attn(x), expected, atol=1e-12)

    def test_window_cutoff_exact(self):
        window = 4
        attn = MultiHeadAttention(8, 2, causal_window=window).double()
        x = rand(10, 8, seed=7)
        base = attn(x)
        t = 7
        outside = x.clone()
        outside[t - window] += 1.0  # just past the window edge
        assert torch.equal(attn(outside)[t], base[t])
        inside = x.clone()
        inside[t - window + 1] += 1.0  # oldest frame still inside
        assert not torch.equal(attn(inside)[t], base[t])

    def test_banded_matches_full_path(self):
        attn = MultiHeadAttention(16, 4, causal_window=5).double()
        x = rand(40, 16, seed=8)
        banded = attn(x)
        full, weights = attn(x, return_weights=True)
        assert torch.allclose(banded, full, atol=1e-12)
        assert torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)),
                              atol=1e-6)


class TestCrossAttention:
    def test_single_key_equals_projected_value(self):
        attn = MultiHeadAttention(16, 4).double()
        kv = rand(1, 16, seed=9)
        expected = attn.out_proj(attn.v_proj(kv)).squeeze(0)
        for seed in range(3):
            out = attn(rand(6, 16, seed=10 + seed), context=kv)
            assert (out - expected).abs().max() < 1e-6

    def test_identical_keys_collapse_to_single_key_case(self):
        attn = MultiHeadAttention(16, 4).double()
        q = rand(5, 16, seed=13)
        frame = rand(1, 16, seed=14)
        repeated = frame.repeat(7, 1)
        assert torch.allclose(attn(q, context=repeated), attn(q, context=frame),
                              atol=1e-12)

    def test_permutation_invariance_without_positions(self):
        attn = MultiHeadAttention(16, 4).double()
        q = rand(6, 16, seed=15)
        kv = rand(9, 16, seed=16)
        perm = torch.randperm(9, generator=torch.Generator().manual_seed(17))
        diff = (attn(q, context=kv) - attn(q, context=kv[perm])).abs().max()
        assert diff < 1e-6

    def test_empty_context_raises(self):
        attn = MultiHeadAttention(16, 4)
        with pytest.raises(EmptyContextError):
            attn(torch.zeros(3, 16), context=torch.zeros(0, 16))

    def test_softmax_rows_sum_to_one(self):
        attn = MultiHeadAttention(16, 4).double()
        _, weights = attn(rand(5, 16, seed=18), context=rand(7, 16, seed=19),
                          return_weights=True)
        assert torch.allclose(weights.sum(-1), torch.ones(4, 5, dtype=torch.float64),
                              atol=1e-6)


class TestConformerBlock:
    def test_output_shape_matches_input(self):
        block = ConformerBlock(16, num_heads=4, conv_kernel=3, attn_window=4).double()
        for t in (1, 2, 7, 50):
            x = rand(t, 16, seed=t)
            assert block(x).shape == (t, 16)

    def test_causality_exact(self):
        block = ConformerBlock(16, num_heads=4, conv_kernel=5, attn_window=6).double()
        x = rand(20, 16, seed=20)
        base = block(x)
        bumped = x.clone()
        bumped[13:] += 0.5
        assert torch.equal(block(bumped)[:13], base[:13])

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(21)
        block = ConformerBlock(8, num_heads=2, conv_kernel=3, attn_window=4).double()
        x = rand(5, 8, seed=22)
        weights = torch.linspace(-1, 1, 40, dtype=torch.float64)

        def fn():
            return block(x).reshape(-1) @ weights

        assert grad_check(fn, model_parameters(block)) < 1e-4


class TestCrossAttentionBlock:
    def make_block(self, variant="proposed"):
        torch.manual_seed(23)
        return CrossAttentionBlock(16, cond_dim=8, num_heads=4, conv_kernel=3,
                                   attn_window=4, variant=variant).double()

    def test_variants_differ_with_identical_weights(self):
        block = self.make_block()
        with torch.no_grad():  # exercise the FiLM merge path too
            block.merge_film.scale.weight.normal_()
            block.merge_film.shift.weight.normal_()
        x, ctx, m = rand(6, 16, seed=24), rand(5, 16, seed=25), rand(8, seed=26)
        proposed, _ = block(x, ctx, m)
        object.__setattr__(block, "variant", "prior")
        prior, _ = block(x, ctx, m)
        assert (proposed - prior).abs().max() > 1e-6

    def test_zero_summary_with_zero_film_keeps_stream(self):
        block = self.make_block()
        block.cross_attn.forward = lambda x, context=None, **kw: torch.zeros_like(x)
        x, ctx, m = rand(6, 16, seed=27), rand(5, 16, seed=28), rand(8, seed=29)
        _, _, inter = block(x, ctx, m, return_intermediates=True)
        assert torch.equal(inter["merged"], inter["x_conv"])

    def test_context_stream_passes_through_bitwise(self):
        block = self.make_block()
        x, ctx, m = rand(6, 16, seed=30), rand(5, 16, seed=31), rand(8, seed=32)
        y, ctx_out = block(x, ctx, m)
        assert y.shape == x.shape
        assert ctx_out is ctx
        assert torch.equal(ctx_out, ctx)

    def test_bad_variant_rejected(self):
        with pytest.raises(ValueError):
            CrossAttentionBlock(16, variant="other")

    @pytest.mark.parametrize("variant", ["proposed", "prior"])
    def test_gradients_match_finite_differences(self, variant):
        block = self.make_block(variant)
        x, ctx, m = rand(5, 16, seed=33), rand(4, 16, seed=34), rand(8, seed=35)
        weights = torch.linspace(-1, 1, 80, dtype=torch.float64)

        def fn():
            return block(x, ctx, m)[0].reshape(-1) @ weights

        assert grad_check(fn, model_parameters(block)) < 1e-4


class TestPositionalEmbedding:
    def setup_method(self):
        self.table = sinusoidal_table(16, 8)

    def test_none_mode_is_zero(self):
        emb = positional_embedding(10, "none", self.table)
        assert torch.equal(emb, torch.zeros(10, 8))

    def test_reversed_indexing(self):
        emb = positional_embedding(10, "reversed", self.table)
        # frame t (1-based) receives p(10 - t): the last frame gets p(0)
        assert torch.equal(emb[9], self.table[0])
        assert torch.equal(emb[0], self.table[9])

    def test_absolute_indexing(self):
        emb = positional_embedding(5, "absolute", self.table)
        assert torch.equal(emb, self.table[1:6])

    def test_reversed_suffix_alignment(self):
        long = positional_embedding(10, "reversed", self.table)
        short = positional_embedding(6, "reversed", self.table)
        assert torch.equal(long[4:], short)

    def test_capacity_error_and_bad_mode(self):
        with pytest.raises(ValueError):
            positional_embedding(17, "absolute", self.table)
        with pytest.raises(ValueError):
            positional_embedding(4, "sideways", self.table)

    def test_table_rows_distinct(self):
        # neighboring positions must be distinguishable
        diffs = (self.table[1:] - self.table[:-1]).abs().sum(dim=1)
        assert (diffs > 1e-3).all()


def test_receptive_field_arithmetic():
    assert receptive_field(1, 65, 15) == 78
    assert receptive_field(2, 65, 15) == 156
    assert receptive_field(3, 4, 3) == 15
