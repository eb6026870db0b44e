from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prime_xmc.encoder import (
    EncoderError,
    EncoderGrads,
    EncoderParams,
    encode_backward,
    encode_forward,
    encode_texts,
    tokenize,
)

from oracles import finite_difference, max_rel_error, ref_encode


def make_params(rng, dim=4, vocab=32, t_max=8) -> EncoderParams:
    return EncoderParams.initialize(dim, vocab, t_max, rng)


class TestTokenize:
    def test_three_words_deterministic(self):
        a = tokenize("The Grasshopper Trap", 65536, 32)
        b = tokenize("The Grasshopper Trap", 65536, 32)
        assert len(a) == 3
        assert np.array_equal(a, b)
        assert a.dtype == np.int64
        assert np.all((a >= 0) & (a < 65536))

    def test_empty_text_reserved_id(self):
        assert list(tokenize("", 65536, 32)) == [0]
        assert list(tokenize("   \t ::: ", 65536, 32)) == [0]

    def test_repeated_token_hashes_identically(self):
        ids = tokenize("a a a", 65536, 32)
        assert len(ids) == 3
        assert ids[0] == ids[1] == ids[2]

    def test_case_folding(self):
        assert np.array_equal(tokenize("APPLE Pie", 1024, 8), tokenize("apple pie", 1024, 8))

    def test_truncation(self):
        ids = tokenize("one two three four five", 1024, 3)
        assert len(ids) == 3
        assert np.array_equal(ids, tokenize("one two three", 1024, 8))

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            tokenize("x", 1024, 0)
        with pytest.raises(ValueError):
            tokenize("x", 0, 8)


class TestForward:
    def test_identity_projection_single_token(self, rng):
        p = make_params(rng)
        p.proj = np.eye(p.dim)
        p.proj_bias = np.zeros(p.dim)
        t = 7
        out = encode_forward(p, [np.array([t])])
        expect = p.token_table[t] / np.linalg.norm(p.token_table[t])
        assert np.allclose(out.vectors[0], expect, atol=1e-12)

    def test_cancellation_leaves_bias(self, rng):
        p = make_params(rng)
        p.proj = np.eye(p.dim)
        p.proj_bias = rng.normal(size=p.dim)
        p.token_table[3] = np.array([1.0, 2.0, -1.0, 0.5])
        p.token_table[4] = -p.token_table[3]
        out = encode_forward(p, [np.array([3, 4])])
        expect = p.proj_bias / np.linalg.norm(p.proj_bias)
        assert np.allclose(out.vectors[0], expect, atol=1e-12)

    def test_matches_scripted_oracle(self, rng):
        p = make_params(rng, dim=6, vocab=40)
        seqs = [rng.integers(0, 40, size=rng.integers(1, 7)) for _ in range(4)]
        got = encode_forward(p, seqs).vectors
        want = ref_encode(p.token_table, p.proj, p.proj_bias, seqs)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_unit_norm_rows(self, rng):
        p = make_params(rng, dim=8, vocab=64)
        seqs = [rng.integers(0, 64, size=rng.integers(1, 9)) for _ in range(16)]
        out = encode_forward(p, seqs)
        assert np.max(np.abs(np.linalg.norm(out.vectors, axis=1) - 1.0)) < 1e-6

    def test_batch_invariance_bitwise(self, rng):
        p = make_params(rng, dim=8, vocab=64)
        seqs = [rng.integers(0, 64, size=rng.integers(1, 9)) for _ in range(6)]
        together = encode_forward(p, seqs).vectors
        for i, seq in enumerate(seqs):
            alone = encode_forward(p, [seq]).vectors[0]
            assert np.array_equal(alone, together[i])

    def test_degenerate_embedding_error(self, rng):
        p = make_params(rng)
        p.proj = np.zeros((p.dim, p.dim))
        p.proj_bias = np.zeros(p.dim)
        with pytest.raises(EncoderError, match="degenerate embedding"):
            encode_forward(p, [np.array([1])])

    def test_out_of_range_token(self, rng):
        p = make_params(rng)
        with pytest.raises(EncoderError):
            encode_forward(p, [np.array([p.vocab_size])])

    def test_empty_batch(self, rng):
        p = make_params(rng)
        out = encode_forward(p, [])
        assert out.vectors.shape == (0, p.dim)

    def test_encode_texts_convenience(self, rng):
        p = make_params(rng, dim=8, vocab=512, t_max=4)
        out = encode_texts(p, ["hello world", ""])
        assert out.vectors.shape == (2, 8)
        direct = encode_forward(p, [tokenize("hello world", 512, 4), tokenize("", 512, 4)])
        assert np.array_equal(out.vectors, direct.vectors)


class TestBackward:
    def test_zero_upstream_zero_grads(self, rng):
        p = make_params(rng)
        g = EncoderGrads.zeros(p)
        batch = encode_forward(p, [np.array([1, 2]), np.array([3])])
        encode_backward(p, g, batch, np.zeros_like(batch.vectors))
        assert not g.token_table.any()
        assert not g.proj.any()
        assert not g.proj_bias.any()

    def test_gradients_match_finite_differences(self, rng):
        for _ in range(5):
            p = make_params(rng, dim=4, vocab=16)
            seqs = [rng.integers(0, 16, size=rng.integers(1, 5)) for _ in range(3)]
            u = rng.normal(size=(3, 4))

            def loss():
                return float(np.sum(encode_forward(p, seqs).vectors * u))

            g = EncoderGrads.zeros(p)
            encode_backward(p, g, encode_forward(p, seqs), u)
            fd_table, fd_proj, fd_bias = finite_difference(
                loss, [p.token_table, p.proj, p.proj_bias]
            )
            assert max_rel_error(g.token_table, fd_table) < 1e-4
            assert max_rel_error(g.proj, fd_proj) < 1e-4
            assert max_rel_error(g.proj_bias, fd_bias) < 1e-4

    def test_radial_upstream_annihilated(self, rng):
        # upstream parallel to the output row: the normalization Jacobian
        # kills it, so no parameter should receive any gradient
        p = make_params(rng, dim=4, vocab=16)
        seqs = [rng.integers(0, 16, size=3)]
        batch = encode_forward(p, seqs)
        g = EncoderGrads.zeros(p)
        encode_backward(p, g, batch, 2.5 * batch.vectors)
        assert np.max(np.abs(g.token_table)) < 1e-14
        assert np.max(np.abs(g.proj)) < 1e-14
        assert np.max(np.abs(g.proj_bias)) < 1e-14

        def loss():
            h = encode_forward(p, seqs).vectors
            return float(np.sum(h * (2.5 * batch.vectors)))

        fd = finite_difference(loss, [p.proj_bias])[0]
        assert np.max(np.abs(fd)) < 1e-6

    def test_gradient_accumulates(self, rng):
        p = make_params(rng)
        seqs = [np.array([2, 5])]
        batch = encode_forward(p, seqs)
        u = rng.normal(size=(1, p.dim))
        g = EncoderGrads.zeros(p)
        encode_backward(p, g, batch, u)
        once = g.proj.copy()
        encode_backward(p, g, batch, u)
        assert np.allclose(g.proj, 2 * once)

    def test_shape_mismatch(self, rng):
        p = make_params(rng)
        batch = encode_forward(p, [np.array([1])])
        with pytest.raises(EncoderError, match="shape"):
            encode_backward(p, EncoderGrads.zeros(p), batch, np.zeros((2, p.dim)))


@settings(max_examples=40, deadline=None)
@given(st.text(max_size=60), st.integers(1, 12))
def test_tokenize_total_and_bounded(text, t_max):
    ids = tokenize(text, 257, t_max)
    assert 1 <= len(ids) <= t_max
    assert np.all((ids >= 0) & (ids < 257))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=20), min_size=1, max_size=5), st.integers(0, 2**31))
def test_encode_unit_norm_property(texts, seed):
    rng = np.random.default_rng(seed)
    p = make_params(rng, dim=4, vocab=64)
    out = encode_texts(p, texts)
    assert np.max(np.abs(np.linalg.norm(out.vectors, axis=1) - 1.0)) < 1e-6
