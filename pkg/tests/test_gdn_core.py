import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_gdn_tokens
from linbuf.errors import InvalidInputError, NumericError
from linbuf.gdn_core import (
    GdnBufferedToken,
    GdnToken,
    cumulative_decay,
    decay_mask,
    gdn_build_chunk,
    gdn_chunk_attend,
    gdn_chunk_state_update,
    gdn_chunkwise_scan,
    gdn_parallel,
    gdn_recurrent_scan,
    gdn_recurrent_step,
    gdn_token_step,
    unit_lower_inverse,
)
from linbuf.la_core import ChunkWorkspace, HeadState, parallel_attend


def oracle(tokens, S0=None):
    """Textbook delta rule with gating, written out in its erase/write form."""
    d = tokens[0].d
    S = np.zeros((d, d)) if S0 is None else S0.copy()
    outs = []
    for t in tokens:
        St = t.alpha * S
        old = t.k @ St
        new = t.beta * t.v + (1 - t.beta) * old
        S = St - np.outer(t.k, old) + np.outer(t.k, new)
        outs.append(t.q @ S)
    return S, np.array(outs)


def test_token_ranges():
    z = np.zeros(2)
    with pytest.raises(InvalidInputError):
        GdnToken(z, z, z, 0.0, 0.5)
    with pytest.raises(InvalidInputError):
        GdnToken(z, z, z, 1.2, 0.5)
    with pytest.raises(InvalidInputError):
        GdnToken(z, z, z, 0.5, -0.1)
    with pytest.raises(InvalidInputError):
        GdnBufferedToken(0.0, z, z)
    GdnToken(z, z, z, 1.0, 0.0)


class TestRecurrent:
    def test_beta_zero_is_pure_decay(self, rng):
        S = HeadState(rng.standard_normal((4, 4)))
        q, k, v = rng.standard_normal((3, 4))
        new, o = gdn_recurrent_step(S, GdnToken(q, k, v, 0.7, 0.0))
        np.testing.assert_allclose(new.S, 0.7 * S.S, atol=1e-15)
        np.testing.assert_allclose(o, 0.7 * (q @ S.S), atol=1e-14)

    def test_delta_rule_overwrites(self, rng):
        k = rng.standard_normal(5)
        k /= np.linalg.norm(k)
        v1, v2, q = rng.standard_normal((3, 5))
        S = HeadState.zeros(5)
        S, _ = gdn_recurrent_step(S, GdnToken(q, k, v1, 1.0, 1.0))
        S, _ = gdn_recurrent_step(S, GdnToken(q, k, v2, 1.0, 1.0))
        np.testing.assert_allclose(k @ S.S, v2, atol=1e-12)

    def test_matches_erase_write_oracle(self):
        toks = make_gdn_tokens(np.random.default_rng(0), 8, 32)
        S_ref, ref = oracle(toks)
        S, outs = gdn_recurrent_scan(toks)
        assert np.max(np.abs(outs - ref)) <= 1e-12
        assert np.max(np.abs(S.S - S_ref)) <= 1e-12

    def test_matches_parallel_seed0(self):
        toks = make_gdn_tokens(np.random.default_rng(0), 8, 32)
        _, outs = gdn_recurrent_scan(toks)
        assert np.max(np.abs(outs - gdn_parallel(toks))) <= 1e-9


class TestChunkMachinery:
    def test_forward_substitution_inverse(self, rng):
        L = np.tril(rng.standard_normal((9, 9)), -1)
        A = unit_lower_inverse(L)
        np.testing.assert_allclose((np.eye(9) + L) @ A, np.eye(9), atol=1e-10)
        assert np.allclose(np.triu(A, 1), 0) and np.allclose(np.diag(A), 1)

    def test_decay_mask_matches_ratio(self, rng):
        a = rng.uniform(0.5, 1.0, 7)
        g = cumulative_decay(a)
        G = decay_mask(a)
        for i in range(7):
            for j in range(7):
                want = g[i] / g[j] if i >= j else 0.0
                assert G[i, j] == pytest.approx(want, rel=1e-13, abs=0)

    def test_decay_mask_survives_tiny_products(self):
        # 400 factors of 0.1 underflow a cumulative product; the mask does not need it
        G = decay_mask(np.full(400, 0.1))
        assert G[399, 398] == pytest.approx(0.1)
        assert G[5, 5] == 1.0

    def test_gamma_nonincreasing(self, rng):
        g = cumulative_decay(rng.uniform(0.01, 1.0, 50))
        assert np.all(np.diff(g) <= 0) and np.all(g > 0)

    def test_single_token_chunk(self, rng):
        S0 = HeadState(rng.standard_normal((4, 4)))
        tok = make_gdn_tokens(rng, 4, 1)[0]
        ch = gdn_build_chunk([tok], S0)
        np.testing.assert_array_equal(ch.A, [[1.0]])
        want = tok.beta * tok.v - tok.beta * tok.alpha * (tok.k @ S0.S)
        np.testing.assert_allclose(ch.U[0], want, atol=1e-14)

    def test_no_decay_gives_causal_mask(self, rng):
        ch = gdn_build_chunk(make_gdn_tokens(rng, 4, 5, alpha=1.0))
        np.testing.assert_array_equal(ch.Gamma, np.tril(np.ones((5, 5))))
        np.testing.assert_array_equal(ch.gamma, np.ones(5))

    def test_a_residual(self, rng):
        ch = gdn_build_chunk(make_gdn_tokens(rng, 8, 16), HeadState(rng.standard_normal((8, 8))))
        assert np.max(np.abs(ch.system_matrix() @ ch.A - np.eye(16))) <= 1e-10

    def test_too_many_tokens(self, rng):
        with pytest.raises(InvalidInputError):
            gdn_build_chunk(make_gdn_tokens(rng, 4, 5), None, m=4)
        with pytest.raises(InvalidInputError):
            gdn_build_chunk([])

    def test_buffered_quantities_reproduce_recurrent_seed1(self):
        toks = make_gdn_tokens(np.random.default_rng(1), 8, 8)
        _, ref = oracle(toks)
        ch = gdn_build_chunk(toks)
        assert np.max(np.abs(gdn_chunk_attend(ch, HeadState.zeros(8)) - ref)) <= 1e-9

    def test_gamma_sits_inside_solve(self, rng):
        # the delta values must reproduce the recurrent state even with
        # per-token decay inside the chunk and a non-zero start state
        S0 = rng.standard_normal((6, 6))
        toks = make_gdn_tokens(rng, 6, 6)
        S_ref, _ = oracle(toks, S0)
        ch = gdn_build_chunk(toks, HeadState(S0))
        S = gdn_chunk_state_update(HeadState(S0), ch.buffered())
        assert np.max(np.abs(S.S - S_ref)) <= 1e-10


class TestChunkAttend:
    def test_orthogonal_keys_reduce_to_vanilla(self, rng):
        d = 6
        keys = np.eye(d)[:4]
        Q, V = rng.standard_normal((2, 4, d))
        toks = [GdnToken(Q[i], keys[i], V[i], 1.0, 1.0) for i in range(4)]
        O = gdn_chunk_attend(gdn_build_chunk(toks, HeadState.zeros(d)), HeadState.zeros(d))
        np.testing.assert_allclose(O, parallel_attend(ChunkWorkspace(Q, keys, V)), atol=1e-13)

    def test_single_token(self, rng):
        S0 = HeadState(rng.standard_normal((5, 5)))
        tok = make_gdn_tokens(rng, 5, 1)[0]
        _, o = gdn_recurrent_step(S0, tok)
        O = gdn_chunk_attend(gdn_build_chunk([tok], S0), S0)
        assert np.max(np.abs(O[0] - o)) <= 1e-10

    def test_seed2_long_sequence(self):
        toks = make_gdn_tokens(np.random.default_rng(2), 16, 64)
        S_ref, ref = oracle(toks)
        S, outs = gdn_chunkwise_scan(toks, 8)
        assert np.max(np.abs(outs - ref)) <= 1e-8
        assert np.max(np.abs(S.S - S_ref)) <= 1e-8

    def test_dimension_mismatch(self, rng):
        ch = gdn_build_chunk(make_gdn_tokens(rng, 4, 2))
        with pytest.raises(InvalidInputError):
            gdn_chunk_attend(ch, HeadState.zeros(5))

    def test_state_not_mutated(self, rng):
        S0 = HeadState(rng.standard_normal((4, 4)))
        before = S0.S.copy()
        gdn_chunk_attend(gdn_build_chunk(make_gdn_tokens(rng, 4, 3), S0), S0)
        np.testing.assert_array_equal(S0.S, before)


class TestStateUpdate:
    def test_empty(self, rng):
        S0 = HeadState(rng.standard_normal((3, 3)))
        assert gdn_chunk_state_update(S0, []) is S0

    def test_single_token_identity(self, rng):
        S0 = HeadState(rng.standard_normal((4, 4)))
        tok = make_gdn_tokens(rng, 4, 1)[0]
        u = tok.beta * (tok.v - tok.alpha * (tok.k @ S0.S))
        got = gdn_chunk_state_update(S0, [GdnBufferedToken(tok.alpha, tok.k, u)])
        want, _ = gdn_recurrent_step(S0, tok)
        np.testing.assert_allclose(got.S, want.S, atol=1e-13)

    def test_seed3_sixteen_steps(self):
        toks = make_gdn_tokens(np.random.default_rng(3), 8, 16)
        S_ref, _ = oracle(toks)
        ch = gdn_build_chunk(toks)
        S = gdn_chunk_state_update(HeadState.zeros(8), ch.buffered())
        assert np.max(np.abs(S.S - S_ref)) <= 1e-9


class TestParallel:
    def test_single_token(self, rng):
        tok = make_gdn_tokens(rng, 4, 1)[0]
        _, o = gdn_recurrent_step(HeadState.zeros(4), tok)
        np.testing.assert_allclose(gdn_parallel([tok])[0], o, atol=1e-13)
        np.testing.assert_allclose(o, tok.beta * (tok.q @ tok.k) * tok.v, atol=1e-13)

    def test_beta_zero_gives_zero(self, rng):
        np.testing.assert_array_equal(gdn_parallel(make_gdn_tokens(rng, 4, 9, beta=0.0)), 0.0)

    def test_seed4(self):
        toks = make_gdn_tokens(np.random.default_rng(4), 8, 24)
        _, ref = oracle(toks)
        assert np.max(np.abs(gdn_parallel(toks) - ref)) <= 1e-9


def test_token_step_matches_chunk(rng):
    S0 = rng.standard_normal((6, 6))
    toks = make_gdn_tokens(rng, 6, 7)
    ch = gdn_build_chunk(toks, HeadState(S0))
    O = gdn_chunk_attend(ch, HeadState(S0))
    buf = []
    for i, t in enumerate(toks):
        rec, o = gdn_token_step(S0, buf, t)
        np.testing.assert_allclose(rec.u, ch.U[i], atol=1e-12)
        np.testing.assert_allclose(o, O[i], atol=1e-12)
        buf.append(rec)


@settings(max_examples=60, deadline=None)
@given(
    d=st.sampled_from([4, 8, 16]),
    L=st.integers(1, 64),
    m=st.sampled_from([1, 2, 4, 8]),
    seed=st.integers(0, 2**32 - 1),
)
def test_three_forms_agree(d, L, m, seed):
    toks = make_gdn_tokens(np.random.default_rng(seed), d, L)
    S_rec, rec = gdn_recurrent_scan(toks)
    S_chk, chk = gdn_chunkwise_scan(toks, m)
    assert np.max(np.abs(rec - chk)) <= 1e-8
    assert np.max(np.abs(rec - gdn_parallel(toks))) <= 1e-8
    assert np.max(np.abs(S_rec.S - S_chk.S)) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(cuts=st.lists(st.integers(1, 39), max_size=5, unique=True), seed=st.integers(0, 2**32 - 1))
def test_chunk_boundaries_do_not_matter(cuts, seed):
    toks = make_gdn_tokens(np.random.default_rng(seed), 6, 40)
    S_ref, _ = gdn_recurrent_scan(toks)
    S = HeadState.zeros(6)
    edges = [0, *sorted(cuts), 40]
    for a, b in zip(edges, edges[1:]):
        ch = gdn_build_chunk(toks[a:b], S)
        S = gdn_chunk_state_update(S, ch.buffered())
    assert np.max(np.abs(S.S - S_ref.S)) <= 1e-8


def test_overflow_raises_numeric_error():
    big = [GdnToken(np.full(4, 1e200), np.full(4, 1e200), np.ones(4), 0.9, 0.5) for _ in range(3)]
    with pytest.raises(NumericError):
        gdn_build_chunk(big)
    with pytest.raises(NumericError):
        gdn_parallel(big)
