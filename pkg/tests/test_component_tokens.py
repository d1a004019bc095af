"""Packing, ID assignment, and segment bookkeeping."""

import math

import pytest
import torch

from mocdit.component_tokens import (
    CrossAttentionPacker,
    IdCodebook,
    LearnableQueries,
    PackedTokens,
    assign_id_embeddings,
    n_compressed_tokens,
    pack_all,
    pack_component,
    split_component,
)
from mocdit.numerics import DTYPE


def make_packer(d, seed=0):
    g = torch.Generator().manual_seed(seed)
    packer = CrossAttentionPacker(d)
    for lin in (packer.wq, packer.wk, packer.wv):
        with torch.no_grad():
            lin.weight.copy_(torch.randn(d, d, generator=g, dtype=DTYPE) * 0.3)
    return packer


def make_queries(L, sigma, d, seed=1):
    g = torch.Generator().manual_seed(seed)
    q = LearnableQueries(L, sigma, d)
    with torch.no_grad():
        q.p.copy_(torch.randn(q.p.shape, generator=g, dtype=DTYPE))
        q.p_bar.copy_(torch.randn(q.p_bar.shape, generator=g, dtype=DTYPE))
    return q


class TestPacking:
    def test_identical_rows_with_identity_value_projection(self):
        d = 4
        packer = CrossAttentionPacker(d)
        with torch.no_grad():
            packer.wq.weight.zero_()
            packer.wk.weight.zero_()
            packer.wv.weight.copy_(torch.eye(d, dtype=DTYPE))
        queries = make_queries(6, 2, d)
        vec = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=DTYPE)
        z = vec.expand(6, d)
        p, anchor = pack_component(z, queries, packer)
        assert torch.allclose(p, vec.expand(3, d), atol=1e-12)
        assert torch.allclose(anchor, vec.expand(1, d), atol=1e-12)

    def test_key_order_invariance(self):
        d = 8
        packer = make_packer(d)
        queries = make_queries(8, 4, d)
        g = torch.Generator().manual_seed(2)
        z = torch.randn(8, d, generator=g, dtype=DTYPE)
        perm = torch.randperm(8, generator=g)
        p1, a1 = pack_component(z, queries, packer)
        p2, a2 = pack_component(z[perm], queries, packer)
        assert torch.allclose(p1, p2, atol=1e-12)
        assert torch.allclose(a1, a2, atol=1e-12)

    def test_matches_naive_three_matmul_oracle(self):
        d, L, sigma = 4, 8, 4
        packer = make_packer(d, seed=3)
        queries = make_queries(L, sigma, d, seed=4)
        g = torch.Generator().manual_seed(5)
        z = torch.randn(L, d, generator=g, dtype=DTYPE)
        p, anchor = pack_component(z, queries, packer)

        def naive(qrows):
            q = qrows @ packer.wq.weight.T
            k = z @ packer.wk.weight.T
            v = z @ packer.wv.weight.T
            w = torch.softmax(q @ k.T / math.sqrt(d), dim=-1)
            return w @ v

        assert (p - naive(queries.p)).abs().max() < 1e-10
        assert (anchor - naive(queries.p_bar)).abs().max() < 1e-10

    def test_per_component_purity(self):
        d, L = 8, 8
        packer = make_packer(d, seed=6)
        queries = make_queries(L, 4, d, seed=7)
        g = torch.Generator().manual_seed(8)
        z = torch.randn(3, L, d, generator=g, dtype=DTYPE)
        packed = pack_all(z, queries, packer)
        z_mod = z.clone()
        z_mod[2] = torch.randn(L, d, generator=g, dtype=DTYPE)
        packed_mod = pack_all(z_mod, queries, packer)
        assert torch.equal(packed[0], packed_mod[0])
        assert torch.equal(packed[1], packed_mod[1])
        assert not torch.equal(packed[2], packed_mod[2])

    def test_empty_component_raises(self):
        d = 4
        packer = make_packer(d)
        queries = make_queries(4, 2, d)
        with pytest.raises(ValueError, match="empty component"):
            pack_component(torch.zeros(0, d, dtype=DTYPE), queries, packer)


class TestIdAssignment:
    def test_full_draw_is_permutation(self):
        rng = torch.Generator().manual_seed(0)
        ids = assign_id_embeddings(50, 50, rng)
        assert sorted(ids) == list(range(50))

    def test_single_draw_in_range(self):
        rng = torch.Generator().manual_seed(1)
        ids = assign_id_embeddings(1, 50, rng)
        assert len(ids) == 1 and 0 <= ids[0] < 50

    def test_distinct_within_sample(self):
        rng = torch.Generator().manual_seed(2)
        for _ in range(100):
            ids = assign_id_embeddings(10, 50, rng)
            assert len(set(ids)) == 10

    def test_seed_reproducible(self):
        a = assign_id_embeddings(8, 50, torch.Generator().manual_seed(42))
        b = assign_id_embeddings(8, 50, torch.Generator().manual_seed(42))
        assert a == b

    def test_uniform_frequency_monte_carlo(self):
        # First drawn index over 10k draws: each of 50 ids should hit
        # 200 +/- 3*sqrt(10000 * p * (1-p)) with p = 1/50.
        rng = torch.Generator().manual_seed(3)
        counts = [0] * 50
        draws = 10_000
        for _ in range(draws):
            counts[assign_id_embeddings(1, 50, rng)[0]] += 1
        p = 1 / 50
        bound = 3 * math.sqrt(draws * p * (1 - p))
        for c in counts:
            assert abs(c - draws * p) <= bound

    def test_overflow_raises(self):
        rng = torch.Generator().manual_seed(4)
        with pytest.raises(ValueError, match="exceeds ID codebook"):
            assign_id_embeddings(51, 50, rng)

    def test_codebook_shape(self):
        cb = IdCodebook(16)
        assert cb.embeddings.shape == (50, 16)


class TestSplit:
    def test_segment_lengths(self):
        x = PackedTokens(tokens=torch.zeros(7, 3, dtype=DTYPE), L=4, n_compressed=2)
        z, p, a = split_component(x)
        assert (z.shape[0], p.shape[0], a.shape[0]) == (4, 2, 1)

    def test_roundtrip_concat(self):
        g = torch.Generator().manual_seed(5)
        tok = torch.randn(7, 3, generator=g, dtype=DTYPE)
        x = PackedTokens(tokens=tok, L=4, n_compressed=2)
        assert torch.equal(torch.cat(split_component(x), dim=0), tok)

    def test_ceiling_rule(self):
        assert n_compressed_tokens(512, 8) == 64
        assert 512 + n_compressed_tokens(512, 8) + 1 == 577
        assert n_compressed_tokens(7, 8) == 1
        assert 7 + n_compressed_tokens(7, 8) + 1 == 9
        assert n_compressed_tokens(32, 8) == 4
        assert n_compressed_tokens(1, 1) == 1

    def test_bad_token_count_raises(self):
        with pytest.raises(ValueError):
            PackedTokens(tokens=torch.zeros(6, 3, dtype=DTYPE), L=4, n_compressed=2)
