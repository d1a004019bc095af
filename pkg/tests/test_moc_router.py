"""Importance scoring and deterministic/stochastic routing."""

import math

import pytest
import torch

from mocdit.moc_router import (
    ComponentRouter,
    ImportanceMatrix,
    RoutingDecision,
    importance_scores,
    k_from_fraction,
    route_deterministic,
    route_stochastic,
)
from mocdit.numerics import DTYPE


def seeded_router(d, h, seed=0):
    g = torch.Generator().manual_seed(seed)
    router = ComponentRouter(d, h)
    with torch.no_grad():
        router.query.weight.copy_(torch.randn(d, d, generator=g, dtype=DTYPE) * 0.3)
        router.key.weight.copy_(torch.randn(d, d, generator=g, dtype=DTYPE) * 0.3)
    return router


def scores_from(matrix):
    return ImportanceMatrix(scores=torch.as_tensor(matrix, dtype=DTYPE))


class TestImportance:
    def test_zero_dot_product_is_half(self):
        router = ComponentRouter(1, 1)
        with torch.no_grad():
            router.query.weight.fill_(1.0)
            router.key.weight.fill_(1.0)
        anchors = torch.tensor([[0.0], [1.0]], dtype=DTYPE)
        out = router(anchors)
        # Anchor 0 projects to 0, so all its pairings sit at sigmoid(0).
        assert out.scores[0, 0, 1].item() == 0.5
        assert out.scores[0, 1, 0].item() == 0.5

    def test_log3_dot_product_is_three_quarters(self):
        router = ComponentRouter(1, 1)
        with torch.no_grad():
            router.query.weight.fill_(1.0)
            router.key.weight.fill_(1.0)
        a = math.sqrt(math.log(3.0))
        anchors = torch.tensor([[a], [a]], dtype=DTYPE)
        out = router(anchors)
        assert out.scores[0, 0, 1].item() == pytest.approx(0.75, abs=1e-15)

    def test_matches_scalar_loop_oracle(self):
        n, d, h = 4, 8, 2
        router = seeded_router(d, h, seed=1)
        g = torch.Generator().manual_seed(2)
        anchors = torch.randn(n, d, generator=g, dtype=DTYPE)
        out = router(anchors)
        dh = d // h
        q = (anchors @ router.query.weight.T).detach()
        k = (anchors @ router.key.weight.T).detach()
        for head in range(h):
            cols = slice(head * dh, (head + 1) * dh)
            for i in range(n):
                for j in range(n):
                    logit = float(q[i, cols] @ k[j, cols]) / math.sqrt(dh)
                    expect = 1.0 / (1.0 + math.exp(-logit))
                    assert abs(out.scores[head, i, j].item() - expect) < 1e-12

    def test_scores_in_open_interval(self):
        router = seeded_router(8, 2, seed=3)
        g = torch.Generator().manual_seed(4)
        out = router(torch.randn(6, 8, generator=g, dtype=DTYPE))
        assert bool((out.scores > 0).all()) and bool((out.scores < 1).all())

    def test_indivisible_heads_raise(self):
        with pytest.raises(ValueError, match="divisible"):
            ComponentRouter(6, 4)
        router = seeded_router(8, 2)
        with pytest.raises(ValueError, match="divisible"):
            importance_scores(torch.zeros(2, 6, dtype=DTYPE), router, 4)

    def test_softmax_ablation_equal_logits(self):
        # 32 identical anchors -> every off-diagonal gate is 1/31.
        router = seeded_router(8, 2, seed=5)
        anchors = torch.ones(32, 8, dtype=DTYPE)
        out = router(anchors, activation="softmax")
        off = out.scores[~torch.eye(32, dtype=torch.bool).expand(2, 32, 32)]
        assert (off - 1.0 / 31.0).abs().max().item() <= 1e-12
        assert bool((out.scores.diagonal(dim1=1, dim2=2) == 0).all())

    def test_softmax_gate_magnitude_near_uniform(self):
        # Roughly equal logits at N=32 give mean gate about 1/31.
        router = seeded_router(8, 1, seed=6)
        g = torch.Generator().manual_seed(7)
        anchors = torch.ones(32, 8, dtype=DTYPE) + 1e-3 * torch.randn(
            32, 8, generator=g, dtype=DTYPE
        )
        out = router(anchors, activation="softmax")
        off = out.scores[0][~torch.eye(32, dtype=torch.bool)]
        assert off.mean().item() == pytest.approx(1 / 31, rel=1e-3)


class TestDeterministicRouting:
    def test_direct_comparison(self):
        o = scores_from([[[0.0, 0.9, 0.2, 0.7]] * 4]).scores.clone()
        decision = route_deterministic(ImportanceMatrix(o), k=2)
        assert decision.selected[0, 0].tolist() == [1, 3]

    def test_k_at_least_n_minus_1_selects_all(self):
        g = torch.Generator().manual_seed(8)
        o = ImportanceMatrix(torch.rand(2, 5, 5, generator=g, dtype=DTYPE))
        for k in (4, 7):
            decision = route_deterministic(o, k=k)
            for h in range(2):
                for i in range(5):
                    assert decision.selected[h, i].tolist() == sorted(
                        j for j in range(5) if j != i
                    )

    def test_matches_full_sort_oracle(self):
        g = torch.Generator().manual_seed(9)
        o = ImportanceMatrix(torch.rand(3, 16, 16, generator=g, dtype=DTYPE))
        decision = route_deterministic(o, k=4)
        for h in range(3):
            for i in range(16):
                ranked = sorted(
                    (j for j in range(16) if j != i),
                    key=lambda j: (-o.scores[h, i, j].item(), j),
                )
                assert decision.selected[h, i].tolist() == sorted(ranked[:4])

    def test_tie_break_prefers_smaller_index(self):
        row = [0.0, 0.5, 0.9, 0.5, 0.5]
        o = ImportanceMatrix(torch.tensor([[row] * 5], dtype=DTYPE))
        decision = route_deterministic(o, k=2)
        # 0.9 at j=2 first, then the tie at 0.5 resolved to j=1.
        assert decision.selected[0, 0].tolist() == [1, 2]

    def test_self_never_selected(self):
        g = torch.Generator().manual_seed(10)
        o = ImportanceMatrix(torch.rand(2, 8, 8, generator=g, dtype=DTYPE) + 10.0)
        decision = route_deterministic(o, k=3)
        for h in range(2):
            for i in range(8):
                assert i not in decision.selected[h, i].tolist()

    def test_monotone_transform_leaves_selection_unchanged(self):
        g = torch.Generator().manual_seed(11)
        base = torch.rand(1, 6, 6, generator=g, dtype=DTYPE)
        sel_a = route_deterministic(ImportanceMatrix(base), k=2)
        warped = base.clone()
        warped[0, 3] = 0.1 + 0.8 * base[0, 3] ** 3  # strictly increasing
        sel_b = route_deterministic(ImportanceMatrix(warped), k=2)
        assert torch.equal(sel_a.selected, sel_b.selected)


class TestStochasticRouting:
    def test_k_equals_n_minus_1_selects_all(self):
        g = torch.Generator().manual_seed(12)
        o = ImportanceMatrix(torch.rand(1, 5, 5, generator=g, dtype=DTYPE))
        rng = torch.Generator().manual_seed(0)
        decision = route_stochastic(o, k=4, rng=rng)
        for i in range(5):
            assert decision.selected[0, i].tolist() == sorted(
                j for j in range(5) if j != i
            )

    def test_equal_scores_uniform_frequency(self):
        # N=5, k=1: each candidate should be picked ~1/4 of 10k draws.
        o = ImportanceMatrix(torch.full((1, 5, 5), 0.7, dtype=DTYPE))
        rng = torch.Generator().manual_seed(13)
        draws = 10_000
        counts = torch.zeros(5, 5)
        for _ in range(draws):
            decision = route_stochastic(o, k=1, rng=rng)
            for i in range(5):
                counts[i, decision.selected[0, i, 0]] += 1
        p = 0.25
        bound = 3 * math.sqrt(p * (1 - p) / draws)
        for i in range(5):
            for j in range(5):
                if i == j:
                    assert counts[i, j] == 0
                else:
                    assert abs(counts[i, j] / draws - p) <= bound

    def test_seeded_determinism(self):
        g = torch.Generator().manual_seed(14)
        o = ImportanceMatrix(torch.rand(2, 8, 8, generator=g, dtype=DTYPE))
        a = route_stochastic(o, k=2, rng=torch.Generator().manual_seed(99))
        b = route_stochastic(o, k=2, rng=torch.Generator().manual_seed(99))
        assert torch.equal(a.selected, b.selected)
        assert a.mode == "stochastic"

    def test_coverage_every_candidate_eventually_selected(self):
        g = torch.Generator().manual_seed(15)
        o = ImportanceMatrix(torch.rand(1, 8, 8, generator=g, dtype=DTYPE) * 0.8 + 0.1)
        rng = torch.Generator().manual_seed(16)
        seen = {i: set() for i in range(8)}
        for _ in range(5000):
            decision = route_stochastic(o, k=2, rng=rng)
            for i in range(8):
                seen[i].update(decision.selected[0, i].tolist())
        for i in range(8):
            assert seen[i] == {j for j in range(8) if j != i}

    def test_k_out_of_range_raises(self):
        o = ImportanceMatrix(torch.full((1, 4, 4), 0.5, dtype=DTYPE))
        rng = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError):
            route_stochastic(o, k=4, rng=rng)

    def test_zero_score_fallback_uniform(self):
        o = ImportanceMatrix(torch.zeros(1, 4, 4, dtype=DTYPE))
        rng = torch.Generator().manual_seed(17)
        decision = route_stochastic(o, k=2, rng=rng)
        for i in range(4):
            sel = decision.selected[0, i].tolist()
            assert len(set(sel)) == 2 and i not in sel


class TestKFraction:
    def test_quarter_of_n(self):
        assert k_from_fraction(32) == 8
        assert k_from_fraction(16) == 4
        assert k_from_fraction(4) == 1
        assert k_from_fraction(2) == 1  # clamped up
        assert k_from_fraction(3) == 1
        assert k_from_fraction(1) == 0  # no one to route to
        assert k_from_fraction(8, fraction=1.0) == 7  # clamped to N-1
