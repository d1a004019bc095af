"""Local mask rules, blindness of vecset tokens, and the block oracle."""

import math

import pytest
import torch

from mocdit.local_block import LocalBlock, build_local_mask
from mocdit.numerics import DTYPE


def enumerate_rule_table(L, np_):
    """Independent re-statement of the mask rules, cell by cell."""
    total = L + np_ + 1
    table = torch.zeros(total, total, dtype=torch.bool)
    for q in range(total):
        for k in range(total):
            if q < L:
                table[q, k] = k < L
            elif q < L + np_:
                table[q, k] = k < L + np_
            else:
                table[q, k] = True
    return table


def seeded_block(d, h, L, np_, seed=0, zero_mod=False):
    g = torch.Generator().manual_seed(seed)
    block = LocalBlock(d, h, L, np_)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 0.2)
        if zero_mod:
            block.modulation[1].weight.zero_()
            block.modulation[1].bias.zero_()
    return block


class TestMask:
    def test_counts_at_4_2(self):
        mask = build_local_mask(4, 2)
        assert mask.shape == (7, 7)
        assert int(mask.sum()) == 16 + 12 + 7 == 35

    def test_count_formula_on_grid(self):
        for L in (1, 2, 4, 9, 16):
            for np_ in (1, 2, 3, 5):
                mask = build_local_mask(L, np_)
                expect = L * L + np_ * (L + np_) + (L + np_ + 1)
                assert int(mask.sum()) == expect
                assert torch.equal(mask, enumerate_rule_table(L, np_))

    def test_vecset_blind_to_compressed(self):
        L = 4
        mask = build_local_mask(L, 2)
        assert not bool(mask[L - 1, L])

    def test_anchor_row_all_true(self):
        mask = build_local_mask(4, 2)
        assert bool(mask[-1].all()) and int(mask[-1].sum()) == 7


class TestBlock:
    def test_identity_with_zeroed_output_projections(self):
        block = seeded_block(8, 2, 4, 2, seed=1)
        with torch.no_grad():
            block.attn.out.weight.zero_()
            block.attn.out.bias.zero_()
            block.ffn.net[2].weight.zero_()
            block.ffn.net[2].bias.zero_()
        g = torch.Generator().manual_seed(2)
        x = torch.randn(3, 7, 8, generator=g, dtype=DTYPE)
        mod = torch.randn(8, generator=g, dtype=DTYPE)
        assert torch.equal(block(x, mod), x)

    def test_identity_at_zero_modulation_init(self):
        block = seeded_block(8, 2, 4, 2, seed=3, zero_mod=True)
        g = torch.Generator().manual_seed(4)
        x = torch.randn(2, 7, 8, generator=g, dtype=DTYPE)
        assert torch.equal(block(x, torch.randn(8, generator=g, dtype=DTYPE)), x)

    def test_vecset_output_blind_to_appended_tokens(self):
        L, np_ = 4, 2
        block = seeded_block(8, 2, L, np_, seed=5)
        g = torch.Generator().manual_seed(6)
        x = torch.randn(3, 7, 8, generator=g, dtype=DTYPE)
        mod = torch.randn(8, generator=g, dtype=DTYPE)
        out = block(x, mod)
        x2 = x.clone()
        x2[:, L:, :] = torch.randn(3, np_ + 1, 8, generator=g, dtype=DTYPE)
        out2 = block(x2, mod)
        assert torch.equal(out[:, :L, :], out2[:, :L, :])
        assert not torch.equal(out[:, L:, :], out2[:, L:, :])

    def test_blindness_by_finite_differences(self):
        # d(z out)/d(appended inputs) is exactly zero.
        L, np_ = 3, 1
        block = seeded_block(4, 1, L, np_, seed=7)
        g = torch.Generator().manual_seed(8)
        x = torch.randn(1, 5, 4, generator=g, dtype=DTYPE)
        mod = torch.randn(4, generator=g, dtype=DTYPE)
        eps = 1e-6
        base = block(x, mod)[:, :L, :]
        for tok in range(L, 5):
            for col in range(4):
                bumped = x.clone()
                bumped[0, tok, col] += eps
                diff = (block(bumped, mod)[:, :L, :] - base).abs().max().item()
                assert diff == 0.0

    def test_matches_per_row_masked_attention_oracle(self):
        L, np_, d, h = 4, 2, 8, 2
        block = seeded_block(d, h, L, np_, seed=9)
        g = torch.Generator().manual_seed(10)
        x = torch.randn(2, 7, d, generator=g, dtype=DTYPE)
        mod = torch.randn(d, generator=g, dtype=DTYPE)
        out = block(x, mod)

        # Oracle: explicit per-row, per-head masked attention plus FFN.
        mask = enumerate_rule_table(L, np_)
        mod_out = block.modulation(mod)
        sh_a, sc_a, g_a, sh_f, sc_f, g_f = mod_out.chunk(6, dim=-1)
        dh = d // h
        expect = torch.empty_like(x)
        for n in range(2):
            normed = torch.nn.functional.layer_norm(x[n], (d,)) * (1 + sc_a) + sh_a
            qkv = block.attn.qkv(normed)
            q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
            attn_rows = torch.zeros(7, d, dtype=DTYPE)
            for row in range(7):
                for head in range(h):
                    cols = slice(head * dh, (head + 1) * dh)
                    logits = torch.full((7,), float("-inf"), dtype=DTYPE)
                    for key in range(7):
                        if mask[row, key]:
                            logits[key] = q[row, cols] @ k[key, cols] / math.sqrt(dh)
                    w = torch.softmax(logits, dim=0)
                    attn_rows[row, cols] = w @ v[:, cols]
            y = x[n] + g_a * block.attn.out(attn_rows)
            normed2 = torch.nn.functional.layer_norm(y, (d,)) * (1 + sc_f) + sh_f
            expect[n] = y + g_f * block.ffn(normed2)
        assert (out - expect).abs().max() < 1e-10

    def test_shape_mismatch_raises(self):
        block = seeded_block(8, 2, 4, 2)
        with pytest.raises(ValueError, match="sequence length"):
            block(torch.zeros(1, 6, 8, dtype=DTYPE), torch.zeros(8, dtype=DTYPE))
