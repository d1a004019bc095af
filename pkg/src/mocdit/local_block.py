"""Per-component transformer block with a partially blocked attention mask.

Within one component's sequence [z ; compressed ; anchor], the vecset
tokens may attend only to each other (they stay blind to the appended
tokens), the compressed tokens may attend to the vecset tokens and to
each other, and the anchor sees everything. The block is a pre-norm
DiT-style block: masked multi-head self-attention and a GELU FFN with
hidden width 4D, both modulated by adaptive shift/scale/gate vectors
derived from the timestep+condition embedding. The modulation
projection is zero-initialized, so a fresh block is the identity map.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import Tensor, nn

from .numerics import DTYPE, masked_attention


def build_local_mask(L: int, n_compressed: int) -> Tensor:
    """Boolean [T, T] mask, True = query row may attend key column.

    Rows 0..L-1 attend columns 0..L-1; rows L..L+N_p-1 attend columns
    0..L+N_p-1; the final (anchor) row attends everything. The allowed
    count is L^2 + N_p(L + N_p) + (L + N_p + 1).
    """
    if L < 1 or n_compressed < 1:
        raise ValueError("L and N_p must be >= 1")
    total = L + n_compressed + 1
    mask = torch.zeros(total, total, dtype=torch.bool)
    mask[:L, :L] = True
    mask[L : L + n_compressed, : L + n_compressed] = True
    mask[total - 1, :] = True
    return mask


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale) + shift


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention under a fixed boolean mask."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        n, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        # [N, T, D] -> [N, H, T, d_head]
        q = q.view(n, t, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(n, t, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(n, t, self.n_heads, self.d_head).transpose(1, 2)
        out = masked_attention(
            q, k, v, mask=mask, scale=1.0 / math.sqrt(self.d_head)
        )
        return self.out(out.transpose(1, 2).reshape(n, t, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, 4 * d_model, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model, dtype=DTYPE),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class LocalBlock(nn.Module):
    """Masked per-component block; forward treats components independently."""

    def __init__(self, d_model: int, n_heads: int, L: int, n_compressed: int):
        super().__init__()
        self.L = L
        self.n_compressed = n_compressed
        self.register_buffer("mask", build_local_mask(L, n_compressed))
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, dtype=DTYPE)
        self.attn = MaskedSelfAttention(d_model, n_heads)
        self.ffn = FeedForward(d_model)
        self.modulation = nn.Sequential(
            nn.SiLU(), nn.Linear(d_model, 6 * d_model, dtype=DTYPE)
        )

    def forward(self, x: Tensor, mod: Tensor) -> Tensor:
        """x: [N, T, D] packed tokens, mod: [D] timestep+condition vector."""
        if x.shape[1] != self.L + self.n_compressed + 1:
            raise ValueError(
                f"sequence length {x.shape[1]} does not match mask "
                f"({self.L} + {self.n_compressed} + 1)"
            )
        sh_a, sc_a, gate_a, sh_f, sc_f, gate_f = self.modulation(mod).chunk(6, dim=-1)
        x = x + gate_a * self.attn(modulate(self.norm1(x), sh_a, sc_a), self.mask)
        x = x + gate_f * self.ffn(modulate(self.norm2(x), sh_f, sc_f))
        return x
