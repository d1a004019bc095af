"""Per-component token sequences: compression packing and ID embeddings.

Each component enters the transformer as the concatenation of its L
vecset tokens, ceil(L/sigma) compressed tokens, and one anchor token.
The compressed tokens and the anchor are produced by a single shared
cross-attention layer whose queries are learnable; the anchor is the
one-token summary that later feeds the inter-component router. Random
ID embeddings (drawn without replacement from a fixed codebook of 50)
are added to every token of a component so the model can tell
components apart; they are assigned after packing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import Tensor, nn

from .numerics import DTYPE, masked_attention

ID_CODEBOOK_SIZE = 50


def n_compressed_tokens(L: int, sigma: int) -> int:
    """Number of compressed tokens, ceil(L / sigma); never below 1."""
    if L < 1:
        raise ValueError("empty component")
    if sigma < 1:
        raise ValueError(f"compression ratio must be >= 1, got {sigma}")
    return max(1, math.ceil(L / sigma))


@dataclass
class PackedTokens:
    """One component's input sequence [z ; compressed ; anchor].

    tokens: [L + N_p + 1, D]; id_index: assigned row of the ID codebook.
    """

    tokens: Tensor
    L: int
    n_compressed: int
    id_index: int = -1

    def __post_init__(self) -> None:
        expect = self.L + self.n_compressed + 1
        if self.tokens.shape[0] != expect:
            raise ValueError(
                f"token count {self.tokens.shape[0]} != L + N_p + 1 = {expect}"
            )

    @property
    def total(self) -> int:
        return self.L + self.n_compressed + 1

    @property
    def z(self) -> Tensor:
        return self.tokens[: self.L]

    @property
    def compressed(self) -> Tensor:
        return self.tokens[self.L : self.L + self.n_compressed]

    @property
    def anchor(self) -> Tensor:
        return self.tokens[self.L + self.n_compressed :]


def split_component(x: PackedTokens) -> Tuple[Tensor, Tensor, Tensor]:
    """Views of the three segments; concat(split(x)) round-trips exactly."""
    return x.z, x.compressed, x.anchor


class LearnableQueries(nn.Module):
    """Shared compression queries: N_p pooling tokens plus one anchor query."""

    def __init__(self, L: int, sigma: int, d_model: int):
        super().__init__()
        self.n_compressed = n_compressed_tokens(L, sigma)
        self.p = nn.Parameter(torch.zeros(self.n_compressed, d_model, dtype=DTYPE))
        self.p_bar = nn.Parameter(torch.zeros(1, d_model, dtype=DTYPE))


class CrossAttentionPacker(nn.Module):
    """Single-head cross-attention that pools a component into its queries.

    Runs at full model width with its own bias-free Q/K/V projections;
    it is a compression bottleneck, not part of the routed attention.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.wq = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.wk = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.wv = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)

    def forward(self, queries: Tensor, z: Tensor) -> Tensor:
        """queries [..., M, D] pooled over z [..., L, D] -> [..., M, D]."""
        if z.shape[-2] < 1:
            raise ValueError("empty component")
        scale = 1.0 / math.sqrt(self.d_model)
        return masked_attention(
            self.wq(queries), self.wk(z), self.wv(z), scale=scale
        )


def pack_component(
    z_i: Tensor, queries: LearnableQueries, packer: CrossAttentionPacker
) -> Tuple[Tensor, Tensor]:
    """Compress one component's tokens z_i [L, D] -> (p_i [N_p, D], anchor [1, D]).

    Depends only on z_i and the shared parameters, so packing different
    components never mixes their features.
    """
    if z_i.ndim != 2 or z_i.shape[0] < 1:
        raise ValueError("empty component")
    joint = packer(torch.cat([queries.p, queries.p_bar], dim=0), z_i)
    return joint[: queries.n_compressed], joint[queries.n_compressed :]


def pack_all(
    z: Tensor, queries: LearnableQueries, packer: CrossAttentionPacker
) -> Tensor:
    """Pack every component of z [N, L, D] at once -> [N, L + N_p + 1, D]."""
    n = z.shape[0]
    joint_q = torch.cat([queries.p, queries.p_bar], dim=0)
    pooled = packer(joint_q.unsqueeze(0).expand(n, -1, -1), z)
    return torch.cat([z, pooled], dim=1)


class IdCodebook(nn.Module):
    """Learnable component-ID embeddings, fixed at 50 rows."""

    def __init__(self, d_model: int, size: int = ID_CODEBOOK_SIZE):
        super().__init__()
        self.size = size
        self.embeddings = nn.Parameter(torch.zeros(size, d_model, dtype=DTYPE))


def assign_id_embeddings(
    n: int, codebook_size: int, rng: torch.Generator
) -> List[int]:
    """Draw n distinct codebook indices uniformly without replacement."""
    if n > codebook_size:
        raise ValueError(
            f"component count exceeds ID codebook ({n} > {codebook_size})"
        )
    perm = torch.randperm(codebook_size, generator=rng)
    return perm[:n].tolist()
