"""Inter-component importance scoring and top-k routing.

The router projects each component's anchor token into a query and a
key through two separate bias-free linear layers, splits them into
heads, and scores component j against component i as the sigmoid of
their scaled dot product. Sigmoid (rather than softmax over the
candidates) keeps the scores distinguishable as the component count
grows; softmax is retained as an ablation where the off-diagonal row
is normalized over the other components.

Selection is top-k per (head, querying component). At inference it is
deterministic; during training the k full-context components are drawn
without replacement with probability proportional to the importance
scores, which spreads routing across components instead of letting a
few monopolize it. Selected indices are integer constants in the
backward pass; the router trains through the key-gain multiplication
in the global attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .numerics import DTYPE


@dataclass
class ImportanceMatrix:
    """Per-head component-to-component scores in (0, 1).

    scores: [H, N, N]; entry [h, i, j] gates component j's keys inside
    component i's attention context for head h. The diagonal is never
    used. With the softmax ablation the off-diagonal rows are softmax
    weights over the other components and the diagonal is zero.
    """

    scores: Tensor

    @property
    def n_heads(self) -> int:
        return self.scores.shape[0]

    @property
    def n_components(self) -> int:
        return self.scores.shape[1]


@dataclass
class RoutingDecision:
    """Which components contribute full tokens, per (head, component).

    selected: [H, N, k_eff] long tensor, each row sorted ascending,
    never containing the querying component itself.
    """

    selected: Tensor
    k: int
    mode: str  # "deterministic" | "stochastic"

    @property
    def n_heads(self) -> int:
        return self.selected.shape[0]


def k_from_fraction(n: int, fraction: float = 0.25) -> int:
    """Number of full-context components: clamp(round(fraction*N), 1, N-1).

    The fraction is taken of N (all components). N=1 has no one to
    route to and yields 0.
    """
    if n < 1:
        raise ValueError("need at least one component")
    if n == 1:
        return 0
    return max(1, min(n - 1, round(fraction * n)))


class ComponentRouter(nn.Module):
    """Anchor-to-anchor importance scores, applied independently per head."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)
        self.key = nn.Linear(d_model, d_model, bias=False, dtype=DTYPE)

    def forward(self, anchors: Tensor, activation: str = "sigmoid") -> ImportanceMatrix:
        return importance_scores(anchors, self, self.n_heads, activation=activation)


def importance_scores(
    anchors: Tensor,
    router: ComponentRouter,
    n_heads: int,
    activation: str = "sigmoid",
) -> ImportanceMatrix:
    """Score every ordered component pair from anchors [N, D] -> [H, N, N]."""
    if anchors.ndim != 2 or anchors.shape[0] < 1:
        raise ValueError("anchors must be [N, D] with N >= 1")
    n, d = anchors.shape
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    d_head = d // n_heads
    q = router.query(anchors).view(n, n_heads, d_head).transpose(0, 1)
    k = router.key(anchors).view(n, n_heads, d_head).transpose(0, 1)
    logits = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d_head)
    if activation == "sigmoid":
        scores = torch.sigmoid(logits)
    elif activation == "softmax":
        # Ablation: normalize each row over the *other* components.
        eye = torch.eye(n, dtype=torch.bool).expand(n_heads, n, n)
        if n == 1:
            scores = torch.zeros_like(logits)
        else:
            masked = logits.masked_fill(eye, float("-inf"))
            scores = torch.softmax(masked, dim=-1)
    else:
        raise ValueError(f"unknown router activation {activation!r}")
    if not bool(torch.isfinite(scores).all()):
        raise ValueError("non-finite importance scores")
    return ImportanceMatrix(scores)


def route_deterministic(importance: ImportanceMatrix, k: int) -> RoutingDecision:
    """Top-k by score per (head, component), the component itself excluded.

    Ties go to the larger score first, then to the smaller original
    index. k >= N-1 simply selects all other components.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = importance.scores
    h, n, _ = scores.shape
    k_eff = min(k, n - 1)
    eye = torch.eye(n, dtype=torch.bool).expand(h, n, n)
    cand = scores.masked_fill(eye, float("-inf"))
    # Stable descending sort keeps ascending index order among ties.
    order = torch.argsort(cand, dim=-1, descending=True, stable=True)
    selected, _ = order[..., :k_eff].sort(dim=-1)
    return RoutingDecision(selected=selected, k=k, mode="deterministic")


def route_stochastic(
    importance: ImportanceMatrix, k: int, rng: torch.Generator
) -> RoutingDecision:
    """Draw k distinct components per (head, i), sequentially, P ∝ score.

    Normalization happens over the post-sigmoid scores of the remaining
    candidates at each draw (torch.multinomial without replacement does
    exactly this). Degenerate all-zero rows fall back to uniform.
    """
    scores = importance.scores
    h, n, _ = scores.shape
    if k < 1 or k > n - 1:
        raise ValueError(f"k {k} outside [1, N-1] for N={n}")
    eye = torch.eye(n, dtype=torch.bool).expand(h, n, n)
    weights = scores.masked_fill(eye, 0.0).detach()
    flat = weights.reshape(h * n, n)
    zero_rows = flat.sum(dim=-1) <= 0
    if bool(zero_rows.any()):
        uniform = (~torch.eye(n, dtype=torch.bool)).to(DTYPE).repeat(h, 1)
        flat = torch.where(zero_rows.unsqueeze(-1), uniform, flat)
    drawn = torch.multinomial(flat, k, replacement=False, generator=rng)
    selected, _ = drawn.view(h, n, k).sort(dim=-1)
    return RoutingDecision(selected=selected, k=k, mode="stochastic")
