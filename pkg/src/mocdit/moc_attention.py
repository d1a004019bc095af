"""Global attention with routed full-token and compressed-token context.

For component i, the keys and values of the global attention are its
own vecset tokens, the full vecset tokens of the components its router
ranked in the top k, and the compressed tokens of every remaining
component, ordered by ascending source index. Every key that comes
from another component j is scaled by the importance score o[h, i, j]
before the logits (key gating), which is the only gradient path back
into the router. Values are never gain-scaled in the default
configuration; moving the gains onto the values is an ablation.

Queries are all tokens of component i (vecset, compressed, anchor).
Anchor tokens are never offered as keys or values to other components,
and a component's own compressed tokens are not part of its own
context.

Two implementations are kept side by side: a batched gather path used
by the model, and :meth:`MoCAttention.dense_reference`, the slowest
clearest per-(head, component) loop, used as the correctness oracle in
tests and benchmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from torch import Tensor, nn

from .component_tokens import PackedTokens, n_compressed_tokens
from .moc_router import ImportanceMatrix, RoutingDecision
from .numerics import DTYPE, AttentionSpec, attention


def context_length(n: int, L: int, k: int, sigma: int) -> int:
    """Key/value count of one component's global attention.

    L + k*L + (N-k-1)*ceil(L/sigma). A single component (N=1) attends
    only to its own vecset tokens, so the length is L regardless of k.
    """
    if sigma < 1:
        raise ValueError(f"compression ratio must be >= 1, got {sigma}")
    if L < 1:
        raise ValueError("L must be >= 1")
    if n == 1:
        return L
    if k >= n:
        raise ValueError(f"k {k} must be < N {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    return L + k * L + (n - k - 1) * n_compressed_tokens(L, sigma)


@dataclass
class CostModel:
    """Analytic size/FLOP accounting for one global attention layer."""

    n: int
    L: int
    k: int
    sigma: int
    d_model: int
    n_heads: int

    @property
    def n_compressed(self) -> int:
        return n_compressed_tokens(self.L, self.sigma)

    @property
    def l_global(self) -> int:
        return context_length(self.n, self.L, self.k, self.sigma)

    @property
    def n_queries(self) -> int:
        # All tokens of one component act as queries.
        return self.L + self.n_compressed + 1

    def attention_flops(self) -> int:
        """Score plus weighted-sum FLOPs over all components.

        Per component: 2 * n_queries * l_global * D for Q·K^T and the
        same again for weights·V (multiply-add counted as 2 FLOPs).
        """
        return 4 * self.n * self.n_queries * self.l_global * self.d_model

    def routing_flops(self) -> int:
        """Anchor query/key projections plus the N x N score products."""
        return 2 * (2 * self.n * self.d_model * self.d_model) + 2 * self.n * self.n * self.d_model


@dataclass
class AttentionContext:
    """Assembled context of one (head, component) pair.

    tokens holds the raw context rows (to be passed through the Key and
    Value projections); gains holds the per-key scalar applied to the
    projected keys (1.0 on the component's own segment); provenance
    records, per key, the source component and whether it arrived as a
    full vecset token or a compressed token.
    """

    tokens: Tensor
    gains: Tensor
    provenance: List[Tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def assemble_context(
    i: int,
    h: int,
    tokens: Sequence[PackedTokens],
    importance: ImportanceMatrix,
    routing: Optional[RoutingDecision],
    *,
    use_compressed_context: bool = True,
) -> AttentionContext:
    """Build component i's context for head h from all packed sequences."""
    n = len(tokens)
    if importance.scores.shape[1] != n:
        raise ValueError("importance matrix does not match component count")
    if routing is not None:
        if routing.selected.shape[1] != n:
            raise ValueError("routing does not match component count")
        if routing.selected.numel() and int(routing.selected.max()) >= n:
            raise ValueError("routing index out of range")
        sel = set(routing.selected[min(h, routing.n_heads - 1), i].tolist())
        if i in sel:
            raise ValueError("component routed to itself")
    else:
        sel = set()
    scores = importance.scores[min(h, importance.n_heads - 1), i]
    rows = [tokens[i].z]
    gains = [torch.ones(tokens[i].L, dtype=DTYPE)]
    prov: List[Tuple[int, str]] = [(i, "self")] * tokens[i].L
    seen = {i}
    for j in range(n):
        if j == i:
            continue
        if j in seen:
            raise ValueError(f"duplicate component {j} in context")
        seen.add(j)
        if j in sel:
            seg, kind = tokens[j].z, "full"
        elif use_compressed_context:
            seg, kind = tokens[j].compressed, "compressed"
        else:
            continue
        rows.append(seg)
        gains.append(scores[j].expand(seg.shape[0]))
        prov.extend([(j, kind)] * seg.shape[0])
    return AttentionContext(
        tokens=torch.cat(rows, dim=0), gains=torch.cat(gains, dim=0), provenance=prov
    )


def stack_packed(tokens: Sequence[PackedTokens]) -> Tensor:
    """Stack uniform PackedTokens into [N, T, D]."""
    if len({(t.L, t.n_compressed) for t in tokens}) != 1:
        raise ValueError("components must share (L, N_p)")
    return torch.stack([t.tokens for t in tokens], dim=0)


class MoCAttention(nn.Module):
    """Routed, importance-gated global attention over all components."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        L: int,
        n_compressed: int,
        *,
        gate_target: str = "key",
        use_routing: bool = True,
        use_compressed_context: bool = True,
    ):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {n_heads}")
        if gate_target not in ("key", "value"):
            raise ValueError(f"gate_target must be 'key' or 'value', got {gate_target!r}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.L = L
        self.n_compressed = n_compressed
        self.gate_target = gate_target
        self.use_routing = use_routing
        self.use_compressed_context = use_compressed_context
        self.wq = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.wk = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.wv = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)

    def expected_context_length(self, n: int, k_eff: int) -> int:
        """Key count per component under the module's ablation flags."""
        if n == 1:
            return self.L
        full = k_eff * self.L if self.use_routing else 0
        rest = n - 1 - (k_eff if self.use_routing else 0)
        compressed = rest * self.n_compressed if self.use_compressed_context else 0
        return self.L + full + compressed

    def _selection_mask(
        self, n: int, routing: Optional[RoutingDecision]
    ) -> Tuple[Tensor, int]:
        """Bool [R, N, N] marking routed-full components, and k_eff."""
        if not self.use_routing or routing is None or n == 1:
            return torch.zeros(1, n, n, dtype=torch.bool), 0
        sel_idx = routing.selected
        r, _, k_eff = sel_idx.shape
        mask = torch.zeros(r, n, n, dtype=torch.bool)
        if k_eff:
            mask.scatter_(2, sel_idx, True)
        if bool(mask.diagonal(dim1=1, dim2=2).any()):
            raise ValueError("component routed to itself")
        return mask, k_eff

    def _context_indices(
        self, n: int, sel_mask: Tensor
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """Flat token indices, source components, and own-segment mask.

        Returns (idx, src, own) each [R, N, L_ctx]; idx indexes the
        flattened [N*T] token axis, src the component an entry came
        from; own marks the leading ungated self segment.
        """
        L, np_, t = self.L, self.n_compressed, self.L + self.n_compressed + 1
        r = sel_mask.shape[0]
        own_idx = (torch.arange(n) * t).view(1, n, 1) + torch.arange(L).view(1, 1, L)
        own_idx = own_idx.expand(r, n, L)
        own_src = torch.arange(n).view(1, n, 1).expand(r, n, L)
        if n == 1:
            own = torch.ones(r, 1, L, dtype=torch.bool)
            return own_idx, own_src, own
        # Row i lists the other components in ascending order.
        others = torch.arange(n).expand(n, n)
        others = others[~torch.eye(n, dtype=torch.bool)].view(n, n - 1)
        others = others.unsqueeze(0).expand(r, n, n - 1)
        sel_others = sel_mask.gather(2, others)
        comp_len = np_ if self.use_compressed_context else 0
        lens = torch.where(
            sel_others,
            torch.full_like(others, L),
            torch.full_like(others, comp_len),
        )
        starts = torch.where(
            sel_others, torch.zeros_like(others), torch.full_like(others, L)
        )
        total = int(lens[0, 0].sum())
        if total == 0:
            own = torch.ones(r, n, L, dtype=torch.bool)
            return own_idx, own_src, own
        flat_lens = lens.reshape(-1)
        src = others.reshape(-1).repeat_interleave(flat_lens).view(r, n, total)
        seg_start_in_ctx = (lens.cumsum(-1) - lens).reshape(-1)
        seg_start = seg_start_in_ctx.repeat_interleave(flat_lens).view(r, n, total)
        in_comp_start = starts.reshape(-1).repeat_interleave(flat_lens).view(r, n, total)
        pos = torch.arange(total).view(1, 1, total).expand(r, n, total)
        idx_other = src * t + (pos - seg_start) + in_comp_start
        idx = torch.cat([own_idx, idx_other], dim=-1)
        src_all = torch.cat([own_src, src], dim=-1)
        own = torch.cat(
            [
                torch.ones(r, n, L, dtype=torch.bool),
                torch.zeros(r, n, total, dtype=torch.bool),
            ],
            dim=-1,
        )
        return idx, src_all, own

    def forward(
        self,
        x: Tensor,
        importance: ImportanceMatrix,
        routing: Optional[RoutingDecision],
    ) -> Tensor:
        """Batched gather path. x: [N, T, D] -> updated [N, T, D]."""
        n, t, d = x.shape
        if t != self.L + self.n_compressed + 1:
            raise ValueError(f"sequence length {t} does not match (L, N_p)")
        sel_mask, _ = self._selection_mask(n, routing)
        idx, src, own = self._context_indices(n, sel_mask)
        # Router lanes: selection and importance each run with 1 or H
        # heads; align them, then broadcast across the attention heads.
        r = max(idx.shape[0], importance.n_heads)
        if idx.shape[0] != r:
            idx = idx.expand(r, -1, -1)
            src = src.expand(r, -1, -1)
            own = own.expand(r, -1, -1)
        scores = importance.scores
        if scores.shape[0] != r:
            scores = scores.expand(r, -1, -1)
        gains = scores.gather(2, src)
        gains = torch.where(own, torch.ones_like(gains), gains)
        if bool((gains <= 0).any()):
            raise ValueError("gain <= 0")
        l_ctx = gains.shape[-1]
        h = self.n_heads
        if r == 1 and h > 1:
            idx = idx.expand(h, -1, -1)
            gains_h = gains.expand(h, -1, -1)
        elif r == h:
            gains_h = gains
        else:
            raise ValueError(f"router heads {r} incompatible with {h} attention heads")
        q = self.wq(x).view(n, t, h, self.d_head).permute(2, 0, 1, 3)
        k = self.wk(x).view(n * t, h, self.d_head).permute(1, 0, 2)
        v = self.wv(x).view(n * t, h, self.d_head).permute(1, 0, 2)
        flat_idx = idx.reshape(h, n * l_ctx)
        k_ctx = torch.take_along_dim(k, flat_idx.unsqueeze(-1), dim=1)
        v_ctx = torch.take_along_dim(v, flat_idx.unsqueeze(-1), dim=1)
        k_ctx = k_ctx.view(h, n, l_ctx, self.d_head)
        v_ctx = v_ctx.view(h, n, l_ctx, self.d_head)
        if self.gate_target == "key":
            k_ctx = k_ctx * gains_h.unsqueeze(-1)
        else:
            v_ctx = v_ctx * gains_h.unsqueeze(-1)
        logits = torch.matmul(q, k_ctx.transpose(-2, -1)) / math.sqrt(self.d_head)
        weights = torch.softmax(logits, dim=-1)
        out = torch.matmul(weights, v_ctx)
        return self.out(out.permute(1, 2, 0, 3).reshape(n, t, d))

    def dense_reference(
        self,
        tokens: Sequence[PackedTokens],
        importance: ImportanceMatrix,
        routing: Optional[RoutingDecision],
    ) -> Tensor:
        """Per-(head, component) loop with explicit K_i/V_i; oracle path."""
        n = len(tokens)
        outs = []
        for i in range(n):
            q_full = self.wq(tokens[i].tokens)
            heads = []
            for h in range(self.n_heads):
                ctx = assemble_context(
                    i,
                    h,
                    tokens,
                    importance,
                    routing if self.use_routing else None,
                    use_compressed_context=self.use_compressed_context,
                )
                cols = slice(h * self.d_head, (h + 1) * self.d_head)
                q_h = q_full[:, cols]
                k_h = self.wk(ctx.tokens)[:, cols]
                v_h = self.wv(ctx.tokens)[:, cols]
                gains = ctx.gains
                if self.gate_target == "value":
                    v_h = v_h * gains.unsqueeze(-1)
                    gains = None
                spec = AttentionSpec(
                    mask=None, key_gains=gains, scale=1.0 / math.sqrt(self.d_head)
                )
                heads.append(attention(q_h, k_h, v_h, spec))
            outs.append(self.out(torch.cat(heads, dim=-1)))
        return torch.stack(outs, dim=0)
