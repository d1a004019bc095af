"""Core attention math and gradient checking.

Everything operates on plain float64 torch tensors on CPU. The package
deliberately runs all training and testing in 64-bit so that softmax
reductions, gradient checks, and the dense-reference comparisons are
deterministic and tight; checkpoints may downcast to 32-bit storage
(see ``dit_model.save_checkpoint``).

Reverse-mode differentiation is provided by torch autograd over the op
set used here (matmul, add, mul, sigmoid, GELU, layernorm, embedding
lookup, and the masked/gained softmax attention below). Top-k index
selection and routing decisions are integer-valued and carry no
gradient; gradients reach the router only through the key-gain
multiplication inside :func:`masked_attention`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch
from torch import Tensor

DTYPE = torch.float64

#: Named parameter map. Gradients live on the tensors themselves
#: (``p.grad``), each with the same shape as its parameter.
ParamStore = Dict[str, Tensor]


def gradients(params: ParamStore) -> ParamStore:
    """Return the gradient map of a ParamStore (zeros where unset)."""
    return {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }


@dataclass
class AttentionSpec:
    """How a single attention call is masked, gated, and scaled.

    mask: bool [n_queries, n_keys], True = may attend. None = attend all.
    key_gains: per-key positive scalars multiplied into the key vectors
        before the logits (pre-softmax component-level reweighting);
        None means ungated (all 1.0).
    scale: logit scale, conventionally 1/sqrt(d_head).
    """

    mask: Optional[Tensor]
    key_gains: Optional[Tensor]
    scale: float

    def validate(self, n_queries: int, n_keys: int) -> None:
        if self.mask is not None:
            if self.mask.shape != (n_queries, n_keys):
                raise ValueError(
                    f"mask shape {tuple(self.mask.shape)} != ({n_queries}, {n_keys})"
                )
            if not bool(self.mask.any(dim=1).all()):
                raise ValueError("empty attention context")
        if self.key_gains is not None:
            if self.key_gains.shape != (n_keys,):
                raise ValueError(
                    f"key_gains shape {tuple(self.key_gains.shape)} != ({n_keys},)"
                )
            if not bool(torch.isfinite(self.key_gains).all()):
                raise ValueError("non-finite key gain")
            if bool((self.key_gains <= 0).any()):
                raise ValueError("gain <= 0")


def masked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    mask: Optional[Tensor] = None,
    key_gains: Optional[Tensor] = None,
    scale: float,
) -> Tensor:
    """Batched softmax attention with a boolean mask and per-key gains.

    q: [..., nq, d], k/v: [..., nk, d], mask broadcastable to
    [..., nq, nk], key_gains broadcastable to [..., nk]. Gains are
    multiplied into the keys, so attention with gains g is exactly
    attention with gains 1 on pre-scaled keys g_k * K_k. Masked logits
    are replaced with -inf before the softmax, which keeps the weights
    over visible keys summing to one.
    """
    if key_gains is not None:
        k = k * key_gains.unsqueeze(-1)
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v)


def attention(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec) -> Tensor:
    """Single attention call over 2-D Q [nq,d], K [nk,d], V [nk,dv].

    Validating wrapper around :func:`masked_attention`; raises on NaN
    inputs, non-positive gains, and query rows with no visible key.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D Q, K, V")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(
            f"inconsistent shapes Q{tuple(q.shape)} K{tuple(k.shape)} V{tuple(v.shape)}"
        )
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not bool(torch.isfinite(t).all()):
            raise ValueError(f"non-finite values in {name}")
    spec.validate(q.shape[0], k.shape[0])
    out = masked_attention(
        q, k, v, mask=spec.mask, key_gains=spec.key_gains, scale=spec.scale
    )
    if not bool(torch.isfinite(out).all()):
        raise ValueError("non-finite attention output")
    return out


def finite_difference_grads(
    loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, eps: float
) -> ParamStore:
    """Central finite differences of loss_fn w.r.t. every parameter scalar.

    Independent of autograd: evaluates loss_fn at p +/- eps per scalar
    under no_grad and returns {name: gradient tensor}.
    """
    grads: ParamStore = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat = p.data.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                lo_plus = float(loss_fn(params))
                flat[i] = orig - eps
                lo_minus = float(loss_fn(params))
                flat[i] = orig
                gflat[i] = (lo_plus - lo_minus) / (2.0 * eps)
            grads[name] = g
    return grads


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, eps: float = 1e-5
) -> float:
    """Max relative error between reverse-mode and finite-difference grads.

    loss_fn must be deterministic given params (fix any RNG inside it).
    Per scalar the error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|);
    the max over all parameters is returned.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params.values():
        p.grad = None
    loss = loss_fn(params)
    if not bool(torch.isfinite(loss)):
        raise ValueError("non-finite loss")
    ad = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    ad_map = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), ad)
    }
    fd_map = finite_difference_grads(loss_fn, params, eps)
    worst = 0.0
    for name in params:
        g_ad = ad_map[name]
        g_fd = fd_map[name]
        denom = torch.clamp(g_ad.abs() + g_fd.abs(), min=1e-8)
        rel = ((g_ad - g_fd).abs() / denom).max().item()
        worst = max(worst, rel)
    return worst
