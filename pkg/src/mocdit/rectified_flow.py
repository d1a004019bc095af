"""Rectified flow-matching objective and Euler sampler with guidance.

Training perturbs clean latents along the linear path
Z_t = (1-t) * Z_0 + t * eps with one t ~ U(0,1) shared by every
component of a sample, and regresses the velocity eps - Z_0 with mean
squared error. Sampling integrates the learned field from pure noise
at t=1 down to t=0 with fixed Euler steps; classifier-free guidance
extrapolates between the unconditional and conditional velocities.
Both guidance branches run under the same routing decisions (taken
from the conditional branch) and the same component IDs, and the IDs
are drawn once per trajectory, so the velocity field stays coherent
across steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .component_tokens import assign_id_embeddings
from .dit_model import CompositionalDiT, Condition
from .numerics import DTYPE


@dataclass
class FlowBatch:
    """One training example on the linear noising trajectory."""

    z0: Tensor
    noise: Tensor
    t: float
    z_t: Tensor
    target: Tensor  # noise - z0
    condition: Optional[Condition] = None
    dropped: bool = False


def make_flow_batch(
    z0: Tensor,
    rng: torch.Generator,
    *,
    cond: Optional[Condition] = None,
    dropped: bool = False,
    t: Optional[float] = None,
) -> FlowBatch:
    """Draw (eps, t) and interpolate; t may be pinned for tests."""
    if not bool(torch.isfinite(z0).all()):
        raise ValueError("non-finite clean latents")
    z0 = z0.to(DTYPE)
    noise = torch.randn(z0.shape, generator=rng, dtype=DTYPE)
    if t is None:
        t = torch.rand((), generator=rng, dtype=DTYPE).item()
    z_t = (1.0 - t) * z0 + t * noise
    return FlowBatch(
        z0=z0,
        noise=noise,
        t=t,
        z_t=z_t,
        target=noise - z0,
        condition=cond,
        dropped=dropped,
    )


def fm_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all N*L*D elements."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    return ((pred - target) ** 2).mean()


def sample(
    model: CompositionalDiT,
    n: int,
    steps: int,
    cond: Optional[Condition],
    cfg_scale: float,
    rng: torch.Generator,
) -> Tensor:
    """Euler-integrate the velocity field from noise (t=1) to data (t=0).

    Routing is deterministic throughout. Component IDs are drawn once
    from rng and reused at every step and in both guidance branches.
    cfg_scale=1 evaluates only the conditional branch.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.cfg
    z = torch.randn(n, cfg.latent_len, cfg.d_latent, generator=rng, dtype=DTYPE)
    ids = assign_id_embeddings(n, cfg.codebook_size, rng)
    use_guidance = (
        cond is not None and not cond.is_null and cfg_scale != 1.0
    )
    dt = 1.0 / steps
    branch = cond if cond is not None else model.null_condition()
    with torch.no_grad():
        for step in range(steps):
            t = 1.0 - step * dt
            v_cond, trace = model.forward_with_trace(z, t, branch, id_indices=ids)
            if use_guidance:
                v_uncond = model.forward(
                    z,
                    t,
                    model.null_condition(),
                    id_indices=ids,
                    routing=trace.routing,
                )
                v = v_uncond + cfg_scale * (v_cond - v_uncond)
            else:
                v = v_cond
            z = z - dt * v
            if not bool(torch.isfinite(z).all()):
                raise ValueError(f"non-finite sample at step {step}")
    return z
