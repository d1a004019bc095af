"""Compositional diffusion transformer over per-component latent sets.

Pipeline per forward pass: project the noisy latents to model width,
pack each component into [z ; compressed ; anchor] via the shared
cross-attention packer, add a random ID embedding to every token of a
component, then run alternating local blocks (per-component masked
attention) and global blocks (routed mixture-of-components attention).
The velocity prediction is read off the vecset segment; compressed and
anchor tokens are dropped at the head. Timestep and condition enter
every block through adaptive modulation vectors; all modulation
projections and the output head are zero-initialized, so a freshly
built model predicts exactly zero velocity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import Tensor, nn

from .component_tokens import (
    CrossAttentionPacker,
    IdCodebook,
    LearnableQueries,
    assign_id_embeddings,
    n_compressed_tokens,
    pack_all,
)
from .local_block import FeedForward, LocalBlock, modulate
from .moc_attention import MoCAttention
from .moc_router import (
    ComponentRouter,
    ImportanceMatrix,
    RoutingDecision,
    k_from_fraction,
    route_deterministic,
    route_stochastic,
)
from .numerics import DTYPE


@dataclass
class ModelConfig:
    """Architecture plus the routing/compression/ablation switches."""

    d_model: int = 64
    n_heads: int = 4
    n_block_pairs: int = 4
    latent_len: int = 32  # L, vecset tokens per component
    d_latent: int = 8
    sigma: int = 8
    k_fraction: float = 0.25
    codebook_size: int = 50
    cond_grid: int = 8
    router_activation: str = "sigmoid"  # "sigmoid" | "softmax" (ablation D)
    gate_target: str = "key"  # "key" | "value" (ablation C)
    load_balance: bool = True  # stochastic routing in training (ablation E)
    multi_head_routing: bool = True  # ablation F
    use_routing: bool = True  # ablation A
    use_compressed_context: bool = True  # ablation B

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even (sinusoidal embedding)")
        if self.latent_len < 1 or self.sigma < 1 or self.n_block_pairs < 1:
            raise ValueError("latent_len, sigma, n_block_pairs must be >= 1")
        if self.router_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"bad router_activation {self.router_activation!r}")
        if self.gate_target not in ("key", "value"):
            raise ValueError(f"bad gate_target {self.gate_target!r}")
        if not (0.0 < self.k_fraction <= 1.0):
            raise ValueError("k_fraction must be in (0, 1]")

    @property
    def n_compressed(self) -> int:
        return n_compressed_tokens(self.latent_len, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Condition:
    """Conditioning vector; the null condition is a learned constant."""

    embedding: Tensor  # [d_model]
    is_null: bool = False


@dataclass
class ForwardTrace:
    """Decisions taken during one forward pass, reusable across branches."""

    id_indices: List[int]
    routing: List[Optional[RoutingDecision]] = field(default_factory=list)


class TimestepEmbedder(nn.Module):
    """Sinusoidal embedding of the shared noise level, refined by an MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.mlp = nn.Sequential(
            nn.Linear(d_model, d_model, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(d_model, d_model, dtype=DTYPE),
        )

    def forward(self, t: Union[float, Tensor]) -> Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        half = self.d_model // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half
        )
        angles = 1000.0 * t * freqs
        emb = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)
        return self.mlp(emb)


class GlobalBlock(nn.Module):
    """Pre-norm block pairing the component router with MoC attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        router_heads = cfg.n_heads if cfg.multi_head_routing else 1
        self.cfg = cfg
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.router = ComponentRouter(d, router_heads)
        self.attn = MoCAttention(
            d,
            cfg.n_heads,
            cfg.latent_len,
            cfg.n_compressed,
            gate_target=cfg.gate_target,
            use_routing=cfg.use_routing,
            use_compressed_context=cfg.use_compressed_context,
        )
        self.ffn = FeedForward(d)
        self.modulation = nn.Sequential(
            nn.SiLU(), nn.Linear(d, 6 * d, dtype=DTYPE)
        )

    def forward(
        self,
        x: Tensor,
        mod: Tensor,
        *,
        rng: Optional[torch.Generator] = None,
        stochastic: bool = False,
        routing_override: Optional[RoutingDecision] = None,
    ) -> Tuple[Tensor, Optional[RoutingDecision]]:
        n = x.shape[0]
        sh_a, sc_a, gate_a, sh_f, sc_f, gate_f = self.modulation(mod).chunk(6, dim=-1)
        h = modulate(self.norm1(x), sh_a, sc_a)
        anchors = h[:, -1, :]
        importance = self.router(anchors, activation=self.cfg.router_activation)
        k = k_from_fraction(n, self.cfg.k_fraction)
        routing: Optional[RoutingDecision] = None
        if self.cfg.use_routing and k >= 1:
            if routing_override is not None:
                routing = routing_override
            elif stochastic:
                if rng is None:
                    raise ValueError("stochastic routing requires an RNG")
                routing = route_stochastic(importance, k, rng)
            else:
                routing = route_deterministic(importance, k)
        x = x + gate_a * self.attn(h, importance, routing)
        x = x + gate_f * self.ffn(modulate(self.norm2(x), sh_f, sc_f))
        return x, routing


class CompositionalDiT(nn.Module):
    """Velocity-field model over a set of component latent sequences."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = nn.Linear(cfg.d_latent, d, dtype=DTYPE)
        self.queries = LearnableQueries(cfg.latent_len, cfg.sigma, d)
        self.packer = CrossAttentionPacker(d)
        self.codebook = IdCodebook(d, cfg.codebook_size)
        self.t_embed = TimestepEmbedder(d)
        self.cond_proj = nn.Linear(cfg.cond_grid * cfg.cond_grid, d, dtype=DTYPE)
        self.null_cond = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.local_blocks = nn.ModuleList(
            [
                LocalBlock(d, cfg.n_heads, cfg.latent_len, cfg.n_compressed)
                for _ in range(cfg.n_block_pairs)
            ]
        )
        self.global_blocks = nn.ModuleList(
            [GlobalBlock(cfg) for _ in range(cfg.n_block_pairs)]
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, dtype=DTYPE)
        self.final_modulation = nn.Sequential(
            nn.SiLU(), nn.Linear(d, 2 * d, dtype=DTYPE)
        )
        self.head = nn.Linear(d, cfg.d_latent, dtype=DTYPE)

    def init_weights(self, seed: int) -> None:
        """Deterministic init: xavier-uniform linears, zeroed modulations.

        All adaptive-modulation projections and the output head are set
        to zero, which makes every block the identity and the predicted
        velocity exactly zero on a fresh model.
        """
        g = torch.Generator().manual_seed(seed)

        def xavier(w: Tensor) -> None:
            fan_out, fan_in = w.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                w.copy_((torch.rand(w.shape, generator=g, dtype=DTYPE) * 2 - 1) * bound)

        for m in self.modules():
            if isinstance(m, nn.Linear):
                xavier(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for p in (self.queries.p, self.queries.p_bar, self.codebook.embeddings, self.null_cond):
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=g, dtype=DTYPE) * 0.02)
        zero_mods = [b.modulation[1] for b in self.local_blocks]
        zero_mods += [b.modulation[1] for b in self.global_blocks]
        zero_mods += [self.final_modulation[1], self.head]
        for lin in zero_mods:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    # ---------------------------------------------------------------- cond
    def encode_condition(self, layout: Tensor) -> Condition:
        """Embed a coarse occupancy grid [G, G] (or flat [G*G])."""
        flat = layout.to(DTYPE).reshape(-1)
        expect = self.cfg.cond_grid * self.cfg.cond_grid
        if flat.numel() != expect:
            raise ValueError(f"layout has {flat.numel()} cells, expected {expect}")
        return Condition(embedding=torch.nn.functional.gelu(self.cond_proj(flat)))

    def null_condition(self) -> Condition:
        return Condition(embedding=self.null_cond, is_null=True)

    def cfg_dropout(
        self, cond: Condition, p_drop: float, rng: torch.Generator
    ) -> Condition:
        """Replace the condition with the learned null with probability p_drop."""
        if not (0.0 <= p_drop <= 1.0):
            raise ValueError("p_drop must be in [0, 1]")
        if torch.rand((), generator=rng, dtype=DTYPE).item() < p_drop:
            return self.null_condition()
        return cond

    # ------------------------------------------------------------- forward
    def forward_with_trace(
        self,
        z_t: Tensor,
        t: Union[float, Tensor],
        cond: Optional[Condition] = None,
        *,
        rng: Optional[torch.Generator] = None,
        stochastic_routing: bool = False,
        id_indices: Optional[Sequence[int]] = None,
        routing: Optional[Sequence[Optional[RoutingDecision]]] = None,
    ) -> Tuple[Tensor, ForwardTrace]:
        cfg = self.cfg
        if z_t.ndim != 3 or z_t.shape[1] != cfg.latent_len or z_t.shape[2] != cfg.d_latent:
            raise ValueError(
                f"expected [N, {cfg.latent_len}, {cfg.d_latent}] latents, got {tuple(z_t.shape)}"
            )
        n = z_t.shape[0]
        if n > cfg.codebook_size:
            raise ValueError(
                f"component count exceeds ID codebook ({n} > {cfg.codebook_size})"
            )
        if not bool(torch.isfinite(z_t).all()):
            raise ValueError("non-finite input latents")
        t_val = float(t)
        if not (0.0 <= t_val <= 1.0):
            raise ValueError(f"t {t_val} outside [0, 1]")

        if id_indices is None:
            if rng is None:
                raise ValueError("need an RNG (or explicit id_indices) to assign IDs")
            id_indices = assign_id_embeddings(n, cfg.codebook_size, rng)
        else:
            id_indices = list(id_indices)
            if len(id_indices) != n or len(set(id_indices)) != n:
                raise ValueError("id_indices must be N distinct codebook rows")
        if routing is not None and len(routing) != cfg.n_block_pairs:
            raise ValueError("routing override must cover every global block")

        z = self.in_proj(z_t.to(DTYPE))
        x = pack_all(z, self.queries, self.packer)
        ids = torch.as_tensor(id_indices, dtype=torch.long)
        x = x + self.codebook.embeddings[ids].unsqueeze(1)

        cond = cond if cond is not None else self.null_condition()
        mod = self.t_embed(t_val) + cond.embedding

        trace = ForwardTrace(id_indices=list(id_indices))
        for i, (local, glob) in enumerate(zip(self.local_blocks, self.global_blocks)):
            x = local(x, mod)
            override = routing[i] if routing is not None else None
            x, decision = glob(
                x,
                mod,
                rng=rng,
                stochastic=stochastic_routing,
                routing_override=override,
            )
            trace.routing.append(decision)

        sh, sc = self.final_modulation(mod).chunk(2, dim=-1)
        z_out = modulate(self.final_norm(x[:, : cfg.latent_len, :]), sh, sc)
        return self.head(z_out), trace

    def forward(self, z_t, t, cond=None, **kwargs) -> Tensor:
        velocity, _ = self.forward_with_trace(z_t, t, cond, **kwargs)
        return velocity


def build_model(cfg: ModelConfig, seed: int = 0) -> CompositionalDiT:
    model = CompositionalDiT(cfg)
    model.init_weights(seed)
    return model


# ------------------------------------------------------------- checkpoints
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.f32"


def save_checkpoint(model: CompositionalDiT, out_dir: Union[str, Path]) -> Path:
    """Write a text manifest (name -> shape, byte offset) plus one blob.

    The blob is little-endian float32 in manifest order; the model
    config is embedded in the manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        data = p.detach().to(torch.float32).contiguous()
        raw = data.numpy().astype("<f4", copy=False).tobytes()
        tensors[name] = {"shape": list(p.shape), "offset": offset, "bytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "mocdit-checkpoint-v1",
        "dtype": "<f4",
        "config": model.cfg.to_dict(),
        "tensors": tensors,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out / BLOB_NAME).write_bytes(b"".join(chunks))
    return out


def load_checkpoint(
    ckpt_dir: Union[str, Path], expect_config: Optional[ModelConfig] = None
) -> Tuple[CompositionalDiT, ModelConfig]:
    """Rebuild the model from a manifest + blob checkpoint."""
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / MANIFEST_NAME).read_text())
    if manifest.get("format") != "mocdit-checkpoint-v1":
        raise ValueError(f"unrecognized checkpoint format in {ckpt}")
    cfg = ModelConfig.from_dict(manifest["config"])
    if expect_config is not None and expect_config != cfg:
        raise ValueError("checkpoint/config mismatch")
    model = CompositionalDiT(cfg)
    blob = (ckpt / BLOB_NAME).read_bytes()
    params = dict(model.named_parameters())
    if set(params) != set(manifest["tensors"]):
        raise ValueError("checkpoint/config mismatch: tensor names differ")
    for name, meta in manifest["tensors"].items():
        raw = blob[meta["offset"] : meta["offset"] + meta["bytes"]]
        flat = torch.frombuffer(bytearray(raw), dtype=torch.float32)
        value = flat.view(*meta["shape"]).to(DTYPE)
        if list(params[name].shape) != list(meta["shape"]):
            raise ValueError(f"checkpoint/config mismatch: shape of {name}")
        with torch.no_grad():
            params[name].copy_(value)
    return model, cfg
