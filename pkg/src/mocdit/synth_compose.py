"""Synthetic compositional point-set scenes, a toy latent codec, and metrics.

Scenes place N primitive components (box, ball, or ring) on a coarse
G x G layout grid with disjoint, gapped bounding regions; the grid
occupancy doubles as the conditioning signal. A fixed seeded
orthogonal lift stands in for a frozen shape VAE: it maps each point
(plus a random tag that fills the remaining latent width) to a latent
vector and inverts exactly on the coordinate subspace. Evaluation
metrics are symmetric Chamfer distance, F-score at a distance
threshold, and mean pairwise voxel IoU between components
("self-IoU", which measures unwanted interpenetration).

Scene files: consecutive records, each
  u32 N, u32 L, u32 dim, u64 seed, u32 G   (little-endian header)
  G*G float32   layout occupancy, row-major
  N*L*dim float32   coordinates, component-major.
Regenerating scenes from their seeds is the canonical path; files are
the exchange format between the CLI stages.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch
from torch import Tensor

from .numerics import DTYPE

LAYOUT_GRID = 8
SHAPE_KINDS = ("box", "ball", "ring")


@dataclass
class ComponentShape:
    kind: str
    center: Tuple[float, ...]
    extent: float


@dataclass
class SceneSpec:
    n: int
    dim: int
    shapes: List[ComponentShape] = field(default_factory=list)
    layout: Optional[Tensor] = None  # [G, G] occupancy
    seed: Optional[int] = None


def _cell_center(a: int, grid: int = LAYOUT_GRID) -> float:
    return -1.0 + (a + 0.5) * (2.0 / grid)


def gen_scene(
    rng: torch.Generator, n: int, L: int, dim: int
) -> Tuple[List[Tensor], SceneSpec]:
    """Generate N disjoint components of L points each in [-1, 1]^dim.

    Component centers snap (with a small jitter) to layout-grid cells;
    up to 16 components use every other cell so neighbouring bounding
    boxes keep a gap of at least ~0.14, beyond that all 64 cells are
    used with smaller extents. Placement is rejection sampling over
    cells; more than 1000 collisions raise.
    """
    if not (2 <= n <= 50):
        raise ValueError(f"N must be in [2, 50], got {n}")
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    if L < 1:
        raise ValueError("L must be >= 1")
    grid = LAYOUT_GRID
    if n <= 16:
        cells = [(a, b) for a in range(0, grid, 2) for b in range(0, grid, 2)]
        ext_lo, ext_hi, jitter = 0.08, 0.13, 0.02
    else:
        cells = [(a, b) for a in range(grid) for b in range(grid)]
        ext_lo, ext_hi, jitter = 0.035, 0.055, 0.005

    taken: set = set()
    rejections = 0
    shapes: List[ComponentShape] = []
    points: List[Tensor] = []
    layout = torch.zeros(grid, grid, dtype=DTYPE)
    while len(shapes) < n:
        cell = cells[int(torch.randint(len(cells), (1,), generator=rng))]
        if cell in taken:
            rejections += 1
            if rejections > 1000:
                raise ValueError("scene too crowded")
            continue
        taken.add(cell)
        extent = float(
            ext_lo + (ext_hi - ext_lo) * torch.rand((), generator=rng, dtype=DTYPE)
        )
        # Clamp so the bounding box stays inside [-1, 1]; edge cells sit
        # only 0.125 from the boundary.
        reach = 1.0 - extent - 1e-3
        center = [
            max(-reach, min(reach,
                _cell_center(cell[0], grid)
                + float((torch.rand((), generator=rng, dtype=DTYPE) * 2 - 1) * jitter))),
            max(-reach, min(reach,
                _cell_center(cell[1], grid)
                + float((torch.rand((), generator=rng, dtype=DTYPE) * 2 - 1) * jitter))),
        ]
        if dim == 3:
            center.append(
                float((torch.rand((), generator=rng, dtype=DTYPE) * 2 - 1) * 0.5)
            )
        kind = SHAPE_KINDS[int(torch.randint(len(SHAPE_KINDS), (1,), generator=rng))]
        shapes.append(ComponentShape(kind=kind, center=tuple(center), extent=extent))
        points.append(_sample_shape(kind, center, extent, L, dim, rng))
        _mark_layout(layout, center, extent, grid)
    spec = SceneSpec(n=n, dim=dim, shapes=shapes, layout=layout)
    return points, spec


def _sample_shape(
    kind: str, center: Sequence[float], extent: float, L: int, dim: int,
    rng: torch.Generator,
) -> Tensor:
    c = torch.tensor(center, dtype=DTYPE)
    if kind == "box":
        pts = (torch.rand(L, dim, generator=rng, dtype=DTYPE) * 2 - 1) * extent
    else:
        direction = torch.randn(L, dim, generator=rng, dtype=DTYPE)
        direction = direction / direction.norm(dim=1, keepdim=True).clamp_min(1e-12)
        u = torch.rand(L, 1, generator=rng, dtype=DTYPE)
        if kind == "ball":
            radius = extent * u ** (1.0 / dim)
        elif kind == "ring":
            radius = extent * (0.7 + 0.3 * u)
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
        pts = direction * radius
    return pts + c


def _mark_layout(
    layout: Tensor, center: Sequence[float], extent: float, grid: int
) -> None:
    """Mark every cell the component's xy bounding box overlaps."""
    cell_w = 2.0 / grid
    lo_r = max(0, int(math.floor((center[0] - extent + 1.0) / cell_w)))
    hi_r = min(grid - 1, int(math.floor((center[0] + extent + 1.0) / cell_w)))
    lo_c = max(0, int(math.floor((center[1] - extent + 1.0) / cell_w)))
    hi_c = min(grid - 1, int(math.floor((center[1] + extent + 1.0) / cell_w)))
    layout[lo_r : hi_r + 1, lo_c : hi_c + 1] = 1.0


def fps(points: Tensor, n: int, start_index: int = 0) -> Tensor:
    """Greedy max-min farthest point sampling; returns n selected points."""
    total = points.shape[0]
    if n > total:
        raise ValueError(f"cannot sample {n} points from {total}")
    if not (0 <= start_index < total):
        raise ValueError("start_index out of range")
    selected = [start_index]
    dists = (points - points[start_index]).norm(dim=1)
    for _ in range(n - 1):
        nxt = int(torch.argmax(dists))
        selected.append(nxt)
        dists = torch.minimum(dists, (points - points[nxt]).norm(dim=1))
    return points[selected]


class ToyPointCodec:
    """Fixed orthogonal lift standing in for a frozen shape VAE.

    encode maps each point row (coords, tag) through an orthogonal
    basis; decode applies the transpose and keeps the coordinate
    columns, so round trips reproduce coordinates to machine
    precision. The tag stream is itself seeded, making encode a pure
    function. Per-point behaviour: token i depends only on point i.
    """

    def __init__(self, d_latent: int, dim: int, seed: int = 7):
        if d_latent <= dim:
            raise ValueError("d_latent must exceed the point dimension")
        self.d_latent = d_latent
        self.dim = dim
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        a = torch.randn(d_latent, d_latent, generator=g, dtype=DTYPE)
        q, _ = torch.linalg.qr(a)
        self.basis = q  # [d_latent, d_latent], orthogonal

    def encode(self, points: Tensor, rng: Optional[torch.Generator] = None) -> Tensor:
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise ValueError(f"expected [L, {self.dim}] points")
        if rng is None:
            rng = torch.Generator().manual_seed(self.seed + 1)
        tags = torch.randn(
            points.shape[0], self.d_latent - self.dim, generator=rng, dtype=DTYPE
        )
        aug = torch.cat([points.to(DTYPE), tags], dim=1)
        return aug @ self.basis

    def decode(self, latents: Tensor) -> Tensor:
        if latents.ndim != 2 or latents.shape[1] != self.d_latent:
            raise ValueError(f"expected [L, {self.d_latent}] latents")
        return (latents @ self.basis.T)[:, : self.dim]


# ----------------------------------------------------------------- metrics
def chamfer(a: Tensor, b: Tensor) -> float:
    """Symmetric Chamfer distance with L2 (not squared) point distances."""
    if a.numel() == 0 or b.numel() == 0:
        raise ValueError("chamfer of empty point set")
    d = torch.cdist(a.to(DTYPE), b.to(DTYPE))
    return 0.5 * (d.min(dim=1).values.mean() + d.min(dim=0).values.mean()).item()


def fscore(a: Tensor, b: Tensor, tau: float) -> float:
    """F-score at distance threshold tau; 0 when precision+recall = 0."""
    if a.numel() == 0 or b.numel() == 0:
        raise ValueError("fscore of empty point set")
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = torch.cdist(a.to(DTYPE), b.to(DTYPE))
    precision = (d.min(dim=1).values <= tau).to(DTYPE).mean().item()
    recall = (d.min(dim=0).values <= tau).to(DTYPE).mean().item()
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _voxel_set(points: Tensor, resolution: int, dim: int) -> set:
    """Linear voxel indices of in-range points on a grid over [-1, 1]^dim."""
    inside = (points.abs() <= 1.0).all(dim=1)
    pts = points[inside]
    if pts.shape[0] == 0:
        raise ValueError("component voxelizes to the empty set")
    cells = ((pts + 1.0) * (resolution / 2.0)).floor().long().clamp(0, resolution - 1)
    lin = cells[:, 0]
    for axis in range(1, dim):
        lin = lin * resolution + cells[:, axis]
    return set(lin.tolist())


def self_iou(
    components: Sequence[Tensor], resolution: Optional[int] = None
) -> float:
    """Mean pairwise voxel IoU between components.

    Default resolution: 256 for 2-D scenes, 64 for 3-D.
    """
    if len(components) < 2:
        raise ValueError("self_iou needs at least two components")
    dim = components[0].shape[1]
    if resolution is None:
        resolution = 256 if dim == 2 else 64
    voxels = [_voxel_set(c, resolution, dim) for c in components]
    total = 0.0
    pairs = 0
    for i in range(len(voxels)):
        for j in range(i + 1, len(voxels)):
            inter = len(voxels[i] & voxels[j])
            union = len(voxels[i] | voxels[j])
            total += inter / union
            pairs += 1
    return total / pairs


# ----------------------------------------------------------------- file io
_HEADER = struct.Struct("<IIIQI")


@dataclass
class SceneRecord:
    """One scene as stored on disk."""

    points: List[Tensor]
    layout: Tensor
    seed: int
    dim: int

    @property
    def n(self) -> int:
        return len(self.points)


def write_scenes(path: Union[str, Path], records: Sequence[SceneRecord]) -> None:
    buf = bytearray()
    for rec in records:
        n = len(rec.points)
        L = rec.points[0].shape[0]
        grid = rec.layout.shape[0]
        buf += _HEADER.pack(n, L, rec.dim, rec.seed, grid)
        buf += rec.layout.to(torch.float32).numpy().astype("<f4").tobytes()
        coords = torch.stack([p.to(torch.float32) for p in rec.points])
        buf += coords.numpy().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_scenes(path: Union[str, Path]) -> List[SceneRecord]:
    raw = Path(path).read_bytes()
    records: List[SceneRecord] = []
    pos = 0
    while pos < len(raw):
        n, L, dim, seed, grid = _HEADER.unpack_from(raw, pos)
        pos += _HEADER.size
        layout_count = grid * grid
        layout = torch.frombuffer(
            bytearray(raw[pos : pos + 4 * layout_count]), dtype=torch.float32
        ).view(grid, grid).to(DTYPE)
        pos += 4 * layout_count
        coord_count = n * L * dim
        coords = torch.frombuffer(
            bytearray(raw[pos : pos + 4 * coord_count]), dtype=torch.float32
        ).view(n, L, dim).to(DTYPE)
        pos += 4 * coord_count
        records.append(
            SceneRecord(points=list(coords), layout=layout, seed=seed, dim=dim)
        )
    return records
