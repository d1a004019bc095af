"""Scaling benchmark: routed-context attention vs a dense global baseline.

For a grid of (N, L, k, sigma, D, H) the harness times three phases on
identical random inputs: the per-component local attention, the
routing procedure (anchor projections, scores, top-k; routed method
only), and the global attention. The dense baseline shares the local
attention and differs only in its global phase, which attends over the
concatenation of all components' vecset tokens (N*L keys), so the
comparison isolates the context-length mechanism. Medians over
repeats are reported with the interquartile range as dispersion;
benchmarks run single-threaded by default to stabilize timings.

FLOP accounting (multiply-add = 2 FLOPs), documented here and used by
:func:`flop_estimate`:
  dense global: scores + weighted sum = 2 * (N*L)^2 * D * 2
  routed global: 2 * N * (L + N_p + 1) * L_global * D * 2
    (every token of a component queries its L_global-key context)
  routing: 2 * (2 * N * D^2) projections + 2 * N^2 * D scores.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch

from .local_block import MaskedSelfAttention, build_local_mask
from .moc_attention import CostModel, MoCAttention, context_length
from .moc_router import ComponentRouter, route_deterministic
from .numerics import DTYPE


@dataclass
class GridPoint:
    n: int
    L: int
    k: int
    sigma: int
    d_model: int = 64
    n_heads: int = 4


@dataclass
class BenchRow:
    method: str  # "moc" | "dense"
    n: int
    L: int
    k: int
    sigma: int
    d_model: int
    n_heads: int
    kv_length: int
    flops_global_block: int
    wall_ms_local: float
    wall_ms_routing: float
    wall_ms_global: float
    wall_ms_total: float
    repeats: int
    dispersion: float  # IQR of the global-attention times, ms
    timer_warning: bool = False


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps([asdict(r) for r in self.rows], indent=1))

    def to_csv(self, path: Union[str, Path]) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        names = list(asdict(self.rows[0]).keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(asdict(r))

    def global_ratio_by_n(self) -> List[Tuple[int, float]]:
        """moc/dense global-attention wall-time ratio per N, ascending."""
        moc = {r.n: r.wall_ms_global for r in self.rows if r.method == "moc"}
        dense = {r.n: r.wall_ms_global for r in self.rows if r.method == "dense"}
        return [(n, moc[n] / dense[n]) for n in sorted(moc) if n in dense]

    def to_gnuplot(self, path: Union[str, Path]) -> None:
        """Ratio-vs-N data file: N, moc ms, dense ms, ratio."""
        moc = {r.n: r.wall_ms_global for r in self.rows if r.method == "moc"}
        dense = {r.n: r.wall_ms_global for r in self.rows if r.method == "dense"}
        lines = ["# N moc_global_ms dense_global_ms ratio"]
        for n in sorted(moc):
            if n in dense:
                lines.append(
                    f"{n} {moc[n]:.6f} {dense[n]:.6f} {moc[n] / dense[n]:.6f}"
                )
        Path(path).write_text("\n".join(lines) + "\n")


def flop_estimate(
    n: int, L: int, k: int, sigma: int, d_model: int, n_heads: int
) -> Tuple[int, int]:
    """(routed, dense) global-attention FLOPs per the documented formula."""
    cost = CostModel(n=n, L=L, k=k, sigma=sigma, d_model=d_model, n_heads=n_heads)
    moc = cost.attention_flops() + (cost.routing_flops() if n > 1 else 0)
    dense = 4 * (n * L) ** 2 * d_model
    return moc, dense


def _timer_resolution_ns() -> int:
    res = None
    for _ in range(200):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        d = b - a
        res = d if res is None else min(res, d)
    return int(res)


def _time_phase(fn, repeats: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        t1 = time.perf_counter_ns()
        times.append((t1 - t0) / 1e6)
    return times


def _median(xs: Sequence[float]) -> float:
    s = sorted(xs)
    m = len(s) // 2
    return s[m] if len(s) % 2 else 0.5 * (s[m - 1] + s[m])


def _iqr(xs: Sequence[float]) -> float:
    s = sorted(xs)
    q1 = s[max(0, len(s) // 4)]
    q3 = s[min(len(s) - 1, (3 * len(s)) // 4)]
    return q3 - q1


def measured_kv_length(attn: MoCAttention, n: int, routing) -> int:
    """Key count actually gathered by the routed attention forward."""
    sel_mask, _ = attn._selection_mask(n, routing)
    idx, _, _ = attn._context_indices(n, sel_mask)
    return idx.shape[-1]


def bench_attention(
    grid: Sequence[GridPoint],
    repeats: int = 9,
    warmup: int = 2,
    parallel: bool = False,
    seed: int = 0,
) -> BenchReport:
    """Time local / routing / global phases for both methods per grid point."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    if warmup < 2:
        raise ValueError("warmup must be >= 2")
    old_threads = torch.get_num_threads()
    if not parallel:
        torch.set_num_threads(1)
    res_ns = _timer_resolution_ns()
    report = BenchReport()
    try:
        for gp in grid:
            rng = torch.Generator().manual_seed(seed)
            n, L, d = gp.n, gp.L, gp.d_model
            np_ = math.ceil(L / gp.sigma)
            t = L + np_ + 1
            x = torch.randn(n, t, d, generator=rng, dtype=DTYPE)
            z_flat = x[:, :L, :].reshape(1, n * L, d)

            local = MaskedSelfAttention(d, gp.n_heads).to(DTYPE)
            local_mask = build_local_mask(L, np_)
            router = ComponentRouter(d, gp.n_heads)
            moc = MoCAttention(d, gp.n_heads, L, np_)
            dense_attn = MaskedSelfAttention(d, gp.n_heads).to(DTYPE)

            anchors = x[:, -1, :]
            importance = router(anchors)
            routing = route_deterministic(importance, gp.k) if n > 1 else None

            with torch.no_grad():
                t_local = _time_phase(lambda: local(x, local_mask), repeats, warmup)
                t_route = _time_phase(
                    lambda: route_deterministic(router(x[:, -1, :]), gp.k)
                    if n > 1
                    else router(x[:, -1, :]),
                    repeats,
                    warmup,
                )
                t_moc = _time_phase(
                    lambda: moc(x, importance, routing), repeats, warmup
                )
                t_dense_local = _time_phase(
                    lambda: local(x[:, :L, :]), repeats, warmup
                )
                t_dense = _time_phase(lambda: dense_attn(z_flat), repeats, warmup)

            moc_flops, dense_flops = flop_estimate(
                n, L, gp.k, gp.sigma, d, gp.n_heads
            )
            kv_moc = measured_kv_length(moc, n, routing)
            if kv_moc != context_length(n, L, min(gp.k, n - 1), gp.sigma) and n > 1:
                raise AssertionError(
                    f"measured KV length {kv_moc} disagrees with the formula"
                )
            med = {
                "local": _median(t_local),
                "route": _median(t_route),
                "moc": _median(t_moc),
                "dense_local": _median(t_dense_local),
                "dense": _median(t_dense),
            }
            warn = any(
                res_ns > 0.01 * m * 1e6 for m in med.values() if m > 0
            )
            report.rows.append(
                BenchRow(
                    method="moc",
                    n=n,
                    L=L,
                    k=gp.k,
                    sigma=gp.sigma,
                    d_model=d,
                    n_heads=gp.n_heads,
                    kv_length=kv_moc,
                    flops_global_block=moc_flops,
                    wall_ms_local=med["local"],
                    wall_ms_routing=med["route"],
                    wall_ms_global=med["moc"],
                    wall_ms_total=med["local"] + med["route"] + med["moc"],
                    repeats=repeats,
                    dispersion=_iqr(t_moc),
                    timer_warning=warn,
                )
            )
            report.rows.append(
                BenchRow(
                    method="dense",
                    n=n,
                    L=L,
                    k=gp.k,
                    sigma=gp.sigma,
                    d_model=d,
                    n_heads=gp.n_heads,
                    kv_length=n * L,
                    flops_global_block=dense_flops,
                    wall_ms_local=med["dense_local"],
                    wall_ms_routing=0.0,
                    wall_ms_global=med["dense"],
                    wall_ms_total=med["dense_local"] + med["dense"],
                    repeats=repeats,
                    dispersion=_iqr(t_dense),
                    timer_warning=warn,
                )
            )
    finally:
        torch.set_num_threads(old_threads)
    return report


def default_grid(
    ns: Sequence[int] = (4, 8, 16, 32),
    L: int = 256,
    sigma: int = 8,
    d_model: int = 64,
    n_heads: int = 4,
    k_fraction: float = 0.25,
) -> List[GridPoint]:
    from .moc_router import k_from_fraction

    return [
        GridPoint(
            n=n,
            L=L,
            k=max(1, k_from_fraction(n, k_fraction)),
            sigma=sigma,
            d_model=d_model,
            n_heads=n_heads,
        )
        for n in ns
    ]
