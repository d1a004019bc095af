"""Single executable: dataset generation, training, sampling, eval, bench.

Subcommands: gen-data, train, sample, eval, ablate, bench. Every run
is driven by a JSON config (nested key/value) plus repeatable
``--set key=value`` dotted overrides; unknown keys are usage errors.
A training run directory contains the resolved config, a step/loss
metrics log, and a manifest+blob checkpoint, and is reproducible from
its config and seed. Exit codes: 0 ok, 1 usage, 2 runtime failure.
Set MOCDIT_THREADS to pin the torch CPU thread count.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .bench import BenchReport, GridPoint, bench_attention, default_grid
from .dit_model import (
    CompositionalDiT,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .rectified_flow import fm_loss, make_flow_batch, sample
from .synth_compose import (
    LAYOUT_GRID,
    SceneRecord,
    ToyPointCodec,
    chamfer,
    fscore,
    gen_scene,
    read_scenes,
    self_iou,
    write_scenes,
)

DEFAULT_CONFIG: Dict = {
    "seed": 0,
    "out": "runs/default",
    "model": {"d_model": 64, "n_heads": 4, "n_block_pairs": 4, "d_latent": 8},
    "data": {
        "n_components": 4,
        "latent_len": 32,
        "dim": 2,
        "n_train_scenes": 128,
        "n_eval_scenes": 8,
        "train_seed_base": 1000,
        "eval_seed_base": 900000,
        "codec_seed": 7,
    },
    "router": {
        "k_fraction": 0.25,
        "activation": "sigmoid",
        "multi_head": True,
        "load_balance": True,
    },
    "moc": {
        "sigma": 8,
        "gate_target": "key",
        "use_compressed_context": True,
        "use_routing": True,
    },
    "flow": {"steps": 50, "cfg_scale": 4.0, "cond_dropout": 0.1},
    "train": {
        "steps": 2000,
        "scenes_per_step": 8,
        "lr": 1e-3,
        "lr_schedule": "constant",  # "constant" | "cosine"
        "lr_min": 1e-4,
        "weight_decay": 1e-4,
        "grad_clip": 1.0,
        "log_every": 10,
    },
}


class UsageError(Exception):
    pass


class RunConfig:
    """Nested, fully serializable run configuration."""

    def __init__(self, values: Optional[Dict] = None):
        self.values = copy.deepcopy(DEFAULT_CONFIG)
        if values:
            self._merge(self.values, values, path="")

    def _merge(self, base: Dict, extra: Dict, path: str) -> None:
        for key, val in extra.items():
            full = f"{path}{key}"
            if key not in base:
                raise UsageError(f"unknown config key: {full}")
            if isinstance(base[key], dict):
                if not isinstance(val, dict):
                    raise UsageError(f"config key {full} expects a section")
                self._merge(base[key], val, path=full + ".")
            else:
                base[key] = val

    @classmethod
    def load(cls, path: Optional[str], sets: Sequence[str] = ()) -> "RunConfig":
        values = {}
        if path:
            try:
                values = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise UsageError(f"config file not found: {path}")
            except json.JSONDecodeError as e:
                raise UsageError(f"config file {path} is not valid JSON: {e}")
        cfg = cls(values)
        for item in sets:
            cfg.set_dotted(item)
        return cfg

    def set_dotted(self, assignment: str) -> None:
        if "=" not in assignment:
            raise UsageError(f"--set expects key=value, got {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = self.values
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise UsageError(f"unknown config key: {dotted}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise UsageError(f"unknown config key: {dotted}")
        if isinstance(node[leaf], dict):
            raise UsageError(f"config key {dotted} is a section, not a value")
        node[leaf] = value

    def __getitem__(self, key: str):
        return self.values[key]

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.values, indent=1, sort_keys=True))

    def model_config(self) -> ModelConfig:
        m, d, r, mo = (
            self.values["model"],
            self.values["data"],
            self.values["router"],
            self.values["moc"],
        )
        return ModelConfig(
            d_model=m["d_model"],
            n_heads=m["n_heads"],
            n_block_pairs=m["n_block_pairs"],
            latent_len=d["latent_len"],
            d_latent=m["d_latent"],
            sigma=mo["sigma"],
            k_fraction=r["k_fraction"],
            cond_grid=LAYOUT_GRID,
            router_activation=r["activation"],
            gate_target=mo["gate_target"],
            load_balance=r["load_balance"],
            multi_head_routing=r["multi_head"],
            use_routing=mo["use_routing"],
            use_compressed_context=mo["use_compressed_context"],
        )


# ------------------------------------------------------------------- data
def scene_records(
    data_cfg: Dict, which: str
) -> List[SceneRecord]:
    """Regenerate train or eval scenes deterministically from seeds."""
    base = data_cfg[f"{which}_seed_base"]
    count = data_cfg[f"n_{which}_scenes"]
    records = []
    for i in range(count):
        seed = base + i
        rng = torch.Generator().manual_seed(seed)
        points, spec = gen_scene(
            rng, data_cfg["n_components"], data_cfg["latent_len"], data_cfg["dim"]
        )
        records.append(
            SceneRecord(points=points, layout=spec.layout, seed=seed, dim=data_cfg["dim"])
        )
    return records


def encode_records(
    records: Sequence[SceneRecord], codec: ToyPointCodec
) -> List[torch.Tensor]:
    return [
        torch.stack([codec.encode(p) for p in rec.points], dim=0) for rec in records
    ]


# ------------------------------------------------------------------ train
def train_run(cfg: RunConfig, out_dir: Path) -> Tuple[CompositionalDiT, List[float]]:
    data_cfg, train_cfg, flow_cfg = cfg["data"], cfg["train"], cfg["flow"]
    mc = cfg.model_config()
    model = build_model(mc, seed=cfg["seed"])
    codec = ToyPointCodec(mc.d_latent, data_cfg["dim"], seed=data_cfg["codec_seed"])
    records = scene_records(data_cfg, "train")
    latents = encode_records(records, codec)

    opt = torch.optim.AdamW(
        model.parameters(), lr=train_cfg["lr"], weight_decay=train_cfg["weight_decay"]
    )
    rng = torch.Generator().manual_seed(cfg["seed"] + 1)
    losses: List[float] = []
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.csv"
    per_step = max(1, int(train_cfg.get("scenes_per_step", 1)))
    schedule = train_cfg.get("lr_schedule", "constant")
    if schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr_schedule {schedule!r}")
    with open(log_path, "w") as log:
        log.write("step,loss\n")
        cursor = 0
        for step in range(1, train_cfg["steps"] + 1):
            if schedule == "cosine":
                span = train_cfg["lr"] - train_cfg["lr_min"]
                frac = step / train_cfg["steps"]
                lr = train_cfg["lr_min"] + 0.5 * span * (1 + math.cos(math.pi * frac))
                for group in opt.param_groups:
                    group["lr"] = lr
            opt.zero_grad()
            step_loss = 0.0
            # One optimizer step accumulates gradients over several
            # scenes; each scene draws its own t and condition dropout.
            for _ in range(per_step):
                idx = cursor % len(records)
                cursor += 1
                cond = model.encode_condition(records[idx].layout)
                cond = model.cfg_dropout(cond, flow_cfg["cond_dropout"], rng)
                batch = make_flow_batch(
                    latents[idx], rng, cond=cond, dropped=cond.is_null
                )
                pred = model(
                    batch.z_t,
                    batch.t,
                    batch.condition,
                    rng=rng,
                    stochastic_routing=mc.load_balance,
                )
                loss = fm_loss(pred, batch.target)
                (loss / per_step).backward()
                step_loss += loss.item() / per_step
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg["grad_clip"])
            opt.step()
            losses.append(step_loss)
            if step % train_cfg["log_every"] == 0 or step == train_cfg["steps"]:
                log.write(f"{step},{step_loss:.12g}\n")
    cfg.save(out_dir / "config.json")
    save_checkpoint(model, out_dir / "checkpoint")
    return model, losses


# ------------------------------------------------------------------- eval
def evaluate_scenes(
    gen: Sequence[SceneRecord], ref: Sequence[SceneRecord]
) -> Dict[str, float]:
    """Average fused-point CD / F-scores and generated self-IoU."""
    if len(gen) != len(ref):
        raise ValueError(f"scene count mismatch: {len(gen)} vs {len(ref)}")
    sums = {"cd": 0.0, "fscore_0.1": 0.0, "fscore_0.05": 0.0, "self_iou": 0.0}
    for g, r in zip(gen, ref):
        fused_g = torch.cat(g.points, dim=0)
        fused_r = torch.cat(r.points, dim=0)
        sums["cd"] += chamfer(fused_g, fused_r)
        sums["fscore_0.1"] += fscore(fused_g, fused_r, 0.1)
        sums["fscore_0.05"] += fscore(fused_g, fused_r, 0.05)
        sums["self_iou"] += self_iou(g.points)
    return {k: v / len(gen) for k, v in sums.items()}


def sample_records(
    model: CompositionalDiT,
    cfg: RunConfig,
    refs: Sequence[SceneRecord],
    seed: int,
) -> List[SceneRecord]:
    """Sample one scene per reference layout and decode to point sets."""
    data_cfg, flow_cfg = cfg["data"], cfg["flow"]
    codec = ToyPointCodec(
        model.cfg.d_latent, data_cfg["dim"], seed=data_cfg["codec_seed"]
    )
    out = []
    for i, ref in enumerate(refs):
        rng = torch.Generator().manual_seed(seed + i)
        cond = model.encode_condition(ref.layout)
        z = sample(
            model,
            ref.n,
            flow_cfg["steps"],
            cond,
            flow_cfg["cfg_scale"],
            rng,
        )
        points = [codec.decode(z[c]) for c in range(ref.n)]
        out.append(
            SceneRecord(points=points, layout=ref.layout, seed=seed + i, dim=ref.dim)
        )
    return out


ABLATIONS: List[Tuple[str, Dict[str, object]]] = [
    ("A", {"moc.use_routing": False}),
    ("B", {"moc.use_compressed_context": False}),
    ("C", {"moc.gate_target": "value"}),
    ("D", {"router.activation": "softmax"}),
    ("E", {"router.load_balance": False}),
    ("F", {"router.multi_head": False}),
    ("G", {}),
]


def run_ablations(cfg: RunConfig, out_dir: Path) -> List[Dict[str, object]]:
    """Train and evaluate the seven ablation configurations in sequence."""
    rows: List[Dict[str, object]] = []
    for label, mods in ABLATIONS:
        sub = RunConfig(copy.deepcopy(cfg.values))
        for key, value in mods.items():
            sub.set_dotted(f"{key}={json.dumps(value)}")
        sub_dir = out_dir / f"ablate_{label}"
        model, losses = train_run(sub, sub_dir)
        refs = scene_records(sub["data"], "eval")
        gen = sample_records(model, sub, refs, seed=sub["seed"] + 500)
        metrics = evaluate_scenes(gen, refs)
        row: Dict[str, object] = {"config": label, "final_loss": losses[-1]}
        row.update(metrics)
        rows.append(row)
    return rows


# -------------------------------------------------------------------- cli
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override output path")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, repeatable",
    )


def _resolved(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    if args.out is not None:
        cfg.values["out"] = args.out
    return cfg


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for which in ("train", "eval"):
        records = scene_records(cfg["data"], which)
        write_scenes(out / f"{which}_scenes.bin", records)
        print(f"wrote {len(records)} {which} scenes to {out / f'{which}_scenes.bin'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    out = Path(cfg["out"])
    _, losses = train_run(cfg, out)
    print(f"trained {len(losses)} steps; final loss {losses[-1]:.6g}; run dir {out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    if args.steps is not None:
        cfg.values["flow"]["steps"] = args.steps
    if args.cfg_scale is not None:
        cfg.values["flow"]["cfg_scale"] = args.cfg_scale
    model, _ = load_checkpoint(args.ckpt)
    refs = scene_records(cfg["data"], "eval")
    gen = sample_records(model, cfg, refs, seed=cfg["seed"] + 500)
    out = Path(args.out_file or Path(cfg["out"]) / "samples.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scenes(out, gen)
    print(f"wrote {len(gen)} sampled scenes to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    gen = read_scenes(args.gen)
    ref = read_scenes(args.ref)
    metrics = evaluate_scenes(gen, ref)
    line = json.dumps(metrics, indent=1, sort_keys=True)
    print(line)
    if args.out_file:
        Path(args.out_file).write_text(line)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablations(cfg, out)
    names = list(rows[0].keys())
    table_path = out / "ablate.csv"
    with open(table_path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in names) + "\n")
    print(" ".join(f"{c:>12}" for c in names))
    for row in rows:
        print(" ".join(f"{_fmt(row[c]):>12}" for c in names))
    print(f"wrote {table_path}")
    return 0


def _fmt(v) -> str:
    return f"{v:.5g}" if isinstance(v, float) else str(v)


def cmd_bench(args: argparse.Namespace) -> int:
    if args.grid:
        spec = json.loads(Path(args.grid).read_text())
        grid = [GridPoint(**point) for point in spec]
    else:
        grid = default_grid()
    report = bench_attention(
        grid, repeats=args.repeats, warmup=args.warmup, parallel=args.parallel
    )
    out = Path(args.out_file or "bench_report.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    report.to_json(out.with_suffix(".json"))
    report.to_gnuplot(out.with_suffix(".dat"))
    for n, ratio in report.global_ratio_by_n():
        print(f"N={n:3d}  moc/dense global-attention ratio {ratio:.3f}")
    print(f"wrote {out}, {out.with_suffix('.json')}, {out.with_suffix('.dat')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mocdit",
        description="Compositional flow-matching trainer with routed global attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/eval scene files")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, write a run directory")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample scenes from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, help="Euler steps")
    p.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    p.add_argument("--out-file", dest="out_file", help="output scene file")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="compare generated vs reference scene files")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out-file", dest="out_file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the seven ablation configs A..G")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="attention scaling benchmark")
    p.add_argument("--grid", help="JSON grid file")
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--parallel", action="store_true", help="keep torch threads")
    p.add_argument("--out", dest="out_file", help="CSV output path")
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    threads = os.environ.get("MOCDIT_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
