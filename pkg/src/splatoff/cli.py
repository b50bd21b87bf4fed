"""splatoff command line: generate, analyze, plan, simulate, train, compare.

Every subcommand writes a manifest.json into its output directory echoing the
resolved configuration, the seed, and digests of the files it produced, so a
run can be reproduced from its manifest alone.

Exit codes: 0 success, 2 configuration error, 3 device capacity error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, report
from .culling import cull, sparsity_stats
from .ordering import ORDER_STRATEGIES, finalization_schedule, order_views
from .render import RenderConfig
from .scene import SceneSpec, generate_synthetic_scene
from .sim import DEFAULT_COST_MODEL, adam_trailing_time, metrics, simulate
from .trainer import AdamState, ArenaCounters, CapacityError, synth_targets, train_batch
from .transfer import naive_offload_volume, plan_batch, volume


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, config: dict, outputs: list[Path]) -> None:
    payload = {
        "tool": "splatoff",
        "version": __version__,
        "command": command,
        "config": config,
        "outputs": {p.name: io.file_digest(p) for p in outputs if p.exists()},
    }
    io.write_json(payload, out / "manifest.json")


def _batch_views(scene, batch: int):
    if batch < 1:
        raise ValueError("batch size must be at least 1")
    if batch > len(scene.views):
        raise ValueError(f"batch {batch} exceeds the scene's {len(scene.views)} views")
    return scene.views[:batch]


def _ordered_plans(scene, batch: int, strategy: str, k: float, seed: int, budget_s: float):
    views = _batch_views(scene, batch)
    sets = [cull(scene, v, k=k) for v in views]
    order = order_views(sets, strategy, views, rng_seed=seed, budget=budget_s,
                        aabb=(scene.aabb_min, scene.aabb_max))
    ordered_sets = [sets[i] for i in order]
    schedule = finalization_schedule(ordered_sets, scene.n)
    plans = plan_batch(ordered_sets, schedule)
    return views, sets, order, schedule, plans


# ------------------------------------------------------------- subcommands

def cmd_gen_scene(args) -> int:
    import json

    fields = {}
    if args.spec:
        fields.update(json.loads(Path(args.spec).read_text()))
    if args.n is not None:
        fields["n_gaussians"] = args.n
    if args.views is not None:
        fields["n_views"] = args.views
    if args.width is not None:
        fields["width"] = args.width
    if args.height is not None:
        fields["height"] = args.height
    if args.camera_path is not None:
        fields["camera_path"] = args.camera_path
    if args.box is not None:
        fields["box_min"] = tuple(args.box[:3])
        fields["box_max"] = tuple(args.box[3:])
    if "box_min" in fields:
        fields["box_min"] = tuple(fields["box_min"])
        fields["box_max"] = tuple(fields["box_max"])
    if "n_gaussians" not in fields:
        raise ValueError("gen-scene needs --n or a spec file with n_gaussians")

    spec = SceneSpec(**fields)
    scene = generate_synthetic_scene(spec, seed=args.seed)
    out = _outdir(args.out)
    json_path = io.save_scene(scene, out)
    config = {"spec": {**fields, "box_min": list(spec.box_min), "box_max": list(spec.box_max)},
              "seed": args.seed}
    _manifest(out, "gen-scene", config, [json_path, out / "scene.bin"])
    print(f"scene: {scene.n} Gaussians, {len(scene.views)} views -> {json_path}")
    return 0


def cmd_analyze(args) -> int:
    scene = io.load_scene(args.scene)
    sets = [cull(scene, v, k=args.k) for v in scene.views]
    stats = sparsity_stats(sets)
    out = _outdir(args.out)

    csv_path = out / "sparsity.csv"
    report.write_sparsity_csv(stats, [v.id for v in scene.views], csv_path)
    fig_path = out / "sparsity_cdf.png"
    report.fig_sparsity_cdf(stats, fig_path)
    io.save_sparsity_sets(sets, out / "sets.bin")
    io.write_json({"mean_rho": stats.mean_rho, "max_rho": stats.max_rho,
                   "n_views": len(sets), "n_gaussians": scene.n}, out / "analyze.json")
    _manifest(out, "analyze", {"scene": str(args.scene), "k": args.k},
              [csv_path, fig_path, out / "sets.bin", out / "analyze.json"])
    print(f"sparsity over {len(sets)} views: mean rho {stats.mean_rho:.4f}, "
          f"max rho {stats.max_rho:.4f}")
    return 0


def cmd_plan(args) -> int:
    scene = io.load_scene(args.scene)
    views, _, order, _, plans = _ordered_plans(
        scene, args.batch, args.strategy, args.k, args.seed, args.budget_ms / 1e3)
    vol = volume(plans)
    naive = naive_offload_volume(scene.n, args.batch)

    out = _outdir(args.out)
    meta = {
        "strategy": args.strategy,
        "seed": args.seed,
        "k": args.k,
        "budget_ms": args.budget_ms,
        "order": [int(i) for i in order],
        "view_ids": [views[i].id for i in order],
        "pixels": views[0].width * views[0].height,
    }
    plan_path = io.save_plans(plans, scene.n, out, meta=meta)
    report.write_volume_csv(vol, out / "volume.csv")
    report.fig_volume_per_microbatch(vol, out / "volume.png")
    _manifest(out, "plan", {"scene": str(args.scene), **meta},
              [plan_path, out / "plan.bin", out / "volume.csv", out / "volume.png"])

    reduction = 1.0 - vol.total_transfer_bytes / naive.total_transfer_bytes
    print(f"order ({args.strategy}): {meta['view_ids']}")
    print(f"transfer volume: {vol.total_transfer_bytes} bytes "
          f"({reduction:.1%} below naive {naive.total_transfer_bytes})")
    return 0


def cmd_simulate(args) -> int:
    plans, n_total, meta = io.load_plans(args.plans)
    schedule = io.schedule_from_plans(plans, n_total)
    cm = io.load_cost_model(args.cost_model) if args.cost_model else DEFAULT_COST_MODEL
    trace = simulate(plans, schedule, cm, mode=args.mode,
                     pixels=int(meta.get("pixels", 0)))
    m = metrics(trace, window=trace.makespan / 50.0)
    trailing = adam_trailing_time(trace)

    out = _outdir(args.out)
    io.save_trace_csv(trace, out / "trace.csv")
    io.write_json({
        "mode": args.mode,
        "makespan_s": m.makespan,
        "throughput_microbatches_per_s": m.throughput,
        "trailing_adam_s": trailing,
        "overlap": m.overlap,
    }, out / "metrics.json")
    report.fig_gantt(trace, out / "gantt.png")
    report.fig_idle_cdf({args.mode: m}, out / "idle_cdf.png")
    _manifest(out, "simulate",
              {"plans": str(args.plans), "mode": args.mode,
               "cost_model": str(args.cost_model) if args.cost_model else "default"},
              [out / "trace.csv", out / "metrics.json", out / "gantt.png",
               out / "idle_cdf.png"])
    print(f"{args.mode} makespan {m.makespan * 1e3:.3f} ms, "
          f"throughput {m.throughput:.1f} microbatches/s, "
          f"trailing adam {trailing * 1e3:.3f} ms")
    return 0


def cmd_train(args) -> int:
    scene = io.load_scene(args.scene)
    views = _batch_views(scene, args.batch)
    cfg = RenderConfig(sigma_cutoff=args.k)

    # The view order is fixed from the pre-training scene so a resumed run
    # schedules exactly like the uninterrupted one.
    sets = [cull(scene, v, k=args.k) for v in views]
    order = order_views(sets, args.strategy, views, rng_seed=args.seed,
                        budget=args.budget_ms / 1e3,
                        aabb=(scene.aabb_min, scene.aabb_max))

    if args.targets:
        targets = [io.load_image(Path(args.targets) / f"target_{v.id}.spim") for v in views]
    else:
        targets = [t.astype(np.float32) for t in synth_targets(scene, views, cfg, seed=args.seed)]

    adam = AdamState.fresh(scene.n, lr=args.lr)
    if args.resume:
        ck = io.load_scene(args.resume)
        if ck.n != scene.n:
            raise ValueError("checkpoint does not match the scene")
        scene.set_param_matrix(ck.param_matrix())
        adam = io.load_adam(Path(args.resume) / "adam.bin")

    arenas = ArenaCounters(device_capacity_bytes=args.device_capacity)
    for _ in range(args.steps):
        train_batch(scene, views, list(order), cfg, adam, arenas, targets)

    out = _outdir(args.out)
    json_path = io.save_scene(scene, out)
    io.save_adam(adam, out / "adam.bin")
    arena_payload = {
        "host_to_device_bytes": arenas.host_to_device_bytes,
        "device_to_host_bytes": arenas.device_to_host_bytes,
        "device_copy_bytes": arenas.device_copy_bytes,
        "writeback_bytes": arenas.writeback_bytes,
        "device_high_water_bytes": arenas.device_high_water_bytes,
        "stale_cache_refreshes": arenas.stale_cache_refreshes,
        "losses": arenas.losses,
    }
    io.write_json(arena_payload, out / "arena.json")
    config = {"scene": str(args.scene), "batch": args.batch, "strategy": args.strategy,
              "k": args.k, "seed": args.seed, "lr": args.lr, "steps": args.steps,
              "order": [int(i) for i in order],
              "resume": str(args.resume) if args.resume else None,
              "device_capacity": args.device_capacity}
    _manifest(out, "train", config,
              [json_path, out / "scene.bin", out / "adam.bin", out / "arena.json"])
    first = arenas.losses[:len(views)]
    last = arenas.losses[-len(views):]
    print(f"trained {args.steps} step(s) x {len(views)} views; "
          f"mean loss {np.mean(first):.6f} -> {np.mean(last):.6f}")
    print(f"arena: h2d {arenas.host_to_device_bytes} B, d2h {arenas.device_to_host_bytes} B, "
          f"high water {arenas.device_high_water_bytes} B")
    return 0


def cmd_compare(args) -> int:
    scene = io.load_scene(args.scene)
    cm = io.load_cost_model(args.cost_model) if args.cost_model else DEFAULT_COST_MODEL
    rows = []
    naive_metrics = None
    clm_metrics = {}

    for strategy in ORDER_STRATEGIES:
        views, _, order, schedule, plans = _ordered_plans(
            scene, args.batch, strategy, args.k, args.seed, args.budget_ms / 1e3)
        vol = volume(plans)
        pixels = views[0].width * views[0].height
        trace = simulate(plans, schedule, cm, mode="clm", pixels=pixels)
        m = metrics(trace, window=trace.makespan / 50.0)
        clm_metrics[strategy] = m
        rows.append({
            "strategy": strategy,
            "h2d_bytes": vol.host_to_device_bytes,
            "d2h_bytes": vol.device_to_host_bytes,
            "copy_bytes": vol.device_copy_bytes,
            "writeback_bytes": vol.writeback_bytes,
            "total_bytes": vol.total_transfer_bytes,
            "makespan_s": f"{m.makespan:.9f}",
            "trailing_adam_s": f"{adam_trailing_time(trace):.9f}",
        })
        if strategy == "tsp":
            naive_trace = simulate(plans, schedule, cm, mode="naive", pixels=pixels)
            naive_metrics = metrics(naive_trace, window=naive_trace.makespan / 50.0)
            nvol = naive_offload_volume(scene.n, args.batch)
            rows.append({
                "strategy": "naive",
                "h2d_bytes": nvol.host_to_device_bytes,
                "d2h_bytes": nvol.device_to_host_bytes,
                "copy_bytes": 0,
                "writeback_bytes": 0,
                "total_bytes": nvol.total_transfer_bytes,
                "makespan_s": f"{naive_trace.makespan:.9f}",
                "trailing_adam_s": f"{adam_trailing_time(naive_trace):.9f}",
            })

    out = _outdir(args.out)
    report.write_compare_csv(rows, out / "compare.csv")
    report.fig_volume_bars(rows, out / "volume_bars.png")
    report.fig_idle_cdf({"clm (tsp)": clm_metrics["tsp"], "naive": naive_metrics},
                        out / "idle_cdf.png")
    _manifest(out, "compare",
              {"scene": str(args.scene), "batch": args.batch, "k": args.k,
               "seed": args.seed, "budget_ms": args.budget_ms},
              [out / "compare.csv", out / "volume_bars.png", out / "idle_cdf.png"])

    header = f"{'strategy':<9} {'total MB':>10} {'makespan ms':>12} {'trailing ms':>12}"
    print(header)
    for r in rows:
        print(f"{r['strategy']:<9} {r['total_bytes'] / 1e6:>10.2f} "
              f"{float(r['makespan_s']) * 1e3:>12.3f} "
              f"{float(r['trailing_adam_s']) * 1e3:>12.3f}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatoff",
        description="Sparsity-guided offload planning and desk-scale training "
                    "for Gaussian splat scenes.")
    parser.add_argument("--version", action="version", version=f"splatoff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scene", help="generate a synthetic scene")
    gen.add_argument("--spec", help="SceneSpec as a JSON file")
    gen.add_argument("--n", type=int, help="number of Gaussians")
    gen.add_argument("--views", type=int, help="number of camera views")
    gen.add_argument("--width", type=int)
    gen.add_argument("--height", type=int)
    gen.add_argument("--camera-path", choices=("orbit", "grid-flyover", "street-line"))
    gen.add_argument("--box", nargs=6, type=float,
                     metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    ana = sub.add_parser("analyze", help="per-view sparsity report")
    ana.add_argument("--scene", required=True)
    ana.add_argument("--k", type=float, default=3.0, help="culling standard deviations")
    ana.add_argument("--out", required=True)

    plan = sub.add_parser("plan", help="order a batch and emit transfer plans")
    plan.add_argument("--scene", required=True)
    plan.add_argument("--k", type=float, default=3.0)
    plan.add_argument("--batch", type=int, required=True)
    plan.add_argument("--strategy", choices=ORDER_STRATEGIES, default="tsp")
    plan.add_argument("--seed", type=int, default=0)
    plan.add_argument("--budget-ms", type=float, default=1.0,
                      help="local-search time budget")
    plan.add_argument("--out", required=True)

    simp = sub.add_parser("simulate", help="pipeline simulation of a plan")
    simp.add_argument("--plans", required=True, help="plan directory or plan.json")
    simp.add_argument("--cost-model", help="cost model JSON (default: built-in)")
    simp.add_argument("--mode", choices=("clm", "naive"), default="clm")
    simp.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train with staged transfers and early Adam")
    tr.add_argument("--scene", required=True)
    tr.add_argument("--k", type=float, default=3.0)
    tr.add_argument("--batch", type=int, required=True)
    tr.add_argument("--strategy", choices=ORDER_STRATEGIES, default="tsp")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--budget-ms", type=float, default=1.0)
    tr.add_argument("--lr", type=float, default=0.01)
    tr.add_argument("--steps", type=int, default=1)
    tr.add_argument("--targets", help="directory of target_<view>.spim images")
    tr.add_argument("--resume", help="checkpoint directory to continue from")
    tr.add_argument("--device-capacity", type=int, default=0,
                    help="device arena byte limit (0 = unlimited)")
    tr.add_argument("--out", required=True)

    cmp_ = sub.add_parser("compare", help="strategy ablation table")
    cmp_.add_argument("--scene", required=True)
    cmp_.add_argument("--k", type=float, default=3.0)
    cmp_.add_argument("--batch", type=int, required=True)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--budget-ms", type=float, default=1.0)
    cmp_.add_argument("--cost-model")
    cmp_.add_argument("--out", required=True)

    return parser


_DISPATCH = {
    "gen-scene": cmd_gen_scene,
    "analyze": cmd_analyze,
    "plan": cmd_plan,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
