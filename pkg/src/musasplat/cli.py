"""Command line: ``musasplat <verb> [options]``. Outputs default under $MUSASPLAT_OUT (else ./runs)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import bench as bench_mod
from .ablation import medians, ordering_holds, run_ablation, write_rows
from .config import PRESETS, RunConfig, preset
from .gradcheck import run_suite
from .pipeline import Pipeline, train_run
from .scene import SceneSpec, generate_scene, load_scene, save_scene
from .train import format_parameter_report

OUT_ENV = "MUSASPLAT_OUT"
log = logging.getLogger("musasplat")


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _out(arg: str | None, default: str) -> Path:
    return Path(arg) if arg else output_root() / default


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.azimuths:
        d["azimuths_deg"] = _floats(args.azimuths)
    if args.held_out is not None:
        d["held_out_azimuths_deg"] = _floats(args.held_out)
    if args.target_overlap is not None:
        d["target_overlap"] = args.target_overlap
    if args.size:
        d["image_size"] = [args.size, args.size]
        d.setdefault("focal", 58.0 * args.size / 64)
    spec = SceneSpec.from_dict(d)
    # the destination is not written into the manifest, so reruns elsewhere stay byte-identical
    out = Path(args.out) if args.out else Path(spec.output_dir) if spec.output_dir else output_root() / f"scene_seed{spec.seed}"
    scene = generate_scene(spec)
    save_scene(scene, out)
    regime = " (<30% regime)" if scene.low_overlap else ""
    print(f"wrote {out}: {scene.num_views} views, {len(scene.held_out_poses)} held out, "
          f"overlap {scene.overlap:.3f}{regime}")
    return 0


def _run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
        return cfg
    return preset(args.preset, seed=args.seed or 0, toy=not args.full_scale_lr)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.stage1_iterations is not None:
        cfg.stage1.iterations = args.stage1_iterations
    _seed_everything(cfg.seed)
    scene = load_scene(args.scene)
    size = tuple(scene.images.shape[1:3])
    if cfg.model.vit.image_size != size:
        # the patch grid follows the scene; everything else in the config stays as given
        cfg.model.vit = replace(cfg.model.vit, image_size=size)
    out = _out(args.out, f"{cfg.name}_seed{cfg.seed}")
    pipe, report = train_run(cfg, scene, out, iterations=args.iterations)
    m = report["metrics"]
    print(f"{cfg.name} seed {cfg.seed}: {report['iterations']} iterations, train PSNR {m['train_psnr_mean']:.2f} dB"
          + (f", held-out PSNR {m['held_out_psnr_mean']:.2f} dB" if m["held_out_psnr_mean"] is not None else ""))
    print(format_parameter_report(report["parameters"]))
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    if args.held_out:
        names = {v["name"] for v in json.loads((Path(args.scene) / "scene.json").read_text())["views"]}
        missing = [n for n in args.held_out.split(",") if n not in names]
        if missing:
            print(f"error: views not in scene: {', '.join(missing)}", file=sys.stderr)
            return 2
    if len(scene.held_out_poses) == 0 and not args.allow_no_held_out:
        print("error: scene has no held-out views (pass --allow-no-held-out to evaluate train views only)",
              file=sys.stderr)
        return 2
    ckpt = Path(args.checkpoint)
    if not ckpt.with_suffix(".json").exists():
        print(f"error: no checkpoint manifest at {ckpt.with_suffix('.json')}", file=sys.stderr)
        return 2
    pipe = Pipeline.load(ckpt, scene)
    metrics = pipe.evaluate()
    out = _out(args.out, ckpt.parent.parent.name + "_eval" if ckpt.parent.name == "checkpoints" else "eval")
    out.mkdir(parents=True, exist_ok=True)
    pipe.render_grid(out / "grid.png")
    doc = {"format_version": 1, "kind": "eval", "checkpoint": str(ckpt), "scene": str(args.scene), "metrics": metrics}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"train PSNR {metrics['train_psnr_mean']:.3f} dB"
          + (f", held-out PSNR {metrics['held_out_psnr_mean']:.3f} dB" if metrics["held_out_psnr_mean"] else ""))
    print(f"wrote {out / 'metrics.json'} and {out / 'grid.png'}")
    return 0


def cmd_bench_agg(args) -> int:
    rows = bench_mod.bench_aggregators(_ints(args.views), args.strategies.split(","), args.tokens, args.dim,
                                       args.repeats, backward=not args.forward_only, seed=args.seed)
    out = _out(args.out, "bench_agg")
    out.mkdir(parents=True, exist_ok=True)
    bench_mod.write_csv(rows, out / "bench.csv")
    table = bench_mod.summary_table(rows)
    (out / "summary.md").write_text(table + "\n")
    print(table)
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_grad_check(args) -> int:
    results, seconds = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<24} rel err {r.error:.2e} (tol {r.tolerance:.0e})")
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} passed in {seconds:.1f} s")
    return 1 if bad else 0


def _load_reports(paths: list[str]) -> list[tuple[Path, dict]]:
    found = []
    for p in paths:
        p = Path(p)
        candidates = [p] if p.is_file() else sorted(p.rglob("report.json"))
        for c in candidates:
            found.append((c, json.loads(c.read_text())))
    return found


def report_markdown(reports: list[tuple[Path, dict]]) -> str:
    lines = ["| run | seed | iterations | train PSNR | train SSIM | held-out PSNR | held-out SSIM | trainable | stage-2 s |",
             "|---|---|---|---|---|---|---|---|---|"]
    fmt = lambda v, spec: "n/a" if v is None else format(v, spec)
    for path, r in reports:
        m = r["metrics"]
        lines.append(f"| {r['name']} | {r['seed']} | {r['iterations']} | {fmt(m['train_psnr_mean'], '.2f')} "
                     f"| {fmt(m['train_ssim_mean'], '.4f')} | {fmt(m['held_out_psnr_mean'], '.2f')} "
                     f"| {fmt(m['held_out_ssim_mean'], '.4f')} | {r['parameters']['trainable_fraction']:.3f} "
                     f"| {r['timing_s']['stage2']:.0f} |")
    return "\n".join(lines)


def cmd_report(args) -> int:
    reports = _load_reports(args.runs)
    if not reports:
        print("error: no report.json found", file=sys.stderr)
        return 2
    md = report_markdown(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(md + "\n")
    print(md)
    return 0


def cmd_ablate(args) -> int:
    scene = load_scene(args.scene)
    out = _out(args.out, "ablation")
    rows = run_ablation(scene, args.variants.split(","), _ints(args.seeds), args.iterations,
                        args.stage1_iterations, toy=not args.full_scale_lr,
                        log=lambda r: print(f"seed {r['seed']} {r['variant']:<14} train {r['train_psnr']:.3f} dB",
                                            flush=True))
    write_rows(rows, out / "ablation.jsonl")
    med = medians(rows)
    for k, v in med.items():
        print(f"median {k:<14} {v:.3f} dB")
    if {"full", "no-aggregator", "no-adapter"} <= set(med):
        print(f"full > no-aggregator > no-adapter: {ordering_holds(med)}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="musasplat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic multi-view scene")
    g.add_argument("--config", help="JSON SceneSpec; flags below override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--azimuths", help="comma-separated context camera azimuths in degrees")
    g.add_argument("--held-out", help="comma-separated held-out azimuths (empty string for none)")
    g.add_argument("--target-overlap", type=float, help="search the second azimuth to hit this overlap")
    g.add_argument("--size", type=int, help="square image size in pixels")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", help="run both training stages and write a report")
    t.add_argument("--scene", required=True)
    t.add_argument("--preset", default="full", choices=sorted(PRESETS))
    t.add_argument("--config", help="JSON RunConfig (overrides --preset)")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="stage-2 iterations (default from config)")
    t.add_argument("--stage1-iterations", type=int)
    t.add_argument("--full-scale-lr", action="store_true", help="keep the 5e-5 learning rate instead of the toy one")
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="render and score a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    e.add_argument("--scene", required=True)
    e.add_argument("--held-out", help="comma-separated view names that must exist in the scene")
    e.add_argument("--allow-no-held-out", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench-agg", help="time FFA against the memory-bank baseline")
    b.add_argument("--views", default="2,3,4,5,6,8")
    b.add_argument("--strategies", default="ffa,memory-bank")
    b.add_argument("--tokens", type=int, default=64, help="tokens per view")
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--forward-only", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench_agg)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite in fp64")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_grad_check)

    r = sub.add_parser("report", help="aggregate report.json files into a markdown table")
    r.add_argument("runs", nargs="+", help="run directories or report files")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    a = sub.add_parser("ablate", help="train several presets over several seeds and compare")
    a.add_argument("--scene", required=True)
    a.add_argument("--variants", default="full,no-aggregator,no-adapter")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--iterations", type=int, default=600)
    a.add_argument("--stage1-iterations", type=int)
    a.add_argument("--full-scale-lr", action="store_true", help="keep the 5e-5 learning rate instead of the toy one")
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
