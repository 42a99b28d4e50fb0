"""Ablation sweeps: named presets under one budget and seed set, stage 1 shared per seed."""

from __future__ import annotations

import json
import statistics
from pathlib import Path

from .config import preset
from .pipeline import Pipeline
from .scene import Scene


def run_ablation(scene: Scene, variants=("full", "no-aggregator", "no-adapter"), seeds=(0, 1, 2),
                 iterations: int = 600, stage1_iterations: int | None = None, toy: bool = True,
                 log=None) -> list[dict]:
    """One row per (seed, variant) with final train and held-out metrics.

    Within a seed, every variant starts from the same fitted g_phi, so rows differ
    only in what stage 2 is allowed to train.
    """
    rows = []
    for seed in seeds:
        state = None
        for name in variants:
            overrides = {} if stage1_iterations is None else {"stage1": {"iterations": stage1_iterations}}
            cfg = preset(name, seed=seed, toy=toy, **overrides)
            pipe = Pipeline(cfg, scene)
            if state is None:
                pipe.stage1()
                state = pipe.stage1_state()
            else:
                pipe.load_stage1(state)
            pipe.prepare()
            hist = pipe.stage2(iterations)
            m = pipe.evaluate()
            row = {"seed": seed, "variant": name, "iterations": iterations,
                   "train_psnr": m["train_psnr_mean"], "held_out_psnr": m["held_out_psnr_mean"],
                   "train_ssim": m["train_ssim_mean"], "final_loss": hist[-1]["total"] if hist else None}
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def medians(rows: list[dict], key: str = "train_psnr") -> dict[str, float]:
    by: dict[str, list[float]] = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r[key])
    return {k: statistics.median(v) for k, v in by.items()}


def ordering_holds(med: dict[str, float], order=("full", "no-aggregator", "no-adapter")) -> bool:
    vals = [med[v] for v in order]
    return all(a > b for a, b in zip(vals, vals[1:]))


def write_rows(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n")
    return path
