"""Aggregator benchmark: FFA single pass versus the sequential memory bank."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .ffa import FeatureFusionAggregator, FfaConfig, MemoryBankAggregator

STRATEGIES = ("ffa", "memory-bank")
FIELDS = ("views", "strategy", "tokens_per_view", "dim", "invocations", "peak_retained_tokens",
          "working_set_tokens", "wall_time_ms")


@dataclass
class BenchRow:
    views: int
    strategy: str
    tokens_per_view: int
    dim: int
    invocations: int
    peak_retained_tokens: int
    working_set_tokens: int
    wall_time_ms: float


def _make(strategy: str, dim: int, seed: int):
    if strategy == "ffa":
        return FeatureFusionAggregator(dim, FfaConfig(), seed=seed)
    if strategy == "memory-bank":
        return MemoryBankAggregator(dim, FfaConfig(), seed=seed)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def _runner(agg, feats: torch.Tensor, backward: bool):
    def run():
        x = feats.clone().requires_grad_(backward)
        with torch.set_grad_enabled(backward):
            out = agg(x)
            if backward:
                out.square().mean().backward()
    return run


def bench_views(views: int, strategies=STRATEGIES, tokens: int = 64, dim: int = 64, repeats: int = 20,
                warmup: int = 3, backward: bool = True, seed: int = 0) -> list[BenchRow]:
    """Median wall time of one fusion (forward, plus backward when ``backward``) per strategy.

    Strategies are timed round-robin within each repeat so that slow drift in
    machine load hits all of them alike.
    """
    feats = torch.randn(views, tokens, dim, generator=torch.Generator().manual_seed(seed))
    aggs = {s: _make(s, dim, seed) for s in strategies}
    runs = {s: _runner(a, feats, backward) for s, a in aggs.items()}
    times: dict[str, list[float]] = {s: [] for s in strategies}
    for i in range(warmup + repeats):
        for s in strategies:
            t0 = time.perf_counter()
            runs[s]()
            if i >= warmup:
                times[s].append((time.perf_counter() - t0) * 1e3)
    rows = []
    for s in strategies:
        st = aggs[s].stats
        rows.append(BenchRow(views, s, tokens, dim, st["invocations"], st["peak_retained_tokens"],
                             st["working_set_tokens"], statistics.median(times[s])))
    return rows


def bench_aggregators(view_counts=(2, 3, 4, 5, 6, 8), strategies=STRATEGIES, tokens: int = 64, dim: int = 64,
                      repeats: int = 20, backward: bool = True, seed: int = 0) -> list[BenchRow]:
    bad = set(strategies) - set(STRATEGIES)
    if bad:
        raise ValueError(f"unknown strategies {sorted(bad)}; choose from {STRATEGIES}")
    rows = []
    for v in view_counts:
        if v < 2:
            raise ValueError("aggregation needs at least 2 views")
        rows += bench_views(v, tuple(strategies), tokens, dim, repeats, backward=backward, seed=seed)
    return rows


def write_csv(rows: list[BenchRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS)
        writer.writeheader()
        for r in rows:
            d = asdict(r)
            d["wall_time_ms"] = f"{r.wall_time_ms:.4f}"
            writer.writerow(d)
    return path


def summary_table(rows: list[BenchRow]) -> str:
    """Markdown table of memory-bank / FFA ratios per view count."""
    by = {(r.views, r.strategy): r for r in rows}
    lines = ["| V | FFA ms | memory-bank ms | time ratio (MB/FFA) | invocations FFA / MB | peak retained FFA / MB |",
             "|---|---|---|---|---|---|"]
    for v in sorted({r.views for r in rows}):
        f, m = by.get((v, "ffa")), by.get((v, "memory-bank"))
        if f is None or m is None:
            continue
        lines.append(f"| {v} | {f.wall_time_ms:.3f} | {m.wall_time_ms:.3f} | {m.wall_time_ms / f.wall_time_ms:.2f} "
                     f"| {f.invocations} / {m.invocations} | {f.peak_retained_tokens} / {m.peak_retained_tokens} |")
    return "\n".join(lines)
