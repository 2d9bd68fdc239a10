"""The synthetic benchmark and its comparison arms, shared by scripts and acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .dataio import DataDir, SynthConfig, split, synthesize
from .model import ModelConfig
from .objectives import LossConfig
from .swing import SimilarityGraph, build_graph, top_k_neighbors
from .trainer import RunReport, Table, TrainConfig, emit_table, loss_mode, prepare, repeat_runs

log = logging.getLogger(__name__)

# short schedule so five repeats of two arms fit in a few minutes on one core
BENCH_EPOCHS = 20
BENCH_PATIENCE = 10


def benchmark_synth_config(seed: int = 0) -> SynthConfig:
    """4x4 clusters, 200 users, 200 items, 8000 interactions, noise 0.3, positive rate near 7/8."""
    return SynthConfig(seed=seed)


def benchmark_train_config(mask: str = "text+image", contrastive: bool = True, epochs: int = BENCH_EPOCHS,
                           seed: int = 0) -> TrainConfig:
    return TrainConfig(max_epochs=epochs, min_epochs=epochs, patience=BENCH_PATIENCE, seed=seed,
                       model=ModelConfig(mask=mask, seed=seed),
                       loss=LossConfig(tau=0.2, w1=0.1, w2=0.1, contrastive=contrastive))


@dataclass
class Benchmark:
    data: DataDir
    user_sims: SimilarityGraph
    item_sims: SimilarityGraph


def build_benchmark(synth: SynthConfig | None = None, test_fraction: float = 0.2, split_seed: int = 0,
                    k: int = 10, alpha: float = 1.0) -> Benchmark:
    """Synthesize a dataset and compute SWING neighbors from its training part only."""
    res = synthesize(synth or benchmark_synth_config())
    train_part = split(res.records, test_fraction, split_seed).train
    g = build_graph(train_part)
    return Benchmark(DataDir(res.records, res.stores, res.schema),
                     top_k_neighbors(g, "user", k, alpha), top_k_neighbors(g, "item", k, alpha))


def run_arm(bench: Benchmark, cfg: TrainConfig, repeats: int = 5, out_dir=None) -> list[RunReport]:
    start = time.perf_counter()
    data = prepare(bench.data, cfg, bench.user_sims, bench.item_sims)
    reports, agg = repeat_runs(cfg, data, repeats, out_dir)
    log.info("arm %s/%s: acc %.4f fp %.4f (%.0fs)", cfg.model.mask, loss_mode(cfg.loss),
             agg["accuracy"]["mean"], agg["fp_rate"]["mean"], time.perf_counter() - start)
    return reports


def run_ablation(bench: Benchmark, arms: list[tuple[str, bool]], repeats: int = 5, epochs: int = BENCH_EPOCHS,
                 out_dir=None) -> tuple[Table, dict[tuple[str, str], list[RunReport]]]:
    """Train each ``(mask, contrastive)`` arm and tabulate them in the given order."""
    results = {}
    for mask, contrastive in arms:
        cfg = benchmark_train_config(mask, contrastive, epochs)
        key = (mask, loss_mode(cfg.loss))
        arm_dir = Path(out_dir) / f"{mask}-{key[1]}" if out_dir is not None else None
        results[key] = run_arm(bench, cfg, repeats, arm_dir)
    return emit_table([(m, mode, reps) for (m, mode), reps in results.items()]), results

