"""Comparative experiment driver: the strategy-vs-strategy table on synthetic data.

One seed's experiment = fresh synthetic datasets + the requested strategies,
with the pretraining checkpoint shared between strategies that use it (runs are
deterministic, so re-running it would reproduce the same weights bitwise), plus
a supervised-on-D-only baseline evaluated on the same role-D holdout as the
distillation student.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

from .backbone import init_model
from .checkpoint import load_weights
from .config import ExperimentConfig
from .data import VolumeStore, balanced_holdout
from .eval import evaluate
from .pipeline import StrategyResult, TrainingStrategy, run_distillation_stage, run_strategy
from .seeding import spawn_rng
from .synth import generate_synthetic

DEFAULT_STRATEGIES = (TrainingStrategy.TRIPLET, TrainingStrategy.SSL_BT_THEN_T,
                      TrainingStrategy.SUPERVISED_T)


def run_seed_experiment(config: ExperimentConfig, seed: int, out_dir: str | Path,
                        strategies=DEFAULT_STRATEGIES,
                        with_supervised_d: bool = True) -> dict:
    """All strategies for one seed on freshly generated data; returns a summary
    dict (and writes it to ``out_dir/summary.json``)."""
    out_dir = Path(out_dir)
    config = dataclasses.replace(config, seed=seed, output_dir=str(out_dir))
    t0 = time.time()
    synth = generate_synthetic(config, out_dir / "data")
    manifests = synth.manifests
    stores = {role: VolumeStore(config.input_shape) for role in ("U", "D", "T")}
    results: dict[str, StrategyResult] = {}
    reuse = {}
    for strategy in strategies:
        res = run_strategy(strategy, config, manifests, out_dir / strategy.value,
                           stores=stores, reuse_stages=dict(reuse))
        if "ssl" in res.stage_results and "ssl" not in reuse:
            reuse["ssl"] = res.stage_results["ssl"]
        results[strategy.value] = res

    summary = {
        "seed": seed,
        "strategies": {name: {"aggregate": res.aggregate, "bacc_d": res.bacc_d}
                       for name, res in results.items()},
        "stage_extras": {name: {sname: s.extras for sname, s in res.stage_results.items()
                                if s.extras}
                         for name, res in results.items()},
    }

    if with_supervised_d:
        d_manifest = manifests["D"]
        d_rest, d_holdout = balanced_holdout(d_manifest, 0.2, spawn_rng(seed, "d_holdout"))
        sup_cfg = dataclasses.replace(
            config, distill=dataclasses.replace(config.distill, lambd=0.0))
        sup = run_distillation_stage(sup_cfg, d_manifest, None, out_dir / "supervised_d",
                                     store=stores["D"], train_indices=d_rest)
        extractor, head = init_model(config, "cls", seed=0)
        load_weights(sup.weights_path, config).apply_to(extractor, head)
        report = evaluate(extractor, head, d_manifest, stores["D"], indices=d_holdout,
                          dataset_tag="D", num_classes=config.num_classes,
                          class_names=config.class_names())
        summary["supervised_d_bacc_d"] = report.balanced_accuracy
    summary["wall_clock_s"] = time.time() - t0
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def compare_strategies(config: ExperimentConfig, seeds, out_dir: str | Path,
                       strategies=DEFAULT_STRATEGIES, with_supervised_d: bool = True) -> dict:
    """The multi-seed comparison; returns aggregate margins (percent points are
    the caller's job; these stay as fractions) and writes ``comparison.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    for seed in seeds:
        summary_path = out_dir / f"seed{seed}" / "summary.json"
        if summary_path.exists():
            summaries.append(json.loads(summary_path.read_text()))
            continue
        summaries.append(run_seed_experiment(config, seed, out_dir / f"seed{seed}",
                                             strategies, with_supervised_d))

    def mean_over_seeds(name: str, key: str = "balanced_accuracy_mean") -> float:
        vals = [s["strategies"][name]["aggregate"][key] for s in summaries
                if name in s["strategies"]]
        return sum(vals) / len(vals) if vals else float("nan")

    overall = {
        "seeds": list(seeds),
        "batch_size": config.ssl.batch_size,
        "per_seed": summaries,
    }
    for strategy in strategies:
        overall[f"{strategy.value}_mean_bacc"] = mean_over_seeds(strategy.value)
    if TrainingStrategy.TRIPLET in strategies:
        bacc_ds = [s["strategies"]["triplet"]["bacc_d"] for s in summaries]
        overall["triplet_mean_bacc_d"] = sum(bacc_ds) / len(bacc_ds)
    if with_supervised_d:
        sup_ds = [s["supervised_d_bacc_d"] for s in summaries]
        overall["supervised_d_mean_bacc_d"] = sum(sup_ds) / len(sup_ds)
    if {TrainingStrategy.TRIPLET, TrainingStrategy.SUPERVISED_T} <= set(strategies):
        overall["margin_triplet_vs_supervised_t"] = (
            overall["triplet_mean_bacc"] - overall["supervised_t_mean_bacc"])
    if {TrainingStrategy.TRIPLET, TrainingStrategy.SSL_BT_THEN_T} <= set(strategies):
        overall["margin_triplet_vs_ssl_bt"] = (
            overall["triplet_mean_bacc"] - overall["ssl_bt_then_t_mean_bacc"])
    if with_supervised_d and "triplet_mean_bacc_d" in overall:
        overall["margin_bacc_d"] = (
            overall["triplet_mean_bacc_d"] - overall["supervised_d_mean_bacc_d"])
    overall["total_wall_clock_s"] = sum(s.get("wall_clock_s", 0.0) for s in summaries)
    (out_dir / "comparison.json").write_text(json.dumps(overall, indent=2, sort_keys=True))
    return overall
