"""Command-line entry point.

Subcommands: synth, pretrain, distill, finetune, run, eval, visualize,
validate-config. Human-readable tables go to stdout; JSON-lines logs go to
stderr. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_weights
from .config import ExperimentConfig, load_config, save_config
from .data import Manifest, VolumeStore, load_manifest, stratified_kfold
from .errors import TrivolError
from .eval import embed_latents_2d, evaluate, extract_latents
from .pipeline import (StrategyResult, TrainingStrategy, run_distillation_stage,
                       run_finetune_stage, run_ssl_stage, run_strategy)
from .seeding import spawn_rng
from .synth import generate_synthetic

logger = logging.getLogger("trivol")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname.lower(), "logger": record.name,
                   "message": record.getMessage()}
        return json.dumps(payload)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trivol",
                                     description="three-stage training for 3D volume classification")
    parser.add_argument("--version", action="version", version=f"trivol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument("--profile", choices=("desk", "full"), default="full",
                       help="base defaults the config file overlays")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("-v", "--verbose", action="count", default=0)
        p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("synth", help="generate the synthetic datasets and manifests")
    common(p)

    p = sub.add_parser("pretrain", help="stage 1: two-view pretraining on role-U")
    common(p)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("distill", help="stage 2: frozen-teacher distillation on role-D")
    common(p)
    p.add_argument("--checkpoint", default=None, help="teacher checkpoint (theta-prime)")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("finetune", help="stage 3: per-fold fine-tuning on role-T")
    common(p)
    p.add_argument("--checkpoint", default=None, help="init checkpoint (psi-prime or theta-prime)")
    p.add_argument("--fold", type=int, default=None, help="run a single fold")

    p = sub.add_parser("run", help="full strategy: stages, 5-fold fine-tune, metrics table")
    common(p)
    p.add_argument("--strategy", required=True,
                   choices=[s.value for s in TrainingStrategy])
    p.add_argument("--jobs", type=int, default=1, help="parallel fine-tune workers")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("visualize", help="latent tables and 2-D embedding plots per stage checkpoint")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True,
                   help="stage checkpoint; repeat for several stages")
    p.add_argument("--method", default=None, help="2-D reducer (tsne, pca, ...)")

    p = sub.add_parser("validate-config", help="exit 0 iff the config loads and validates")
    common(p)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, profile=args.profile, seed=args.seed, output_dir=args.out)


def _manifests(config: ExperimentConfig, needed: tuple[str, ...]) -> dict[str, Manifest]:
    paths = {"U": config.u_manifest, "D": config.d_manifest, "T": config.t_manifest}
    out: dict[str, Manifest] = {}
    for role in needed:
        if not paths[role]:
            raise TrivolError(f"config has no manifest path for role {role} "
                              f"(set paths.{role.lower()}_manifest or run `trivol synth` first)")
        out[role] = load_manifest(paths[role])
    return out


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}"


def report_table(results: list[StrategyResult], class_names=("CN", "AD", "FTD")) -> str:
    """Aligned comparison table: one row per strategy, BAcc/TPR/F1/BAcc_D columns.
    Mean +- sample (n-1) standard deviation across folds, in percent."""
    headers = ["Strategy", "BAcc_T", *[f"TPR_{c}" for c in class_names], "F1_T", "BAcc_D"]
    rows = []
    for res in results:
        agg = res.aggregate
        row = [res.strategy,
               f"{format_percent(agg['balanced_accuracy_mean'])} ± {format_percent(agg['balanced_accuracy_std'])}"]
        row += [format_percent(t) for t in agg["tpr_pooled"]]
        row.append(f"{format_percent(agg['macro_f1_mean'])} ± {format_percent(agg['macro_f1_std'])}")
        row.append(format_percent(res.bacc_d) if res.bacc_d is not None else "-")
        rows.append(row)
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(0 if args.quiet else (args.verbose + 1))
    try:
        if args.command == "validate-config":
            _load(args)
            print("config OK")
            return 0
        config = _load(args)
        out_dir = Path(config.output_dir)

        if args.command == "synth":
            result = generate_synthetic(config, out_dir / "data")
            for role, path in result.manifest_paths.items():
                print(f"{role}: {path} ({len(result.manifests[role])} samples)")
            return 0

        if args.command == "pretrain":
            manifests = _manifests(config, ("U",))
            result = run_ssl_stage(config, manifests["U"], out_dir / "ssl", resume=args.resume)
            print(json.dumps({"stage": result.stage, "weights": result.weights_path,
                              "final_loss": result.loss_curve[-1]}, indent=2))
            return 0

        if args.command == "distill":
            manifests = _manifests(config, ("D",))
            teacher = load_weights(args.checkpoint, config) if args.checkpoint else None
            result = run_distillation_stage(config, manifests["D"], teacher, out_dir / "distill",
                                            resume=args.resume)
            print(json.dumps({"stage": result.stage, "weights": result.weights_path,
                              "final_loss": result.loss_curve[-1]}, indent=2))
            return 0

        if args.command == "finetune":
            manifests = _manifests(config, ("T",))
            init = load_weights(args.checkpoint, config) if args.checkpoint else None
            folds = stratified_kfold(manifests["T"], k=5, rng=spawn_rng(config.seed, "folds"))
            if args.fold is not None:
                folds = [folds[args.fold]]
            for fold in folds:
                result = run_finetune_stage(config, fold, manifests["T"], init,
                                            out_dir / f"fold{fold.fold_index}")
                print(json.dumps({"fold": fold.fold_index, "weights": result.weights_path,
                                  "best_val_bacc": result.extras["best_val_bacc"]}))
            return 0

        if args.command == "run":
            strategy = TrainingStrategy(args.strategy)
            manifests = _manifests(config, strategy.required_roles)
            result = run_strategy(strategy, config, manifests, out_dir / strategy.value,
                                  jobs=args.jobs, resume=args.resume)
            print(report_table([result], class_names=config.class_names()))
            print(f"\nmetrics: {out_dir / strategy.value / 'metrics.json'}")
            return 0

        if args.command == "eval":
            manifest = load_manifest(args.manifest)
            weights = load_weights(args.checkpoint, config)
            from .backbone import init_model

            extractor, head = init_model(config, "cls", seed=0)
            weights.apply_to(extractor, head if weights.head_kind == "cls" else None)
            store = VolumeStore(config.input_shape)
            report = evaluate(extractor, head, manifest, store,
                              num_classes=config.num_classes, class_names=config.class_names())
            print(json.dumps(report.to_dict(), indent=2))
            return 0

        if args.command == "visualize":
            manifests = {}
            for role, path in (("U", config.u_manifest), ("D", config.d_manifest),
                               ("T", config.t_manifest)):
                if path:
                    manifests[role] = load_manifest(path)
            store = VolumeStore(config.input_shape)
            viz_dir = out_dir / "viz"
            for ckpt_path in args.checkpoint:
                weights = load_weights(ckpt_path, config)
                table = extract_latents(weights, config, manifests, store, seed=config.seed)
                stem = f"latents_{weights.stage}"
                coords = embed_latents_2d(table, out_png=viz_dir / f"{stem}.png",
                                          out_csv=viz_dir / f"{stem}.csv",
                                          method=args.method, seed=config.seed)
                print(f"{weights.stage}: {len(coords)} points -> {viz_dir / (stem + '.png')}")
            return 0

        parser.error(f"unknown command {args.command!r}")
        return 2
    except TrivolError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
