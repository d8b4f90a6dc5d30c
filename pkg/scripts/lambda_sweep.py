#!/usr/bin/env python3
"""Latent-match weight ablation: rerun distillation + fine-tuning for several
lambda values against a fixed pretraining checkpoint.

Reuses one synthetic dataset and one pretraining stage per seed, so each lambda
point costs only a distillation plus 5 fine-tunes.

Usage:
    python scripts/lambda_sweep.py --out /tmp/lsweep --lambdas 0 0.001 0.01 0.1 0.5 1.0
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from pathlib import Path

from trivol.config import desk_config
from trivol.data import VolumeStore
from trivol.pipeline import TrainingStrategy, run_ssl_stage, run_strategy
from trivol.synth import generate_synthetic


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lambdas", type=float, nargs="+",
                        default=[0.0, 0.001, 0.01, 0.1, 0.5, 1.0])
    args = parser.parse_args()

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    config = dataclasses.replace(desk_config(), seed=args.seed, output_dir=str(out_root))
    synth = generate_synthetic(config, out_root / "data")
    stores = {role: VolumeStore(config.input_shape) for role in ("U", "D", "T")}
    ssl_result = run_ssl_stage(config, synth.manifests["U"], out_root / "ssl", stores["U"])

    rows = []
    for lam in args.lambdas:
        cfg = dataclasses.replace(config, distill=dataclasses.replace(config.distill, lambd=lam))
        res = run_strategy(TrainingStrategy.TRIPLET, cfg, synth.manifests,
                           out_root / f"lambda{lam:g}", stores=stores,
                           reuse_stages={"ssl": ssl_result})
        rows.append({"lambd": lam,
                     "bacc_t": res.aggregate["balanced_accuracy_mean"],
                     "bacc_t_std": res.aggregate["balanced_accuracy_std"],
                     "bacc_d": res.bacc_d})
        print(json.dumps(rows[-1]))
    (out_root / "sweep.json").write_text(json.dumps(rows, indent=2))
    print(f"\nwrote {out_root / 'sweep.json'}")


if __name__ == "__main__":
    main()
