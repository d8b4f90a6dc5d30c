#!/usr/bin/env python3
"""Latent-space maps after each training stage (pretraining, distillation,
fine-tuning), one 2-D scatter per stage checkpoint, colored by dataset role and
class.

Expects a completed triplet run directory (as produced by
`trivol run --strategy triplet` or scripts/run_desk_comparison.py).

Usage:
    python scripts/make_latent_maps.py --run /tmp/desk/seed0/triplet \
        --data /tmp/desk/seed0/data --out /tmp/desk/seed0/viz
"""

from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path

from trivol.checkpoint import load_weights
from trivol.config import desk_config
from trivol.data import VolumeStore, load_manifest
from trivol.eval import embed_latents_2d, extract_latents


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--run", required=True, help="triplet run directory")
    parser.add_argument("--data", required=True, help="directory with {u,d,t}_manifest.csv")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--method", default=None)
    parser.add_argument("--max-unlabeled", type=int, default=1000)
    args = parser.parse_args()

    run_dir = Path(args.run)
    data_dir = Path(args.data)
    out_dir = Path(args.out)
    config = dataclasses.replace(desk_config(), seed=args.seed)
    manifests = {role: load_manifest(data_dir / f"{role.lower()}_manifest.csv")
                 for role in ("U", "D", "T")}
    store = VolumeStore(config.input_shape)

    checkpoints = [run_dir / "ssl" / "theta_prime.ckpt",
                   run_dir / "distill" / "psi_prime.ckpt",
                   run_dir / "fold0" / "psi_final_fold0.ckpt"]
    for ckpt in checkpoints:
        if not ckpt.exists():
            print(f"skipping missing checkpoint {ckpt}")
            continue
        weights = load_weights(ckpt, config)
        table = extract_latents(weights, config, manifests, store,
                                max_unlabeled=args.max_unlabeled, seed=args.seed)
        stem = f"latents_{weights.stage}"
        embed_latents_2d(table, out_png=out_dir / f"{stem}.png",
                         out_csv=out_dir / f"{stem}.csv", method=args.method, seed=args.seed)
        print(f"{weights.stage}: wrote {out_dir / (stem + '.png')}")


if __name__ == "__main__":
    main()
