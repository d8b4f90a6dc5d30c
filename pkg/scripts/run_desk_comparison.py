#!/usr/bin/env python3
"""Desk-scale comparative experiment: TRIPLET vs SUPERVISED_T vs SSL_BT_THEN_T.

For each seed: generates fresh synthetic datasets, runs the three strategies
(sharing the seed's pretraining checkpoint where determinism allows), plus a
supervised-on-D-only baseline evaluated on the same role-D holdout as the
distillation student. Emits per-seed summaries and a comparison JSON. Seeds
with an existing summary.json under --out are reused, so interrupted sweeps
can be re-run.

Usage:
    python scripts/run_desk_comparison.py --out /tmp/desk --seeds 0 1 2
    python scripts/run_desk_comparison.py --out /tmp/desk_b16 --seeds 0 --batch-size 16
"""

from __future__ import annotations

import argparse
import dataclasses
import json

from trivol.config import desk_config, load_config
from trivol.experiments import compare_strategies


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--config", default=None, help="optional TOML overriding the desk profile")
    parser.add_argument("--batch-size", type=int, default=None,
                        help="override every stage's batch size (ablation sweeps)")
    parser.add_argument("--ssl-iterations", type=int, default=None)
    args = parser.parse_args()

    config = load_config(args.config, profile="desk") if args.config else desk_config()
    if args.batch_size is not None:
        config = dataclasses.replace(
            config,
            ssl=dataclasses.replace(config.ssl, batch_size=args.batch_size),
            distill=dataclasses.replace(config.distill, batch_size=args.batch_size),
            finetune=dataclasses.replace(config.finetune, batch_size=args.batch_size),
        )
    if args.ssl_iterations is not None:
        config = dataclasses.replace(
            config, ssl=dataclasses.replace(config.ssl, iterations=args.ssl_iterations))

    overall = compare_strategies(config, args.seeds, args.out)
    print(json.dumps({k: v for k, v in overall.items() if k != "per_seed"},
                     indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
