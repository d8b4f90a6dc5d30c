#!/usr/bin/env python3
"""Batch-size robustness sweep: the desk comparison at batch sizes {16, 32, 64}.

One line of the sweep == one run_desk_comparison invocation with every stage's
batch size overridden. Margins (TRIPLET minus SUPERVISED_T) are collected into
a single JSON for plotting.

Usage:
    python scripts/batch_size_sweep.py --out /tmp/bsweep --seeds 0 --batch-sizes 16 32 64
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--batch-sizes", type=int, nargs="+", default=[16, 32, 64])
    args = parser.parse_args()

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for batch in args.batch_sizes:
        run_dir = out_root / f"batch{batch}"
        cmd = [sys.executable, str(Path(__file__).parent / "run_desk_comparison.py"),
               "--out", str(run_dir), "--batch-size", str(batch),
               "--seeds", *[str(s) for s in args.seeds]]
        print("+", " ".join(cmd))
        subprocess.run(cmd, check=True)
        comparison = json.loads((run_dir / "comparison.json").read_text())
        rows.append({
            "batch_size": batch,
            "triplet": comparison["triplet_mean_bacc"],
            "supervised_t": comparison["supervised_t_mean_bacc"],
            "ssl_bt_then_t": comparison["ssl_bt_then_t_mean_bacc"],
            "margin": comparison["margin_triplet_vs_supervised_t"],
        })
        print(json.dumps(rows[-1]))
    (out_root / "sweep.json").write_text(json.dumps(rows, indent=2))
    print(f"\nwrote {out_root / 'sweep.json'}")


if __name__ == "__main__":
    main()
