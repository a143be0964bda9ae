#!/usr/bin/env python3
"""Run the full synthetic benchmark and print the results table.

Trains the motion and content models on the default 500-sample dataset
(plus the no-mask ablation), evaluates all pipeline variants on the 50-image
eval set, and writes benchmark_results.json. Stages cache under .bench_cache
(override with RECTANGLING_BENCH_CACHE), so re-runs are cheap.

Usage:
    python scripts/run_benchmark.py [--no-ablations] [--out results.json]
"""

import argparse
import json
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rectangling.benchmark import BenchmarkConfig, run_benchmark


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="benchmark_results.json")
    parser.add_argument("--no-ablations", action="store_true")
    parser.add_argument("--cache-dir", default=None)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = run_benchmark(
        BenchmarkConfig(),
        cache_dir=args.cache_dir,
        with_ablations=not args.no_ablations,
    )

    rows = [("reference (stitched input)", "ref_psnr_mean", "ref_ssim_mean", "main")]
    rows += [
        ("coarse stage (motion only)", "coarse_psnr_mean", "coarse_ssim_mean", "main"),
        ("full pipeline", "psnr_mean", "ssim_mean", "main"),
        ("full, ground-truth fields", "psnr_mean", "ssim_mean", "inject_gt"),
    ]
    if "nomask" in results:
        rows.append(("full, no-mask motion model", "psnr_mean", "ssim_mean", "nomask"))
        rows.append(("full, fixed fusion mask", "psnr_mean", "ssim_mean", "fixed_mask"))

    print(f"\n{'variant':<32} {'PSNR':>8} {'SSIM':>8}")
    for label, pk, sk, variant in rows:
        r = results[variant]
        print(f"{label:<32} {r[pk]:>8.2f} {r[sk]:>8.4f}")

    Path(args.out).write_text(json.dumps(results, indent=1, sort_keys=True))
    print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
