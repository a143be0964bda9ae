#!/usr/bin/env python3
"""Tiny end-to-end demo: generate data, train briefly, rectangle one image.

Produces side-by-side PNGs (stitched input, coarse warp, final output,
ground truth) plus the confidence mask and an alignment heatmap in the
output directory. Runs in a few minutes on a laptop CPU; quality is
demo-grade, not benchmark-grade.

Usage:
    python scripts/demo_rectangle.py [--out demo_out] [--steps 1500]
"""

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from rectangling.cdm import PipelineConfig, rectangle_full, train_cdm
from rectangling.data import SynthConfig, load_dataset, write_dataset
from rectangling.io_utils import save_image_png
from rectangling.mdm import train_mdm
from rectangling.metrics import heatmap, psnr
from rectangling.schedule import SamplerConfig
from rectangling.training import TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_out")
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    log = logging.getLogger("demo")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        data_dir = Path(tmp) / "data"
        log.info("generating a small dataset ...")
        write_dataset(data_dir, SynthConfig(H=32, W=48, n_samples=60, max_disp=4.0, seed=args.seed))
        ds = load_dataset(data_dir)

        cfg = TrainConfig(
            steps=args.steps, batch_size=6, lr=2e-4, seed=args.seed,
            base_channels=16, max_disp=4.0,
        )
        log.info("training the motion model (%d steps) ...", cfg.steps)
        mdm_model, _ = train_mdm(ds, cfg)
        log.info("training the content model (%d steps) ...", cfg.steps)
        cdm_model, _ = train_cdm(ds, cfg)

        # Rectangle a held-out stitched image.
        eval_ds = load_dataset(data_dir)  # same layout; pick the last sample
        i = len(eval_ds) - 1
        pipe = PipelineConfig(
            mdm_sampler=SamplerConfig(num_steps=2, cfg_scale=1.0, seed=args.seed),
            cdm_sampler=SamplerConfig(num_steps=200, cfg_scale=1.0, seed=args.seed),
        )
        res = rectangle_full(mdm_model, cdm_model, eval_ds.I_S[i], eval_ds.M_S[i], pipe)

        gt = eval_ds.I_R[i]
        save_image_png(out / "1_stitched.png", eval_ds.I_S[i])
        save_image_png(out / "2_coarse.png", res.I_R_hat)
        save_image_png(out / "3_final.png", res.I_R_prime)
        save_image_png(out / "4_ground_truth.png", gt)
        save_image_png(out / "confidence.png", res.M_R_hat)
        save_image_png(out / "heatmap_final_vs_gt.png", heatmap(res.I_R_prime, gt))
        log.info(
            "PSNR: stitched %.2f dB, coarse %.2f dB, final %.2f dB",
            psnr(eval_ds.I_S[i], gt), psnr(res.I_R_hat, gt), psnr(res.I_R_prime, gt),
        )
        log.info("images written to %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
