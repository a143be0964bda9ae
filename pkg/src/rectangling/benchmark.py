"""End-to-end synthetic benchmark orchestration.

Builds the default datasets, trains the motion/content models (plus the
no-condition-mask ablation), and scores pipeline variants on the eval set.
Every heavy stage is cached on disk keyed by a hash of the package source
and the stage configuration: since generation, training, and sampling are
bit-exact deterministic, a cache hit reproduces exactly what a fresh run
would compute.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cdm import PipelineConfig, rectangle_full, train_cdm
from .data import SynthConfig, load_dataset, write_dataset
from .io_utils import atomic_write_text
from .mdm import train_mdm
from .metrics import psnr, ssim
from .training import TrainConfig, TrainedModel, load_model

log = logging.getLogger(__name__)

CACHE_ENV = "RECTANGLING_BENCH_CACHE"


@dataclass(frozen=True)
class BenchmarkConfig:
    """Everything the synthetic benchmark depends on; defaults are the
    shipped desk-scale configuration."""

    data_train: SynthConfig = field(default_factory=lambda: SynthConfig(seed=0))
    data_eval: SynthConfig = field(default_factory=lambda: SynthConfig(n_samples=50, seed=1))
    mdm_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-4, seed=0))
    cdm_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4, seed=0))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / ".bench_cache"


def _code_hash() -> str:
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for p in sorted(pkg.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _stage_key(stage: str, payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    digest = hashlib.sha256((_code_hash() + blob).encode()).hexdigest()[:16]
    return f"{stage}_{digest}"


def _stage_dir(cache_dir: Path, stage: str, payload) -> Path:
    return Path(cache_dir) / _stage_key(stage, payload)


def cached_dataset(cfg: SynthConfig, cache_dir: Path, tag: str) -> Path:
    out = _stage_dir(cache_dir, f"data_{tag}", asdict(cfg))
    if not (out / "manifest.json").exists():
        log.info("generating %s dataset into %s", tag, out)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(out, cfg)
    return out


def cached_model(
    train_fn, dataset_dir: Path, cfg: TrainConfig, cache_dir: Path, tag: str
) -> TrainedModel:
    prefix = "mdm" if train_fn is train_mdm else "cdm"
    out = _stage_dir(cache_dir, f"model_{tag}", {"train": asdict(cfg), "data": dataset_dir.name})
    ckpt = out / f"{prefix}.ckpt"
    if not ckpt.exists():
        log.info("training %s into %s (%d steps)", tag, out, cfg.steps)
        dataset = load_dataset(dataset_dir)
        train_fn(dataset, cfg, out_dir=out)
    return load_model(ckpt)


def evaluate_pipeline(
    mdm_model: TrainedModel | None,
    cdm_model: TrainedModel,
    eval_dir: Path,
    pipe: PipelineConfig,
    inject_gt_field: bool = False,
) -> dict:
    """Score a pipeline variant over an eval dataset.

    Returns per-sample and mean PSNR/SSIM for the final output, the coarse
    stage, and the stitched-input reference.
    """
    ds = load_dataset(eval_dir)
    rows = []
    for i in range(len(ds)):
        res = rectangle_full(
            mdm_model,
            cdm_model,
            ds.I_S[i],
            ds.M_S[i],
            pipe,
            field_override=ds.F_gt[i] if inject_gt_field else None,
        )
        rows.append(
            {
                "name": ds.names[i],
                "psnr": psnr(res.I_R_prime, ds.I_R[i]),
                "ssim": ssim(res.I_R_prime, ds.I_R[i]),
                "coarse_psnr": psnr(res.I_R_hat, ds.I_R[i]),
                "coarse_ssim": ssim(res.I_R_hat, ds.I_R[i]),
                "ref_psnr": psnr(ds.I_S[i], ds.I_R[i]),
                "ref_ssim": ssim(ds.I_S[i], ds.I_R[i]),
            }
        )
    out = {"rows": rows}
    for key in ("psnr", "ssim", "coarse_psnr", "coarse_ssim", "ref_psnr", "ref_ssim"):
        out[f"{key}_mean"] = float(np.mean([r[key] for r in rows]))
    return out


def cached_eval(tag: str, payload: dict, cache_dir: Path, compute) -> dict:
    out = _stage_dir(cache_dir, f"eval_{tag}", payload)
    result_path = out / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    result = compute()
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(result_path, json.dumps(result, sort_keys=True, indent=1))
    return result


def run_benchmark(
    cfg: BenchmarkConfig | None = None,
    cache_dir=None,
    with_ablations: bool = True,
) -> dict:
    """Full benchmark; returns a results dict (variant metrics + history stats)."""
    cfg = cfg or BenchmarkConfig()
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    cache_dir.mkdir(parents=True, exist_ok=True)

    train_dir = cached_dataset(cfg.data_train, cache_dir, "train")
    eval_dir = cached_dataset(cfg.data_eval, cache_dir, "eval")

    mdm_model = cached_model(train_mdm, train_dir, cfg.mdm_train, cache_dir, "mdm")
    cdm_model = cached_model(train_cdm, train_dir, cfg.cdm_train, cache_dir, "cdm")

    pipe = cfg.pipeline
    results: dict = {"config": _stage_key("bench", asdict(cfg))}

    def eval_payload(extra):
        return {"bench": asdict(cfg), **extra}

    results["main"] = cached_eval(
        "main",
        eval_payload({"variant": "main"}),
        cache_dir,
        lambda: evaluate_pipeline(mdm_model, cdm_model, eval_dir, pipe),
    )
    results["inject_gt"] = cached_eval(
        "inject",
        eval_payload({"variant": "inject"}),
        cache_dir,
        lambda: evaluate_pipeline(mdm_model, cdm_model, eval_dir, pipe, inject_gt_field=True),
    )

    results["mdm_history"] = _read_history_stats(cache_dir, cfg, "mdm")
    results["cdm_history"] = _read_history_stats(cache_dir, cfg, "cdm")

    if with_ablations:
        nomask_cfg = replace(cfg.mdm_train, use_cond_mask=False)
        mdm_nomask = cached_model(train_mdm, train_dir, nomask_cfg, cache_dir, "mdm_nomask")
        results["nomask"] = cached_eval(
            "nomask",
            eval_payload({"variant": "nomask"}),
            cache_dir,
            lambda: evaluate_pipeline(mdm_nomask, cdm_model, eval_dir, pipe),
        )
        fixed_pipe = replace(pipe, wsm="fixed")
        results["fixed_mask"] = cached_eval(
            "fixed",
            eval_payload({"variant": "fixed"}),
            cache_dir,
            lambda: evaluate_pipeline(mdm_model, cdm_model, eval_dir, fixed_pipe),
        )
    return results


def asdict_pipeline(pipe: PipelineConfig) -> dict:
    d = asdict(pipe)
    d["mdm_sampler"] = SamplerConfig(**d["mdm_sampler"])
    d["cdm_sampler"] = SamplerConfig(**d["cdm_sampler"])
    return d


def _read_history_stats(cache_dir: Path, cfg: BenchmarkConfig, which: str) -> dict:
    import csv as _csv

    train_cfg = cfg.mdm_train if which == "mdm" else cfg.cdm_train
    train_dir = _stage_dir(cache_dir, "data_train", asdict(cfg.data_train))
    out = _stage_dir(
        cache_dir, f"model_{which}", {"train": asdict(train_cfg), "data": train_dir.name}
    )
    path = out / f"{which}_history.csv"
    if not path.exists():
        return {}
    with open(path) as f:
        rdr = _csv.reader(f)
        next(rdr)
        losses = [float(r[-1]) for r in rdr]
    if len(losses) < 200:
        return {}
    return {
        "leading_100_mean": float(np.mean(losses[:100])),
        "trailing_100_mean": float(np.mean(losses[-100:])),
    }
