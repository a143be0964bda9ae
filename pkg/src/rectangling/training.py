"""Shared training-loop machinery for both diffusion models.

Every per-step random draw (batch indices, timesteps, noise, condition
dropout) is keyed by (seed, stream, global step), so an interrupted run
resumed from a checkpoint replays the exact same trajectory.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import (
    AdamState,
    Denoiser,
    DenoiserParams,
    NetConfig,
    adam_step,
    init_adam_state,
)
from .rng import (
    STREAM_BATCH,
    STREAM_DROPOUT,
    STREAM_NOISE,
    STREAM_TIMESTEP,
    philox_generator,
)
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 8
    lr: float = 2e-4
    cond_drop: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 16
    emb_dim: int = 32
    max_disp: float = 6.0
    use_cond_mask: bool = True
    precision: str = "float64"
    ckpt_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.cond_drop < 1.0:
            raise ValueError(f"cond_drop must be in [0, 1), got {self.cond_drop}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision}")


@dataclass
class TrainedModel:
    """Checkpoint-backed bundle: network, parameters, schedule, metadata."""

    net: Denoiser
    params: DenoiserParams
    sched: NoiseSchedule
    meta: dict

    @property
    def task(self) -> str:
        return self.meta.get("task", "?")


def build_net(cfg: TrainConfig, out_channels: int) -> Denoiser:
    return Denoiser(
        NetConfig(
            out_channels=out_channels,
            cond_channels=4,
            base_channels=cfg.base_channels,
            emb_dim=cfg.emb_dim,
            dtype=cfg.precision,
            init_seed=cfg.seed,
        )
    )


def model_meta(task: str, cfg: TrainConfig) -> dict:
    return {"task": task, "train_config": asdict(cfg)}


def save_model(path, model: TrainedModel) -> None:
    save_checkpoint(path, model.net, model.params, model.meta)


def load_model(path) -> TrainedModel:
    net, params, meta = load_checkpoint(path)
    tc = meta.get("train_config", {})
    sched = make_schedule(
        tc.get("T", 1000), tc.get("beta_start", 1e-4), tc.get("beta_end", 0.02)
    )
    return TrainedModel(net=net, params=params, sched=sched, meta=meta)


def save_opt_state(path, state: AdamState, step: int) -> None:
    np.savez(
        path,
        m=state.m,
        v=state.v,
        adam_step=np.int64(state.step),
        lr=np.float64(state.lr),
        beta1=np.float64(state.beta1),
        beta2=np.float64(state.beta2),
        eps_hat=np.float64(state.eps_hat),
        train_step=np.int64(step),
    )


def load_opt_state(path):
    z = np.load(path)
    state = AdamState(
        m=z["m"],
        v=z["v"],
        step=int(z["adam_step"]),
        lr=float(z["lr"]),
        beta1=float(z["beta1"]),
        beta2=float(z["beta2"]),
        eps_hat=float(z["eps_hat"]),
    )
    return state, int(z["train_step"])


def write_history_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


@dataclass
class StepBatch:
    """Everything a model-specific loss step needs for one update."""

    idx: np.ndarray        # (B,) sample indices
    t: np.ndarray          # (B,) int timesteps
    eps: np.ndarray        # (B, C, H, W) forward-diffusion noise
    dropped: np.ndarray    # (B,) condition-dropout flags
    cond: np.ndarray       # (B, 4, H, W) conditioning planes


def _assemble_cond(dataset, idx, use_cond_mask: bool) -> np.ndarray:
    i_s = dataset.I_S[idx].transpose(0, 3, 1, 2)
    m_s = dataset.M_S[idx][:, None, :, :]
    if not use_cond_mask:
        m_s = np.zeros_like(m_s)
    return np.concatenate([i_s, m_s], axis=1)


def run_training(
    dataset,
    cfg: TrainConfig,
    out_channels: int,
    step_fn,
    history_columns,
    out_dir=None,
    prefix: str = "model",
    resume_from=None,
):
    """Generic training driver.

    step_fn(net, params, sched, batch: StepBatch, dataset) must return
    (grad_vector, history_row_tail) where the row tail holds the loss values
    for this step. Non-finite losses skip the update and are logged.

    Returns (TrainedModel, history rows).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    net = build_net(cfg, out_channels)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    history: list = []
    start_step = 0

    if resume_from is not None:
        model = load_model(resume_from)
        if model.net.cfg != net.cfg:
            raise ValueError("resume checkpoint was trained with a different config")
        params = model.params
        state, start_step = load_opt_state(str(resume_from) + ".opt.npz")
        hist_path = Path(resume_from).parent / f"{prefix}_history.csv"
        if hist_path.exists():
            with open(hist_path) as f:
                rdr = csv.reader(f)
                next(rdr)
                history = [
                    (int(r[0]), *(float(v) for v in r[1:]))
                    for r in rdr
                    if int(r[0]) < start_step
                ]
    else:
        params = net.init_params()
        state = init_adam_state(net.param_count, cfg.lr)

    n = len(dataset)
    B = cfg.batch_size
    meta = model_meta(prefix, cfg)

    def checkpoint(step):
        if out_dir is None:
            return
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{prefix}.ckpt"
        save_checkpoint(path, net, params, meta)
        save_opt_state(str(path) + ".opt.npz", state, step)
        write_history_csv(out / f"{prefix}_history.csv", history_columns, history)

    for step in range(start_step, cfg.steps):
        idx = philox_generator(cfg.seed, STREAM_BATCH, step).integers(0, n, B)
        t = philox_generator(cfg.seed, STREAM_TIMESTEP, step).integers(0, cfg.T, B)
        eps = philox_generator(cfg.seed, STREAM_NOISE, step).standard_normal(
            (B, out_channels, dataset.I_S.shape[1], dataset.I_S.shape[2])
        )
        dropped = philox_generator(cfg.seed, STREAM_DROPOUT, step).random(B) < cfg.cond_drop
        batch = StepBatch(
            idx=idx,
            t=t,
            eps=eps,
            dropped=dropped,
            cond=_assemble_cond(dataset, idx, cfg.use_cond_mask),
        )
        grads, row_tail = step_fn(net, params, sched, batch, dataset)
        if grads is None or not np.all(np.isfinite(grads)):
            log.warning("step %d: non-finite loss/gradient, skipping update", step)
            continue
        params, state = adam_step(params, grads, state)
        history.append((step, *row_tail))
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            checkpoint(step + 1)

    checkpoint(cfg.steps)
    return TrainedModel(net=net, params=params, sched=sched, meta=meta), history
