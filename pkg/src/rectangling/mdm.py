"""Motion diffusion model: training and sampling of rectangling motion fields.

The network learns to predict the clean rectifying field directly from a
noised field plus the stitched image and its content mask. Fields enter
diffusion space normalized by max_disp (so they live in [-1, 1]) and are
denormalized back to pixels after sampling. The coarse rectangled image is
the stitched input backward-warped by the sampled field with white fill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import STREAM_SAMPLER, seeded_gaussian
from .schedule import SamplerConfig, cfg_combine, ddim_step, ddim_timesteps
from .training import StepBatch, TrainConfig, TrainedModel, run_training
from .warp import backward_warp, warp_grad_field

_WEIGHT_EPS = 1e-8
WHITE_FILL = 1.0

MDM_HISTORY_COLUMNS = ("step", "l_mse", "l_pl", "weight", "l_total")


def normalize_field(field: np.ndarray, max_disp: float) -> np.ndarray:
    return np.asarray(field, dtype=np.float64) / max_disp


def denormalize_field(field: np.ndarray, max_disp: float) -> np.ndarray:
    return np.asarray(field, dtype=np.float64) * max_disp


@dataclass(frozen=True)
class MdmLossReport:
    l_mse: float
    l_pl: float
    weight: float
    l_total: float


def mdm_loss(
    x0_hat: np.ndarray,
    x0: np.ndarray,
    I_R_hat: np.ndarray,
    I_R: np.ndarray,
) -> MdmLossReport:
    """Field MSE plus ratio-weighted photometric term.

    The ratio weight |l_mse| / |l_pl| is treated as a per-batch constant:
    it balances magnitudes but carries no gradient.
    """
    if x0_hat.shape != x0.shape or I_R_hat.shape != I_R.shape:
        raise ValueError("shape mismatch between predictions and targets")
    if not (np.all(np.isfinite(x0_hat)) and np.all(np.isfinite(I_R_hat))):
        raise ValueError("non-finite values in loss inputs")
    l_mse = float(np.mean((x0_hat - x0) ** 2))
    l_pl = float(np.mean(np.abs(I_R_hat - I_R)))
    weight = l_mse / max(l_pl, _WEIGHT_EPS)
    return MdmLossReport(l_mse=l_mse, l_pl=l_pl, weight=weight, l_total=l_mse + weight * l_pl)


def _mdm_step(cfg: TrainConfig):
    """Build the per-step loss/gradient closure for run_training."""

    def step_fn(net, params, sched, batch: StepBatch, dataset):
        B = batch.idx.size
        x0 = normalize_field(dataset.F_gt[batch.idx], cfg.max_disp).transpose(0, 3, 1, 2)
        ab = sched.alpha_bars[batch.t][:, None, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * batch.eps
        pred, cache = net.forward_batch(
            params, x_t, batch.cond, batch.t.astype(np.float64), batch.dropped
        )

        # Photometric pass: warp each stitched input by its predicted field.
        fields_px = denormalize_field(pred.transpose(0, 2, 3, 1), cfg.max_disp)
        warped = np.empty_like(dataset.I_R[batch.idx])
        for b in range(B):
            warped[b] = backward_warp(
                dataset.I_S[batch.idx[b]], fields_px[b], fill=WHITE_FILL
            ).image
        gt = dataset.I_R[batch.idx]
        report = mdm_loss(pred, x0, warped, gt)
        if not np.isfinite(report.l_total):
            return None, (np.nan, np.nan, np.nan, np.nan)

        grad_pred = 2.0 * (pred - x0) / pred.size
        g_photo = report.weight * np.sign(warped - gt) / gt.size
        for b in range(B):
            gf = warp_grad_field(
                dataset.I_S[batch.idx[b]], fields_px[b], g_photo[b], fill=WHITE_FILL
            )
            grad_pred[b] += cfg.max_disp * gf.transpose(2, 0, 1)
        grads = net.backward_batch(params, cache, grad_pred)
        return grads, (report.l_mse, report.l_pl, report.weight, report.l_total)

    return step_fn


def train_mdm(dataset, cfg: TrainConfig, out_dir=None, resume_from=None):
    """Train the motion model; returns (TrainedModel, history rows)."""
    if dataset.F_gt is None:
        raise ValueError(
            "dataset has no motion fields; supply field files to train the motion model"
        )
    return run_training(
        dataset,
        cfg,
        out_channels=2,
        step_fn=_mdm_step(cfg),
        history_columns=MDM_HISTORY_COLUMNS,
        out_dir=out_dir,
        prefix="mdm",
        resume_from=resume_from,
    )


def _cond_planes(model: TrainedModel, I_S: np.ndarray, M_S: np.ndarray) -> np.ndarray:
    mask = M_S
    if not model.meta.get("train_config", {}).get("use_cond_mask", True):
        mask = np.zeros_like(M_S)
    return np.concatenate(
        [I_S.transpose(2, 0, 1), mask[None, :, :]], axis=0
    )[None]


def _predict_x0(model: TrainedModel, x, cond, t: int, sampler: SamplerConfig) -> np.ndarray:
    """Denoiser evaluation with classifier-free guidance on the x0 plane."""
    if sampler.cfg_scale == 1.0:
        noisy = x[None]
        pred, _ = model.net.forward_batch(
            model.params, noisy, cond, np.array([float(t)]), np.array([False])
        )
        combined = pred[0]
    else:
        noisy = np.stack([x, x])
        cond2 = np.concatenate([cond, cond], axis=0)
        pred, _ = model.net.forward_batch(
            model.params,
            noisy,
            cond2,
            np.array([float(t), float(t)]),
            np.array([False, True]),
        )
        combined = cfg_combine(pred[0], pred[1], sampler.cfg_scale)
    if sampler.clip_x0:
        combined = np.clip(combined, -1.0, 1.0)
    return combined


def ddim_sample(model: TrainedModel, shape_chw, cond, sampler: SamplerConfig) -> np.ndarray:
    """Shared DDIM loop; returns the final clean prediction (C, H, W)."""
    sched = model.sched
    ts = ddim_timesteps(sched.T, sampler.num_steps)
    x = seeded_gaussian(shape_chw, sampler.seed, STREAM_SAMPLER, index=0)
    x0_pred = None
    for i, t in enumerate(ts):
        t = int(t)
        x0_pred = _predict_x0(model, x, cond, t, sampler)
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
        noise = None
        if sampler.eta > 0 and t_prev >= 0:
            noise = seeded_gaussian(shape_chw, sampler.seed, STREAM_SAMPLER, index=1 + i)
        x = ddim_step(x, x0_pred, t, t_prev, sched, eta=sampler.eta, noise=noise).data
    return x0_pred


def sample_motion(
    model: TrainedModel, I_S: np.ndarray, M_S: np.ndarray, sampler: SamplerConfig
) -> np.ndarray:
    """Generate a rectangling motion field (H x W x 2, pixels) for one image."""
    if model.task != "mdm":
        raise ValueError(f"expected a motion-model checkpoint, got task {model.task!r}")
    H, W = I_S.shape[:2]
    cond = _cond_planes(model, I_S, M_S)
    x0 = ddim_sample(model, (2, H, W), cond, sampler)
    max_disp = model.meta.get("train_config", {}).get("max_disp", 6.0)
    return denormalize_field(x0.transpose(1, 2, 0), max_disp)


def rectangle_coarse(I_S: np.ndarray, M_S: np.ndarray, field: np.ndarray):
    """Warp the stitched image by the motion field with white fill.

    Returns (coarse image, validity); validity folds in the warped content
    mask so both out-of-range taps and margin-sourced pixels read as invalid.
    """
    res = backward_warp(I_S, field, fill=WHITE_FILL, src_validity=M_S)
    return res.image, res.validity
