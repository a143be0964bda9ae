"""Synthetic dataset generation and directory loaders.

Each sample starts from a procedural rectangular image I_R. A smooth
low-frequency degradation field G warps it into a "stitched" image I_S with
white margins and an irregular content boundary, mimicking what stitching
pipelines emit. The rectifying field F (the training target) is recovered by
numerically inverting G, so backward-warping I_S by F restores I_R on the
mutually valid region.

Dataset directory layout:
    img/NNNNN.png    stitched input I_S
    mask/NNNNN.png   binary stitched-content mask M_S
    gt/NNNNN.png     rectangular ground truth I_R
    field/NNNNN.f32  rectifying field, raw little-endian float32 H x W x 2
    manifest.json    config echo + per-sample baseline metrics
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .io_utils import (
    load_image_png,
    quantize_image,
    read_manifest,
    save_image_png,
    write_manifest,
)
from .metrics import psnr, ssim
from .rng import STREAM_DATA, philox_generator
from .warp import backward_warp, load_field_raw, save_field_raw

log = logging.getLogger(__name__)

FIELD_FAMILIES = ("boundary-shrink", "smooth-random")


@dataclass(frozen=True)
class SynthConfig:
    H: int = 48
    W: int = 64
    n_samples: int = 500
    field_family: str = "boundary-shrink"
    max_disp: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.H % 4 or self.W % 4 or self.H < 16 or self.W < 16:
            raise ValueError(f"H, W must be >= 16 and divisible by 4, got {self.H}x{self.W}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.field_family not in FIELD_FAMILIES:
            raise ValueError(f"field_family must be one of {FIELD_FAMILIES}")
        diag = float(np.hypot(self.H, self.W))
        if not 0 < self.max_disp <= 0.1 * diag:
            raise ValueError(
                f"max_disp must be in (0, {0.1 * diag:.2f}] for {self.W}x{self.H}"
            )


@dataclass
class MdmSample:
    I_S: np.ndarray
    M_S: np.ndarray
    F_gt: np.ndarray | None
    I_R: np.ndarray


@dataclass
class Dataset:
    """Stacked sample arrays for training and evaluation."""

    I_S: np.ndarray  # (N, H, W, 3)
    M_S: np.ndarray  # (N, H, W)
    I_R: np.ndarray  # (N, H, W, 3)
    F_gt: np.ndarray | None  # (N, H, W, 2) or None
    names: list
    manifest: dict | None = None

    def __len__(self):
        return self.I_S.shape[0]

    def sample(self, i: int) -> MdmSample:
        return MdmSample(
            I_S=self.I_S[i],
            M_S=self.M_S[i],
            F_gt=None if self.F_gt is None else self.F_gt[i],
            I_R=self.I_R[i],
        )


# ---------------------------------------------------------------------------
# Base image generation


def _draw_plan(rng: np.random.Generator, H: int, W: int) -> dict:
    """Random scene description: gradient background, shapes, >= 2 lines."""
    plan = {
        "grad_c0": rng.uniform(0.1, 0.9, 3),
        "grad_c1": rng.uniform(0.1, 0.9, 3),
        "grad_angle": rng.uniform(0, 2 * np.pi),
        "rects": [],
        "circles": [],
        "lines": [],
        "lo": rng.uniform(0.02, 0.10),
        "hi": rng.uniform(0.88, 0.95),
    }
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9) * H, rng.uniform(0.1, 0.9) * W
        hh, hw = rng.uniform(0.05, 0.25) * H, rng.uniform(0.05, 0.25) * W
        plan["rects"].append((cy, cx, hh, hw, rng.uniform(0.0, 1.0, 3)))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        r = rng.uniform(0.05, 0.2) * min(H, W)
        plan["circles"].append((cy, cx, r, rng.uniform(0.0, 1.0, 3)))
    for _ in range(rng.integers(2, 5)):
        p0 = rng.uniform(0, 1, 2) * (H - 1, W - 1)
        p1 = rng.uniform(0, 1, 2) * (H - 1, W - 1)
        color = rng.uniform(0.0, 1.0, 3)
        width = rng.uniform(0.7, 1.6)
        plan["lines"].append((p0, p1, color, width))
    return plan


def _render_plan(plan: dict, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    u = (np.cos(plan["grad_angle"]) * xs / max(W - 1, 1)
         + np.sin(plan["grad_angle"]) * ys / max(H - 1, 1))
    u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
    img = plan["grad_c0"][None, None, :] * (1 - u[..., None]) + plan["grad_c1"][None, None, :] * u[..., None]

    for cy, cx, hh, hw, color in plan["rects"]:
        dy = np.abs(ys - cy) - hh
        dx = np.abs(xs - cx) - hw
        alpha = np.clip(1.0 - np.maximum(dy, dx), 0.0, 1.0)
        img = img * (1 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    for cy, cx, r, color in plan["circles"]:
        d = np.hypot(ys - cy, xs - cx) - r
        alpha = np.clip(1.0 - d, 0.0, 1.0)
        img = img * (1 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    for p0, p1, color, width in plan["lines"]:
        d = _dist_to_segment(ys, xs, p0, p1)
        alpha = np.clip(width + 0.5 - d, 0.0, 1.0)
        img = img * (1 - alpha[..., None]) + color[None, None, :] * alpha[..., None]

    img = gaussian_filter(img, sigma=(0.6, 0.6, 0.0))
    lo, hi = plan["lo"], plan["hi"]
    mn, mx = img.min(), img.max()
    img = (img - mn) / max(mx - mn, 1e-9) * (hi - lo) + lo
    return img


def _dist_to_segment(ys, xs, p0, p1) -> np.ndarray:
    v = np.array([p1[0] - p0[0], p1[1] - p0[1]])
    vv = float(v @ v)
    wy, wx = ys - p0[0], xs - p0[1]
    t = np.clip((wy * v[0] + wx * v[1]) / max(vv, 1e-9), 0.0, 1.0)
    return np.hypot(wy - t * v[0], wx - t * v[1])


def gen_base_image(rng: np.random.Generator, H: int, W: int, return_plan: bool = False):
    """Procedural ground-truth image: gradients, shapes, straight lines.

    Values stay strictly below 1.0 so pure white only ever means warp fill.
    """
    plan = _draw_plan(rng, H, W)
    img = _render_plan(plan, H, W)
    if return_plan:
        return img, plan
    return img


# ---------------------------------------------------------------------------
# Degradation fields and inversion


def _smooth_noise_field(rng, H, W, amp, grid=(3, 4)) -> np.ndarray:
    coarse = rng.uniform(-amp, amp, grid + (2,))
    return np.stack(
        [
            zoom(coarse[..., k], (H / grid[0], W / grid[1]), order=3, mode="nearest", grid_mode=True)
            for k in (0, 1)
        ],
        axis=-1,
    )


def draw_degradation_field(rng, cfg: SynthConfig) -> np.ndarray:
    """Smooth field G applied to I_R to synthesize the stitched image."""
    H, W = cfg.H, cfg.W
    if cfg.field_family == "smooth-random":
        return _smooth_noise_field(rng, H, W, 0.55 * cfg.max_disp)
    # boundary-shrink: sample positions spread outward around the center so
    # content contracts inward and margins leave the source frame.
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2.0 + rng.uniform(-0.08, 0.08) * H, (W - 1) / 2.0 + rng.uniform(-0.08, 0.08) * W
    half_diag = 0.5 * np.hypot(H - 1, W - 1)
    mag = rng.uniform(0.35, 0.7) * cfg.max_disp
    lam = mag / half_diag
    mod = 1.0 + 0.4 * _smooth_noise_field(rng, H, W, 1.0)[..., 0]
    g = np.stack([(xs - cx) * lam * mod, (ys - cy) * lam * mod], axis=-1)
    g += _smooth_noise_field(rng, H, W, 0.12 * cfg.max_disp)
    return g


def _sample_field_clamped(field: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear sample of a 2-channel field with edge-clamped coordinates."""
    H, W = field.shape[:2]
    sx = np.clip(px, 0.0, W - 1.0)
    sy = np.clip(py, 0.0, H - 1.0)
    x0 = np.clip(np.floor(sx).astype(int), 0, W - 2) if W > 1 else np.zeros_like(sx, int)
    y0 = np.clip(np.floor(sy).astype(int), 0, H - 2) if H > 1 else np.zeros_like(sy, int)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    v00 = field[y0, x0]
    v10 = field[y0, x0 + 1]
    v01 = field[y0 + 1, x0]
    v11 = field[y0 + 1, x0 + 1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v10 * fx * (1 - fy)
        + v01 * (1 - fx) * fy
        + v11 * fx * fy
    )


class FieldInversionError(RuntimeError):
    pass


def invert_field(g: np.ndarray, max_iters: int = 50, tol: float = 1e-3) -> np.ndarray:
    """Fixed-point inversion: find F with F(p) = -G(p + F(p)).

    Backward-warping by F then by G composes to identity where defined.
    """
    H, W = g.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    f = -g.copy()
    for _ in range(max_iters):
        g_at = _sample_field_clamped(g, xs + f[..., 0], ys + f[..., 1])
        f_next = -g_at
        delta = float(np.max(np.abs(f_next - f)))
        f = f_next
        if delta < tol:
            return f
    raise FieldInversionError(f"fixed-point inversion stalled (residual {delta:.2e} px)")


# ---------------------------------------------------------------------------
# Sample synthesis

VALIDITY_THRESHOLD = 0.999
_MIN_RECON_PSNR = 31.0  # acceptance floor is 30 dB; keep a margin


class SampleRejected(RuntimeError):
    pass


def synth_pair(I_R: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> MdmSample:
    """One degradation draw -> MdmSample. Raises SampleRejected on a draw
    whose inversion violates the field-magnitude or reconstruction contracts."""
    g = draw_degradation_field(rng, cfg)
    warped = backward_warp(I_R, g, fill=1.0)
    m_s = (warped.validity >= VALIDITY_THRESHOLD).astype(np.float64)
    i_s = np.where(m_s[..., None] == 1.0, warped.image, 1.0)

    try:
        f = invert_field(g)
    except FieldInversionError as e:
        raise SampleRejected(str(e)) from e
    if not np.all(np.isfinite(f)):
        raise SampleRejected("inverted field is not finite")
    mag = float(np.max(np.hypot(f[..., 0], f[..., 1])))
    if mag > cfg.max_disp:
        raise SampleRejected(f"field magnitude {mag:.2f} exceeds max_disp {cfg.max_disp}")

    recon = backward_warp(i_s, f, fill=1.0, src_validity=m_s)
    valid = recon.validity >= VALIDITY_THRESHOLD
    if valid.sum() < 0.25 * valid.size:
        raise SampleRejected("mutually valid region too small")
    err = (recon.image - I_R)[valid]
    mse = float(np.mean(err**2))
    recon_psnr = 10.0 * np.log10(1.0 / max(mse, 1e-12))
    if recon_psnr < _MIN_RECON_PSNR:
        raise SampleRejected(f"reconstruction PSNR {recon_psnr:.1f} dB below floor")
    return MdmSample(I_S=i_s, M_S=m_s, F_gt=f, I_R=I_R)


def generate_sample(cfg: SynthConfig, index: int) -> MdmSample:
    """Deterministic sample keyed by (cfg.seed, index); redraws on rejection."""
    rng = philox_generator(cfg.seed, STREAM_DATA, index)
    for attempt in range(20):
        I_R = gen_base_image(rng, cfg.H, cfg.W)
        try:
            return synth_pair(I_R, rng, cfg)
        except SampleRejected as e:
            log.info("sample %d attempt %d rejected: %s", index, attempt, e)
    raise RuntimeError(f"sample {index}: 20 consecutive draws rejected")


def write_dataset(dirpath, cfg: SynthConfig) -> dict:
    """Generate cfg.n_samples quadruples into dirpath; returns the manifest.

    Baseline (stitched vs ground truth) metrics are computed on the quantized
    images exactly as a later loader will see them.
    """
    root = Path(dirpath)
    for sub in ("img", "mask", "gt", "field"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.n_samples):
        s = generate_sample(cfg, i)
        name = f"{i:05d}"
        save_image_png(root / "img" / f"{name}.png", s.I_S)
        save_image_png(root / "mask" / f"{name}.png", s.M_S)
        save_image_png(root / "gt" / f"{name}.png", s.I_R)
        save_field_raw(root / "field" / f"{name}.f32", s.F_gt)
        q_is = quantize_image(s.I_S) / 255.0
        q_ir = quantize_image(s.I_R) / 255.0
        rows.append(
            {"name": name, "psnr": psnr(q_is, q_ir), "ssim": ssim(q_is, q_ir)}
        )
    manifest = {
        "kind": "synthetic-rectangling-dataset",
        "format_version": 1,
        "config": asdict(cfg),
        "n_samples": cfg.n_samples,
        "baseline": {
            "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
            "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
            "rows": rows,
        },
    }
    write_manifest(root, manifest)
    return manifest


# ---------------------------------------------------------------------------
# Loaders

_INPUT_DIR_NAMES = ("img", "input", "inputs")
_MASK_DIR_NAMES = ("mask", "masks")
_GT_DIR_NAMES = ("gt", "gts", "ground_truth")


def _find_subdir(root: Path, names) -> Path | None:
    for n in names:
        if (root / n).is_dir():
            return root / n
    return None


def load_dird(path) -> Dataset:
    """Load a directory of input/mask/gt image triplets (DIR-D layout).

    Samples are matched by stem; unmatched or size-mismatched entries are
    skipped with a warning. Rectifying fields are attached when a field/
    directory supplies them (raw float32, one .f32 per sample stem).
    """
    root = Path(path)
    d_in = _find_subdir(root, _INPUT_DIR_NAMES)
    d_mask = _find_subdir(root, _MASK_DIR_NAMES)
    d_gt = _find_subdir(root, _GT_DIR_NAMES)
    if d_in is None or d_mask is None or d_gt is None:
        raise FileNotFoundError(
            f"{root}: expected input/mask/gt image directories "
            f"(accepted names: {_INPUT_DIR_NAMES}/{_MASK_DIR_NAMES}/{_GT_DIR_NAMES})"
        )
    d_field = root / "field"

    stems = sorted(p.stem for p in d_in.glob("*.png"))
    i_s_list, m_list, gt_list, f_list, names = [], [], [], [], []
    fields_present = d_field.is_dir()
    for stem in stems:
        p_mask = d_mask / f"{stem}.png"
        p_gt = d_gt / f"{stem}.png"
        if not p_mask.exists() or not p_gt.exists():
            log.warning("skipping %s: missing mask or gt counterpart", stem)
            continue
        i_s = load_image_png(d_in / f"{stem}.png")
        m_s = load_image_png(p_mask)
        i_r = load_image_png(p_gt)
        if m_s.ndim == 3:
            m_s = m_s.mean(axis=2)
        if i_s.ndim == 2:
            i_s = np.repeat(i_s[..., None], 3, axis=2)
        if i_r.ndim == 2:
            i_r = np.repeat(i_r[..., None], 3, axis=2)
        if i_s.shape[:2] != m_s.shape[:2] or i_s.shape != i_r.shape:
            log.warning("skipping %s: dimension mismatch", stem)
            continue
        f = None
        if fields_present:
            pf = d_field / f"{stem}.f32"
            if pf.exists():
                f = load_field_raw(pf, i_s.shape[0], i_s.shape[1])
        i_s_list.append(i_s)
        m_list.append((m_s >= 0.5).astype(np.float64))
        gt_list.append(i_r)
        f_list.append(f)
        names.append(stem)
    if not names:
        raise ValueError(f"{root}: no usable samples found")

    have_all_fields = all(f is not None for f in f_list)
    manifest = None
    try:
        manifest = read_manifest(root)
    except FileNotFoundError:
        pass
    return Dataset(
        I_S=np.stack(i_s_list),
        M_S=np.stack(m_list),
        I_R=np.stack(gt_list),
        F_gt=np.stack(f_list) if have_all_fields else None,
        names=names,
        manifest=manifest,
    )


def load_dataset(path) -> Dataset:
    """Loader for directories produced by write_dataset."""
    return load_dird(path)


def load_inputs(path):
    """Inference-time loader: img+mask (gt optional), plus any field files.

    Returns (names, I_S list, M_S list, F_gt list with None gaps).
    """
    root = Path(path)
    d_in = _find_subdir(root, _INPUT_DIR_NAMES)
    d_mask = _find_subdir(root, _MASK_DIR_NAMES)
    if d_in is None or d_mask is None:
        raise FileNotFoundError(f"{root}: expected input and mask image directories")
    d_field = root / "field"
    names, i_s_list, m_list, f_list = [], [], [], []
    for p in sorted(d_in.glob("*.png")):
        stem = p.stem
        p_mask = d_mask / f"{stem}.png"
        if not p_mask.exists():
            log.warning("skipping %s: missing mask counterpart", stem)
            continue
        i_s = load_image_png(p)
        if i_s.ndim == 2:
            i_s = np.repeat(i_s[..., None], 3, axis=2)
        m_s = load_image_png(p_mask)
        if m_s.ndim == 3:
            m_s = m_s.mean(axis=2)
        if i_s.shape[:2] != m_s.shape[:2]:
            log.warning("skipping %s: dimension mismatch", stem)
            continue
        f = None
        pf = d_field / f"{stem}.f32"
        if pf.exists():
            f = load_field_raw(pf, i_s.shape[0], i_s.shape[1])
        names.append(stem)
        i_s_list.append(i_s)
        m_list.append((m_s >= 0.5).astype(np.float64))
        f_list.append(f)
    if not names:
        raise ValueError(f"{root}: no usable input/mask pairs found")
    return names, i_s_list, m_list, f_list
