"""Image quality metrics and alignment heatmaps.

PSNR on unit dynamic range with a 100 dB cap, mean local SSIM with the
standard 11-tap Gaussian window (sigma 1.5), and a per-pixel difference
heatmap on a fixed monotone dark-to-bright colormap.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_SSIM_SIGMA = 1.5
_SSIM_SUPPORT = 11
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    raise ValueError(f"expected H x W or H x W x 3 image, got {img.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images return 100."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel():
    r = _SSIM_SUPPORT // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * _SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, 'valid' region only."""
    k = _gaussian_kernel()
    tmp = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, k, mode="valid"), 0, tmp)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over luminance, unit dynamic range."""
    a, b = _check_pair(a, b)
    x = to_luma(a)
    y = to_luma(b)
    if min(x.shape) < _SSIM_SUPPORT:
        raise ValueError(
            f"image {x.shape} smaller than the {_SSIM_SUPPORT}-tap SSIM window"
        )
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    var_x = _filter_valid(x * x) - mu_x**2
    var_y = _filter_valid(y * y) - mu_y**2
    cov = _filter_valid(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    return float(np.mean(num / den))


# Monotone dark-to-bright ramp: black -> deep red -> orange -> white.
_RAMP_STOPS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
_RAMP_COLORS = np.array(
    [[0.0, 0.0, 0.0], [0.55, 0.0, 0.0], [1.0, 0.55, 0.0], [1.0, 1.0, 1.0]]
)


def heat_colormap(v: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB with luminance strictly increasing in v."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    out = np.empty(v.shape + (3,))
    for c in range(3):
        out[..., c] = np.interp(v, _RAMP_STOPS, _RAMP_COLORS[:, c])
    return out


def heatmap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Alignment heatmap: dark where images agree, bright where they differ."""
    a, b = _check_pair(a, b)
    return heat_colormap(np.abs(to_luma(a) - to_luma(b)))


@dataclass
class EvalReport:
    """Per-sample metric rows plus aggregate means and baseline deltas."""

    names: list = field(default_factory=list)
    psnr_rows: list = field(default_factory=list)
    ssim_rows: list = field(default_factory=list)
    ref_psnr_rows: list = field(default_factory=list)
    ref_ssim_rows: list = field(default_factory=list)

    def add(self, name, psnr_val, ssim_val, ref_psnr=None, ref_ssim=None):
        self.names.append(str(name))
        self.psnr_rows.append(float(psnr_val))
        self.ssim_rows.append(float(ssim_val))
        if ref_psnr is not None:
            self.ref_psnr_rows.append(float(ref_psnr))
        if ref_ssim is not None:
            self.ref_ssim_rows.append(float(ref_ssim))

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_rows))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_rows))

    @property
    def ref_psnr_mean(self) -> float:
        return float(np.mean(self.ref_psnr_rows)) if self.ref_psnr_rows else float("nan")

    @property
    def ref_ssim_mean(self) -> float:
        return float(np.mean(self.ref_ssim_rows)) if self.ref_ssim_rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            header = ["name", "psnr", "ssim"]
            has_ref = len(self.ref_psnr_rows) == len(self.names)
            if has_ref:
                header += ["ref_psnr", "ref_ssim"]
            w.writerow(header)
            for i, name in enumerate(self.names):
                row = [name, repr(self.psnr_rows[i]), repr(self.ssim_rows[i])]
                if has_ref:
                    row += [repr(self.ref_psnr_rows[i]), repr(self.ref_ssim_rows[i])]
                w.writerow(row)

    def summary(self) -> str:
        lines = [
            f"{'row':<12} {'PSNR':>8} {'SSIM':>8}",
            f"{'outputs':<12} {self.psnr_mean:>8.3f} {self.ssim_mean:>8.4f}",
        ]
        if self.ref_psnr_rows:
            lines.append(
                f"{'reference':<12} {self.ref_psnr_mean:>8.3f} {self.ref_ssim_mean:>8.4f}"
            )
            lines.append(
                f"{'delta':<12} {self.psnr_mean - self.ref_psnr_mean:>+8.3f} "
                f"{self.ssim_mean - self.ref_ssim_mean:>+8.4f}"
            )
        return "\n".join(lines)
