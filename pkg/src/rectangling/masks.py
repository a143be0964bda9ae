"""Component masks and the confidence mask that drives weighted sampling.

The confidence mask grades each pixel of the coarse warped result: 1 means
"keep this pixel", 0 means "regenerate it". It combines the hard white-edge
mask, the motion-intensity map, and the warped stitched-content mask.
"""

from __future__ import annotations

import numpy as np

from .warp import WarpResult


def intensity_map(field: np.ndarray, norm_len: float) -> np.ndarray:
    """Per-pixel displacement magnitude divided by norm_len, clamped to [0, 1]."""
    if norm_len <= 0:
        raise ValueError(f"norm_len must be > 0, got {norm_len}")
    mag = np.sqrt(field[..., 0] ** 2 + field[..., 1] ** 2)
    return np.clip(mag / norm_len, 0.0, 1.0)


def white_edge_mask(warp_result: WarpResult | np.ndarray, tau_valid: float = 0.999) -> np.ndarray:
    """Hard mask: 1 where warp validity fell below tau_valid, else 0."""
    if not 0.0 < tau_valid < 1.0:
        raise ValueError(f"tau_valid must be in (0, 1), got {tau_valid}")
    validity = warp_result.validity if isinstance(warp_result, WarpResult) else warp_result
    return (validity < tau_valid).astype(np.float64)


def confidence_mask(
    m1: np.ndarray,
    m0: np.ndarray,
    ms_w: np.ndarray,
    omega0: float = 1.0,
) -> np.ndarray:
    """1 - max(m1, (omega0 + m0 + ms_w) / (omega0 + 2)), clamped to [0, 1].

    m1 dominates: any white-edge pixel gets confidence 0 outright.
    """
    if omega0 < 0:
        raise ValueError(f"omega0 must be >= 0, got {omega0}")
    if not (m1.shape == m0.shape == ms_w.shape):
        raise ValueError(f"shape mismatch: {m1.shape}, {m0.shape}, {ms_w.shape}")
    averaged = (omega0 + m0 + ms_w) / (omega0 + 2.0)
    return np.clip(1.0 - np.maximum(m1, averaged), 0.0, 1.0)
