"""Backward warping of images by dense motion fields.

Coordinate convention (used everywhere in the package): pixel centers at
integer coordinates, origin top-left, x rightward, y downward. A motion
field d has d[y, x] = (dx, dy), and output pixel (x, y) takes the bilinear
sample of the source at (x + dx, y + dy). Out-of-bounds taps contribute the
fill value; the validity plane tracks the bilinear in-bounds fraction so
fill artifacts ("white edges") stay detectable regardless of fill color.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class WarpResult:
    image: np.ndarray
    validity: np.ndarray


def _sample_grid(field: np.ndarray):
    """Tap indices, weights, and in-bounds flags for bilinear sampling."""
    H, W = field.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    sx = xs + field[..., 0]
    sy = ys + field[..., 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            tx, ty = x0 + dx, y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            inb = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
            taps.append((tx, ty, wgt, inb))
    return taps, fx, fy


def _gather(src: np.ndarray, tx, ty, inb, fill):
    H, W = src.shape[:2]
    txc = np.clip(tx, 0, W - 1)
    tyc = np.clip(ty, 0, H - 1)
    vals = src[tyc, txc]
    if src.ndim == 3:
        return np.where(inb[..., None], vals, fill[None, None, :])
    return np.where(inb, vals, fill)


def backward_warp(
    src: np.ndarray,
    field: np.ndarray,
    fill=1.0,
    src_validity: np.ndarray | None = None,
) -> WarpResult:
    """Pull-warp src by the displacement field with bilinear interpolation.

    validity is the bilinear in-bounds fraction; when src_validity is given
    it is further multiplied by the (zero-fill) bilinear sample of that mask.
    """
    src = np.asarray(src, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if field.shape != src.shape[:2] + (2,):
        raise ValueError(f"field shape {field.shape} does not match src {src.shape}")
    if not np.all(np.isfinite(field)):
        raise ValueError("motion field contains non-finite entries")
    if src.ndim == 3:
        fill_vec = np.broadcast_to(np.atleast_1d(np.asarray(fill, dtype=np.float64)), (src.shape[2],))
    else:
        fill_vec = float(np.asarray(fill).reshape(-1)[0])

    taps, _, _ = _sample_grid(field)
    out = np.zeros_like(src)
    validity = np.zeros(src.shape[:2], dtype=np.float64)
    sv_sample = np.zeros(src.shape[:2], dtype=np.float64) if src_validity is not None else None
    for tx, ty, wgt, inb in taps:
        vals = _gather(src, tx, ty, inb, fill_vec)
        out += wgt[..., None] * vals if src.ndim == 3 else wgt * vals
        validity += wgt * inb
        if sv_sample is not None:
            sv_sample += wgt * _gather(src_validity, tx, ty, inb, 0.0)
    if sv_sample is not None:
        validity = validity * sv_sample
    return WarpResult(image=out, validity=validity)


def warp_mask(mask: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Warp a mask plane with zero fill (out-of-range regions become 0)."""
    return backward_warp(mask, field, fill=0.0).image


def warp_grad_field(
    src: np.ndarray,
    field: np.ndarray,
    grad_out: np.ndarray,
    fill=1.0,
) -> np.ndarray:
    """Gradient of backward_warp(...).image w.r.t. the field.

    grad_out has the warped image's shape; returns an H x W x 2 array.
    Piecewise-smooth: non-differentiable exactly at integer tap crossings.
    """
    src = np.asarray(src, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if src.ndim == 3:
        fill_vec = np.broadcast_to(np.atleast_1d(np.asarray(fill, dtype=np.float64)), (src.shape[2],))
    else:
        fill_vec = float(np.asarray(fill).reshape(-1)[0])

    taps, fx, fy = _sample_grid(field)
    v = [_gather(src, tx, ty, inb, fill_vec) for tx, ty, _, inb in taps]
    v00, v10, v01, v11 = v  # (dy, dx) order: (0,0), (0,1), (1,0), (1,1)
    if src.ndim == 3:
        fx_, fy_ = fx[..., None], fy[..., None]
        dv_dx = (1.0 - fy_) * (v10 - v00) + fy_ * (v11 - v01)
        dv_dy = (1.0 - fx_) * (v01 - v00) + fx_ * (v11 - v10)
        gx = np.sum(grad_out * dv_dx, axis=2)
        gy = np.sum(grad_out * dv_dy, axis=2)
    else:
        dv_dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
        dv_dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
        gx = grad_out * dv_dx
        gy = grad_out * dv_dy
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# Serialization

_FIELD_MAGIC = b"MFLD0001"


def save_field(path, field: np.ndarray) -> None:
    """Two-plane float32 image, little-endian, with a small header."""
    field = np.asarray(field, dtype=np.float32)
    H, W = field.shape[:2]
    with open(path, "wb") as f:
        f.write(_FIELD_MAGIC)
        f.write(struct.pack("<II", H, W))
        f.write(field.astype("<f4").tobytes())


def load_field(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(_FIELD_MAGIC))
        if magic != _FIELD_MAGIC:
            raise ValueError(f"{path}: not a motion field file")
        H, W = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(H * W * 2 * 4), dtype="<f4")
    return data.reshape(H, W, 2).astype(np.float64)


def save_field_raw(path, field: np.ndarray) -> None:
    """Headerless little-endian float32 H x W x 2 (dataset layout)."""
    np.asarray(field, dtype="<f4").tofile(path)


def load_field_raw(path, H: int, W: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != H * W * 2:
        raise ValueError(f"{path}: expected {H * W * 2} floats, found {data.size}")
    return data.reshape(H, W, 2).astype(np.float64)


def save_field_png16(path_prefix, field: np.ndarray, max_disp: float) -> None:
    """dx/dy planes as 16-bit grayscale PNGs mapped from [-max_disp, max_disp]."""
    for suffix, plane in (("_dx.png", field[..., 0]), ("_dy.png", field[..., 1])):
        q = np.clip((plane + max_disp) / (2.0 * max_disp), 0.0, 1.0)
        img = Image.fromarray(np.round(q * 65535.0).astype(np.uint16))
        img.save(str(path_prefix) + suffix)
