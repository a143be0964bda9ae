"""PNG/CSV/JSON helpers with atomic writes and run manifests."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-temp-then-rename so partial files never appear."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def quantize_image(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image to uint8, round-half-away like PNG pipelines."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image_png(path, img: np.ndarray) -> None:
    """Save a [0, 1] float image (H x W or H x W x 3) as an 8-bit PNG."""
    q = quantize_image(img)
    import io

    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_image_png(path) -> np.ndarray:
    """Load a PNG as a float image in [0, 1] (RGB kept, grayscale 2-D)."""
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_manifest(dirpath, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    atomic_write_text(Path(dirpath) / MANIFEST_NAME, text)


def read_manifest(dirpath) -> dict:
    with open(Path(dirpath) / MANIFEST_NAME) as f:
        return json.load(f)
