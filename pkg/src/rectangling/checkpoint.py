"""Versioned binary parameter checkpoints.

Layout: magic, format version, length-prefixed JSON header (network config,
layer descriptor table, arbitrary metadata), little-endian float64 parameter
vector, trailing CRC32 of all preceding bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .denoiser import Denoiser, DenoiserParams, LayerSpec, NetConfig

_MAGIC = b"DNSRCKPT"
_VERSION = 1


def save_checkpoint(path, net: Denoiser, params, meta: dict | None = None) -> None:
    values = params.values if isinstance(params, DenoiserParams) else np.asarray(params)
    if values.size != net.param_count:
        raise ValueError(f"expected {net.param_count} parameters, got {values.size}")
    header = {
        "net": asdict(net.cfg),
        "layout": [asdict(s) for s in net.layout],
        "param_count": int(net.param_count),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = (
        _MAGIC
        + struct.pack("<II", _VERSION, len(hbytes))
        + hbytes
        + values.astype("<f8").tobytes()
    )
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Returns (net, params, meta). Verifies magic, version, and checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 12 or blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch (file corrupt)")
    off = len(_MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    cfg = NetConfig(**header["net"])
    net = Denoiser(cfg)
    count = header["param_count"]
    if net.param_count != count:
        raise ValueError(f"{path}: layout says {count} params, net built {net.param_count}")
    stored = [LayerSpec(**{**d, "shape": tuple(d["shape"])}) for d in header["layout"]]
    if tuple(stored) != net.layout:
        raise ValueError(f"{path}: layout table does not match the network config")
    values = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(np.float64)
    return net, DenoiserParams(layout=net.layout, values=values), header["meta"]
