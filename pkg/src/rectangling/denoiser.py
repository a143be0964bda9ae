"""Tiny conditional denoiser with hand-derived forward and backward passes.

A 3-level encoder-decoder CNN shared by the motion and content models:
stride-2 downsampling, nearest-neighbor upsampling, additive skips, SiLU
nonlinearities, and a sinusoidal timestep embedding projected and added at
the bottleneck. The network predicts the clean signal x0 directly.

Parameters live in one flat vector; the layout table maps named layers to
slices of it. All passes are pure functions of (params, input); the Adam
update is functional (returns new arrays).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .rng import STREAM_INIT, philox_generator

# ---------------------------------------------------------------------------
# Primitive layers


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1):
    """3x3 convolution, padding 1, as one GEMM.

    Activations use channel-first, batch-last layout: x is (Ci, H, W, B) and
    w is (Co, Ci, 3, 3), so the im2col buffer reshapes without a transpose.
    """
    Ci, H, W, B = x.shape
    Co = w.shape[0]
    s = stride
    Ho, Wo = (H + 2 - 3) // s + 1, (W + 2 - 3) // s + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    parts = [
        xp[:, i : i + s * Ho : s, j : j + s * Wo : s, :]
        for i in range(3)
        for j in range(3)
    ]
    cols = np.stack(parts, axis=1).reshape(Ci * 9, Ho * Wo * B)
    out = w.reshape(Co, Ci * 9) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape(Co, Ho, Wo, B), cols


def conv2d_backward(
    grad: np.ndarray,
    cols: np.ndarray,
    w: np.ndarray,
    x_shape: tuple,
    stride: int = 1,
    with_bias: bool = True,
    need_dx: bool = True,
):
    """Returns (dx, dw, db). grad: (Co, Ho, Wo, B)."""
    Ci, H, W, B = x_shape
    Co = w.shape[0]
    s = stride
    _, Ho, Wo, _ = grad.shape
    g = grad.reshape(Co, Ho * Wo * B)
    dw = (g @ cols.T).reshape(w.shape)
    db = g.sum(axis=1) if with_bias else None
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(Co, Ci * 9).T @ g).reshape(Ci, 3, 3, Ho, Wo, B)
    dxp = np.zeros((Ci, H + 2, W + 2, B), dtype=grad.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[:, i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def silu_forward(z: np.ndarray):
    """Returns (z * sigmoid(z), sigmoid(z)); the sigmoid is cached for backward."""
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def silu_backward(grad: np.ndarray, y: np.ndarray, sig: np.ndarray) -> np.ndarray:
    """d silu / dz = sig + y * (1 - sig), expressed via the forward outputs."""
    return grad * (sig + y * (1.0 - sig))


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor doubling of the spatial axes of (C, H, W, B)."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2x_backward(grad: np.ndarray) -> np.ndarray:
    return (
        grad[:, 0::2, 0::2]
        + grad[:, 0::2, 1::2]
        + grad[:, 1::2, 0::2]
        + grad[:, 1::2, 1::2]
    )


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (B, Din), w: (Dout, Din)."""
    return x @ w.T + b[None, :]


def linear_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray):
    return grad @ w, grad.T @ x, grad.sum(axis=0)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos embedding of (possibly batched) timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    denom = max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / denom)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# Network definition


@dataclass(frozen=True)
class NetConfig:
    out_channels: int
    cond_channels: int = 4
    base_channels: int = 16
    emb_dim: int = 32
    dtype: str = "float64"
    init_seed: int = 0

    @property
    def in_channels(self) -> int:
        return self.out_channels + self.cond_channels

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv / conv_nobias / linear / silu / upsample2x / skip_add / temb_add
    shape: tuple = ()
    offset: int = 0
    size: int = 0
    stride: int = 1


@dataclass
class DenoiserParams:
    layout: tuple
    values: np.ndarray

    @property
    def count(self) -> int:
        return int(self.values.size)


@dataclass
class DenoiserInput:
    noisy: np.ndarray       # (H, W, out_channels)
    cond_image: np.ndarray  # (H, W, 3)
    cond_mask: np.ndarray   # (H, W) or (H, W, 1)
    t: int
    cond_dropped: bool = False


@dataclass
class ForwardCache:
    tensors: dict
    t: np.ndarray
    batch_shape: tuple
    params_fingerprint: int


def _fingerprint(values: np.ndarray) -> int:
    sub = np.ascontiguousarray(values[::101])
    return zlib.adler32(sub.tobytes()) ^ (values.size << 1)


class Denoiser:
    """Fixed encoder-decoder denoiser; parameters supplied per call."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        c1 = cfg.base_channels
        c2, c3 = 2 * c1, 4 * c1
        self.channels = (c1, c2, c3)
        specs: list[LayerSpec] = []
        offset = 0

        def add_param(name, kind, shape, stride=1):
            nonlocal offset
            size = int(np.prod(shape))
            specs.append(LayerSpec(name, kind, tuple(shape), offset, size, stride))
            offset += size

        def add_tag(name, kind):
            specs.append(LayerSpec(name, kind))

        ci = cfg.in_channels
        add_param("enc1a.w", "conv", (c1, ci, 3, 3)); add_param("enc1a.b", "bias", (c1,))
        add_tag("enc1a.silu", "silu")
        add_param("enc1b.w", "conv", (c1, c1, 3, 3)); add_param("enc1b.b", "bias", (c1,))
        add_tag("enc1b.silu", "silu")
        add_param("down1.w", "conv", (c2, c1, 3, 3), stride=2); add_param("down1.b", "bias", (c2,))
        add_tag("down1.silu", "silu")
        add_param("enc2.w", "conv", (c2, c2, 3, 3)); add_param("enc2.b", "bias", (c2,))
        add_tag("enc2.silu", "silu")
        add_param("down2.w", "conv", (c3, c2, 3, 3), stride=2); add_param("down2.b", "bias", (c3,))
        add_tag("down2.silu", "silu")
        add_param("bot1.w", "conv", (c3, c3, 3, 3)); add_param("bot1.b", "bias", (c3,))
        add_param("temb1.w", "linear", (c3, cfg.emb_dim)); add_param("temb1.b", "bias", (c3,))
        add_tag("temb1.silu", "silu")
        add_param("temb2.w", "linear", (c3, c3)); add_param("temb2.b", "bias", (c3,))
        add_tag("bot.temb_add", "temb_add")
        add_tag("bot1.silu", "silu")
        add_param("bot2.w", "conv", (c3, c3, 3, 3)); add_param("bot2.b", "bias", (c3,))
        add_tag("bot2.silu", "silu")
        add_tag("up1.upsample", "upsample2x")
        add_param("up1.w", "conv", (c2, c3, 3, 3)); add_param("up1.b", "bias", (c2,))
        add_tag("up1.silu", "silu")
        add_tag("up1.skip_enc2", "skip_add")
        add_param("dec2.w", "conv", (c2, c2, 3, 3)); add_param("dec2.b", "bias", (c2,))
        add_tag("dec2.silu", "silu")
        add_tag("up2.upsample", "upsample2x")
        add_param("up2.w", "conv", (c1, c2, 3, 3)); add_param("up2.b", "bias", (c1,))
        add_tag("up2.silu", "silu")
        add_tag("up2.skip_enc1", "skip_add")
        add_param("dec1.w", "conv", (c1, c1, 3, 3)); add_param("dec1.b", "bias", (c1,))
        add_tag("dec1.silu", "silu")
        add_param("out.w", "conv_nobias", (cfg.out_channels, c1, 3, 3))

        self.layout = tuple(specs)
        self.param_count = offset
        self._slices = {s.name: s for s in specs if s.size > 0}

    # -- parameter handling ------------------------------------------------

    def _values(self, params) -> np.ndarray:
        v = params.values if isinstance(params, DenoiserParams) else np.asarray(params)
        if v.size != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {v.size}")
        return v

    def view(self, values: np.ndarray, name: str) -> np.ndarray:
        s = self._slices[name]
        return values[s.offset : s.offset + s.size].reshape(s.shape)

    def init_params(self) -> DenoiserParams:
        """Fan-in-scaled uniform init; final layer zeroed; biases zeroed."""
        rng = philox_generator(self.cfg.init_seed, STREAM_INIT)
        values = np.zeros(self.param_count, dtype=self.cfg.np_dtype)
        for s in self.layout:
            if s.kind in ("conv", "linear") and s.name != "out.w":
                fan_in = int(np.prod(s.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values[s.offset : s.offset + s.size] = rng.uniform(
                    -bound, bound, s.size
                )
        return DenoiserParams(layout=self.layout, values=values)

    # -- forward / backward -------------------------------------------------

    def _prep_input(self, inp: DenoiserInput):
        noisy = np.asarray(inp.noisy, dtype=np.float64)
        cond_image = np.asarray(inp.cond_image, dtype=np.float64)
        cond_mask = np.asarray(inp.cond_mask, dtype=np.float64)
        if cond_mask.ndim == 2:
            cond_mask = cond_mask[..., None]
        H, W = noisy.shape[:2]
        if noisy.shape != (H, W, self.cfg.out_channels):
            raise ValueError(f"noisy plane must be (H, W, {self.cfg.out_channels})")
        if cond_image.shape != (H, W, 3) or cond_mask.shape != (H, W, 1):
            raise ValueError("conditioning planes do not match (H, W, 3) / (H, W, 1)")
        nb = noisy.transpose(2, 0, 1)[None]
        cb = np.concatenate([cond_image, cond_mask], axis=2).transpose(2, 0, 1)[None]
        return nb, cb

    def forward(self, params, inp: DenoiserInput):
        """Single-sample forward. Returns (prediction (H, W, C_out), cache)."""
        nb, cb = self._prep_input(inp)
        out, cache = self.forward_batch(
            params,
            nb,
            cb,
            np.array([inp.t], dtype=np.float64),
            np.array([inp.cond_dropped]),
        )
        return out[0].transpose(1, 2, 0), cache

    def forward_batch(
        self,
        params,
        noisy: np.ndarray,
        cond: np.ndarray,
        t: np.ndarray,
        dropped: np.ndarray,
    ):
        """noisy: (B, C_out, H, W); cond: (B, cond_channels, H, W).

        Conditioning planes are zeroed (the null token) where dropped is True.
        """
        v = self._values(params)
        cfg = self.cfg
        B, _, H, W = noisy.shape
        if H % 4 or W % 4:
            raise ValueError(f"H and W must be divisible by 4, got {H}x{W}")
        if noisy.shape[1] != cfg.out_channels or cond.shape[1] != cfg.cond_channels:
            raise ValueError("channel counts do not match the network layout")
        cond = np.where(dropped[:, None, None, None], 0.0, cond)
        # Internal layout is channel-first, batch-last: (C, H, W, B).
        x = np.concatenate([noisy, cond], axis=1).transpose(1, 2, 3, 0)
        x = np.ascontiguousarray(x, dtype=np.float64)

        p = lambda n: self.view(v, n)
        ten: dict = {"x": x}

        def conv_silu(name, h, stride=1):
            z, ten[name + ".cols"] = conv2d_forward(h, p(name + ".w"), p(name + ".b"), stride=stride)
            y, sig = silu_forward(z)
            ten[name + ".y"], ten[name + ".sig"] = y, sig
            return y

        h = conv_silu("enc1a", x)
        ten["enc1b.x"] = h
        skip1 = conv_silu("enc1b", h)
        ten["down1.x"] = skip1
        h = conv_silu("down1", skip1, stride=2)
        ten["enc2.x"] = h
        skip2 = conv_silu("enc2", h)
        ten["down2.x"] = skip2
        h = conv_silu("down2", skip2, stride=2)
        ten["bot1.x"] = h
        z, ten["bot1.cols"] = conv2d_forward(h, p("bot1.w"), p("bot1.b"))

        emb = sinusoidal_embedding(t, cfg.emb_dim)
        ten["temb.emb"] = emb
        e1 = linear_forward(emb, p("temb1.w"), p("temb1.b"))
        e1a, e1sig = silu_forward(e1)
        ten["temb1.y"], ten["temb1.sig"] = e1a, e1sig
        ten["temb2.x"] = e1a
        e2 = linear_forward(e1a, p("temb2.w"), p("temb2.b"))

        z = z + e2.T[:, None, None, :]
        y, sig = silu_forward(z)
        ten["bot1.y"], ten["bot1.sig"] = y, sig
        ten["bot2.x"] = y
        h = conv_silu("bot2", y)

        h = upsample2x_forward(h)
        ten["up1.x"] = h
        h = conv_silu("up1", h) + skip2
        ten["dec2.x"] = h
        h = conv_silu("dec2", h)

        h = upsample2x_forward(h)
        ten["up2.x"] = h
        h = conv_silu("up2", h) + skip1
        ten["dec1.x"] = h
        h = conv_silu("dec1", h)

        ten["out.x"] = h
        out, ten["out.cols"] = conv2d_forward(h, p("out.w"), None)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("denoiser forward produced non-finite values")
        cache = ForwardCache(
            tensors=ten,
            t=np.asarray(t, dtype=np.float64),
            batch_shape=x.shape,
            params_fingerprint=_fingerprint(v),
        )
        return out.transpose(3, 0, 1, 2), cache

    def backward(self, params, cache: ForwardCache, grad_pred: np.ndarray) -> np.ndarray:
        """Single-sample backward; grad_pred is (H, W, C_out)."""
        g = np.asarray(grad_pred, dtype=np.float64)
        if g.ndim != 3 or g.shape[2] != self.cfg.out_channels:
            raise ValueError("grad_pred must be (H, W, C_out)")
        return self.backward_batch(params, cache, g.transpose(2, 0, 1)[None])

    def backward_batch(self, params, cache: ForwardCache, grad: np.ndarray) -> np.ndarray:
        """grad: (B, C_out, H, W), matching the forward_batch output."""
        v = self._values(params)
        if cache.params_fingerprint != _fingerprint(v):
            raise ValueError("stale cache: parameters changed since forward")
        ten = cache.tensors
        Ci, H, W, B = cache.batch_shape
        if grad.shape != (B, self.cfg.out_channels, H, W):
            raise ValueError(f"upstream gradient shape {grad.shape} does not match cache")
        grad = np.ascontiguousarray(grad.transpose(1, 2, 3, 0), dtype=np.float64)
        p = lambda n: self.view(v, n)
        gv = np.zeros(self.param_count, dtype=np.float64)

        def store(name, arr):
            s = self._slices[name]
            gv[s.offset : s.offset + s.size] = arr.reshape(-1)

        def conv_silu_bwd(name, g, x_name, stride=1, need_dx=True):
            g = silu_backward(g, ten[name + ".y"], ten[name + ".sig"])
            dx, dw, db = conv2d_backward(
                g, ten[name + ".cols"], p(name + ".w"), ten[x_name].shape,
                stride=stride, need_dx=need_dx,
            )
            store(name + ".w", dw); store(name + ".b", db)
            return dx

        g, dw, _ = conv2d_backward(grad, ten["out.cols"], p("out.w"), ten["out.x"].shape, with_bias=False)
        store("out.w", dw)

        g = conv_silu_bwd("dec1", g, "dec1.x")
        g_skip1 = g  # skip_add forks the gradient
        g = conv_silu_bwd("up2", g, "up2.x")
        g = upsample2x_backward(g)

        g = conv_silu_bwd("dec2", g, "dec2.x")
        g_skip2 = g
        g = conv_silu_bwd("up1", g, "up1.x")
        g = upsample2x_backward(g)

        g = conv_silu_bwd("bot2", g, "bot2.x")
        g = silu_backward(g, ten["bot1.y"], ten["bot1.sig"])

        ge = g.sum(axis=(1, 2)).T  # temb broadcast-add: (c3, B) -> (B, c3)
        ge, dw, db = linear_backward(ge, ten["temb2.x"], p("temb2.w"))
        store("temb2.w", dw); store("temb2.b", db)
        ge = silu_backward(ge, ten["temb1.y"], ten["temb1.sig"])
        _, dw, db = linear_backward(ge, ten["temb.emb"], p("temb1.w"))
        store("temb1.w", dw); store("temb1.b", db)

        g, dw, db = conv2d_backward(g, ten["bot1.cols"], p("bot1.w"), ten["bot1.x"].shape)
        store("bot1.w", dw); store("bot1.b", db)
        g = conv_silu_bwd("down2", g, "down2.x", stride=2)

        g = g + g_skip2
        g = conv_silu_bwd("enc2", g, "enc2.x")
        g = conv_silu_bwd("down1", g, "down1.x", stride=2)

        g = g + g_skip1
        g = conv_silu_bwd("enc1b", g, "enc1b.x")
        conv_silu_bwd("enc1a", g, "x", need_dx=False)
        return gv


def grad_check(
    net: Denoiser,
    params,
    inp: DenoiserInput,
    probe_count: int = 50,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central finite differences.

    Uses the scalar loss 0.5 * sum((forward - Y)^2) against a fixed random
    target Y. Requires double precision.
    """
    if probe_count == 0:
        return 0.0
    values = params.values if isinstance(params, DenoiserParams) else np.asarray(params)
    values = values.astype(np.float64).copy()
    pred, cache = net.forward(values, inp)
    # Target near the current prediction keeps the residual O(0.1), which
    # keeps the finite-difference roundoff well below the gradient scale.
    delta = philox_generator(seed, STREAM_INIT, index=1).standard_normal(pred.shape)
    target = pred - 0.1 * delta
    analytic = net.backward(values, cache, pred - target)

    def loss(vec):
        out, _ = net.forward(vec, inp)
        return 0.5 * np.sum((out - target) ** 2)

    rng = philox_generator(seed, STREAM_INIT, index=2)
    idx = rng.choice(values.size, size=min(probe_count, values.size), replace=False)
    max_rel = 0.0
    for i in idx:
        orig = values[i]
        values[i] = orig + h
        lp = loss(values)
        values[i] = orig - h
        lm = loss(values)
        values[i] = orig
        fd = (lp - lm) / (2.0 * h)
        an = analytic[i]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-9)
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    eps_hat: float = 1e-8


def init_adam_state(n: int, lr: float, beta1: float = 0.9, beta2: float = 0.99) -> AdamState:
    return AdamState(
        m=np.zeros(n, dtype=np.float64),
        v=np.zeros(n, dtype=np.float64),
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
    )


def adam_step(params, grads: np.ndarray, state: AdamState):
    """Bias-corrected Adam update. Non-finite gradients skip the step
    (parameters and counter untouched)."""
    values = params.values if isinstance(params, DenoiserParams) else np.asarray(params)
    if grads.shape != values.shape:
        raise ValueError(f"gradient shape {grads.shape} != params shape {values.shape}")
    if not np.all(np.isfinite(grads)):
        return params, state
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_values = values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    new_state = replace(state, m=m, v=v, step=step)
    if isinstance(params, DenoiserParams):
        return DenoiserParams(layout=params.layout, values=new_values), new_state
    return new_values, new_state
