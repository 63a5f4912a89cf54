"""Network primitives with hand-written backward rules.

Convolution, pooling, batch norm, the fused linear layer, softmax
cross-entropy, the surrogate-gradient spike and LIF neuron dynamics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from neuromoco.errors import ShapeError, ValidationError
from neuromoco.tensor.core import Tensor, add, mean_over, mul, scale, sub

SURROGATE_ALPHA = 2.0


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad_h: int, pad_w: int):
    """Patch matrix with rows (n, y, x) and columns (ki, kj, c), plus output size."""
    n, cin, h, w = xd.shape
    xn = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    if pad_h or pad_w:
        xn = np.pad(xn, ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    ho = (h + 2 * pad_h - kh) // stride + 1
    wo = (w + 2 * pad_w - kw) // stride + 1
    win = sliding_window_view(xn, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    return cols, ho, wo


def _wmat(wd: np.ndarray) -> np.ndarray:
    # (Cout, Cin, kh, kw) -> (Cout, kh * kw * Cin), matching the im2col column order
    return np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(wd.shape[0], -1)


def _conv_forward(xd: np.ndarray, wd: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Stride-1 correlation of ``xd`` (N, Cin, H, W) with ``wd`` (Cout, Cin, kh, kw)."""
    n = xd.shape[0]
    cout, _, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, 1, pad_h, pad_w)
    out = cols @ _wmat(wd).T
    return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an ``(N, Cin, H, W)`` input.

    ``weight`` has shape ``(Cout, Cin, kh, kw)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xd, wd = x.data, weight.data
    cols, _, _ = _im2col(xd, kh, kw, stride, padding, padding)  # kept for the backward pass
    wmat = _wmat(wd)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gx = gw = gb = None
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad and stride == 1 and padding < min(kh, kw):
            # stride 1: the input gradient is a full correlation with the flipped kernel
            gx = _conv_forward(g, np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),
                               kh - 1 - padding, kw - 1 - padding)
        elif x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bw, "conv2d")


def _pool_view(xd: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = xd.shape
    return xd.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def _check_pool(x: Tensor, k: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects (N, C, H, W), got {x.shape}")
    if k < 1 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"pool size {k} does not tile spatial dims {x.shape[2:]}")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling.  Ties route gradient to the first max."""
    _check_pool(x, k)
    n, c, h, w = x.shape
    xr = _pool_view(x.data, k)
    idx = xr.argmax(axis=-1)[..., None]
    out = np.take_along_axis(xr, idx, axis=-1)[..., 0]

    def bw(g):
        gr = np.zeros(g.shape + (k * k,), dtype=g.dtype)
        np.put_along_axis(gr, idx, g[..., None], axis=-1)
        return (gr.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor._result(out, (x,), bw, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    _check_pool(x, k)
    n, c, h, w = x.shape
    out = _pool_view(x.data, k).mean(axis=-1)
    inv = x.dtype.type(1.0 / (k * k))

    def bw(g):
        gx = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        return (gx.reshape(n, c, h, w),)

    return Tensor._result(out, (x,), bw, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    return mean_over(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# normalisation and dense layers


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over ``(B, C)`` or ``(B, C, H, W)``.

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    count = xd.size // c
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            gx = (inv.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), bw, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(lead + (wd.shape[1],)) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out.reshape(lead + (wd.shape[0],)), parents, bw, "linear")


def cross_entropy_from_logits(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy over the last axis.

    ``target`` is an int (same class for every position) or an integer array
    shaped like ``logits.shape[:-1]``.  ``reduction`` is ``"mean"`` (scalar)
    or ``"none"`` (per-position losses).
    """
    k = logits.shape[-1]
    lead = logits.shape[:-1]
    tgt = np.broadcast_to(np.asarray(target), lead)
    if not np.issubdtype(tgt.dtype, np.integer):
        raise ValidationError(f"target must be integral, got {tgt.dtype}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= k):
        raise ValidationError(f"target index out of range for {k} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=-1, keepdims=True)
    tz = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    losses = np.log(sez[..., 0]) - tz
    probs = ez / sez
    count = max(int(np.prod(lead)), 1)

    def grad_core():
        d = probs.copy()
        np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], axis=-1) - 1, axis=-1)
        return d

    if reduction == "mean":
        def bw(g):
            return (grad_core() * (g / count),)
        return Tensor._result(np.asarray(losses.mean(), dtype=logits.dtype), (logits,), bw, "cross_entropy")
    if reduction == "none":
        def bw(g):
            return (grad_core() * g[..., None],)
        return Tensor._result(losses.astype(logits.dtype), (logits,), bw, "cross_entropy")
    raise ValidationError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# spiking


def surrogate_grad(u, alpha: float = SURROGATE_ALPHA):
    """Arctan surrogate derivative a / (2 (1 + (pi a u / 2)^2))."""
    return alpha / (2.0 * (1.0 + (math.pi * alpha * u / 2.0) ** 2))


def spike(v: Tensor, threshold: float = 1.0, alpha: float = SURROGATE_ALPHA) -> Tensor:
    """Heaviside(v - threshold) forward, arctan surrogate backward.

    Fires when v >= threshold.
    """
    u = v.data - v.dtype.type(threshold)
    out = (u >= 0).astype(v.dtype)
    return Tensor._result(out, (v,), lambda g: (g * surrogate_grad(u, alpha).astype(g.dtype),), "spike")


@dataclass(frozen=True)
class LIFConfig:
    tau_mem: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    reset_mode: str = "hard"

    def __post_init__(self):
        if self.tau_mem < 1:
            raise ValidationError(f"tau_mem must be >= 1, got {self.tau_mem}")
        if not self.v_threshold > self.v_reset:
            raise ValidationError("v_threshold must exceed v_reset")
        if self.reset_mode not in ("hard", "soft"):
            raise ValidationError(f"reset_mode must be 'hard' or 'soft', got {self.reset_mode!r}")


def lif_step(v: Tensor, x: Tensor, cfg: LIFConfig) -> tuple[Tensor, Tensor]:
    """One LIF update built from differentiable primitives.

    Returns ``(spikes, new_membrane)``.
    """
    if v.shape != x.shape:
        raise ShapeError(f"lif_step: state {v.shape} and input {x.shape} differ")
    h = add(v, scale(sub(x, sub(v, cfg.v_reset)), 1.0 / cfg.tau_mem))
    s = spike(h, cfg.v_threshold)
    if cfg.reset_mode == "hard":
        v_new = add(scale(s, cfg.v_reset), mul(1.0 - s, h))
    else:
        v_new = sub(h, scale(s, cfg.v_threshold))
    return s, v_new


def lif_multistep(x: Tensor, cfg: LIFConfig) -> Tensor:
    """Run LIF neurons over the leading time axis of ``x`` (T, ...).

    The membrane starts at ``v_reset``.  Numerically identical to chaining
    :func:`lif_step`, but recorded as a single node with a BPTT backward.
    """
    xd = x.data
    dt = xd.dtype.type
    decay, inv_tau = dt(1.0 - 1.0 / cfg.tau_mem), dt(1.0 / cfg.tau_mem)
    v_reset, v_th = dt(cfg.v_reset), dt(cfg.v_threshold)
    hard = cfg.reset_mode == "hard"
    steps = xd.shape[0]
    hs = np.empty_like(xd)
    spikes = np.empty_like(xd)
    v = np.full(xd.shape[1:], v_reset, dtype=xd.dtype)
    for t in range(steps):
        h = v + (xd[t] - (v - v_reset)) * inv_tau
        s = (h >= v_th).astype(xd.dtype)
        v = s * v_reset + (1 - s) * h if hard else h - s * v_th
        hs[t] = h
        spikes[t] = s

    def bw(g):
        gx = np.empty_like(g)
        gv = np.zeros(g.shape[1:], dtype=g.dtype)
        for t in range(steps - 1, -1, -1):
            sg = surrogate_grad(hs[t] - v_th).astype(g.dtype)
            if hard:
                dvdh = (1 - spikes[t]) + (v_reset - hs[t]) * sg
            else:
                dvdh = 1 - v_th * sg
            gh = g[t] * sg + gv * dvdh
            gx[t] = gh * inv_tau
            # H_t = V_{t-1} - (V_{t-1} - v_reset) / tau + X_t / tau
            gv = gh * decay
        return (gx,)

    return Tensor._result(spikes, (x,), bw, "lif_multistep")
