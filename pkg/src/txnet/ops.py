"""Convolution, pooling, normalization and attention primitives with backward rules.

All kernels are plain numpy. Convolutions are cross-correlations (no kernel flip).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, _record, _trace, flop_trace, register_op  # noqa: F401


@dataclass
class Conv2dParams:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups {self.groups}"
            )
        expect = (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)
        if self.weight.shape != expect:
            raise ShapeError(f"conv weight shape {list(self.weight.shape)} != {list(expect)}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv bias shape {list(self.bias.shape)} != [{self.out_channels}]")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels


@dataclass
class NormParams:
    num_channels: int
    scale: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        c = (self.num_channels,)
        for name in ("scale", "shift", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ShapeError(f"norm {name} must have shape [{self.num_channels}]")
        if self.eps <= 0:
            raise ContractError("norm epsilon must be positive")
        if np.any(self.running_var.data < 0):
            raise ContractError("running variance must be non-negative")


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.ascontiguousarray(a[:, :, p:-p, p:-p])


@register_op("conv2d")
def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d expects [N,{p.in_channels},H,W], got {list(x.shape)}")
    n, c, h, w = x.shape
    kh, kw, s, pad, g = p.kernel_h, p.kernel_w, p.stride, p.padding, p.groups
    ho, wo = conv_out_extent(h, kh, s, pad), conv_out_extent(w, kw, s, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} from input {h}x{w}")
    cout = p.out_channels
    cin_g, cout_g = c // g, cout // g
    _trace("conv2d", n * ho * wo * cout * cin_g * kh * kw)
    wd = p.weight.data
    xp = _pad(x.data, pad)

    def win(i, j):
        return (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    if cin_g == 1 and cout_g == 1:
        out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += xp[win(i, j)] * wd[:, 0, i, j][None, :, None, None]

        def rule_core(gd):
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gxp[win(i, j)] += gd * wd[:, 0, i, j][None, :, None, None]
                    gw[:, 0, i, j] = (gd * xp[win(i, j)]).sum(axis=(0, 2, 3))
            return gxp, gw
    else:
        if kh == kw == 1 and s == 1 and pad == 0:
            cols = xp.reshape(n, g, cin_g, ho * wo)
        else:
            cols6 = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols6[:, :, i, j] = xp[win(i, j)]
            cols = cols6.reshape(n, g, cin_g * kh * kw, ho * wo)
        wm = wd.reshape(g, cout_g, cin_g * kh * kw)
        out = np.matmul(wm[None], cols).reshape(n, cout, ho, wo)

        def rule_core(gd):
            gm = gd.reshape(n, g, cout_g, ho * wo)
            gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(np.swapaxes(wm, -1, -2)[None], gm)
            if kh == kw == 1 and s == 1 and pad == 0:
                return gcols.reshape(xp.shape), gw
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[win(i, j)] += gcols[:, :, i, j]
            return gxp, gw

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    def rule(gd):
        gxp, gw = rule_core(gd)
        grads = [_unpad(gxp, pad), gw]
        if p.bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out, inputs, rule)


@register_op("depthwise_conv_per_sample")
def depthwise_conv_per_sample(x: Tensor, kernels: Tensor, padding: int | None = None) -> Tensor:
    """Stride-1 depthwise cross-correlation with a separate kernel per (sample, channel)."""
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[:2] != x.shape[:2] or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels {list(kernels.shape)} do not match input {list(x.shape)}")
    k = kernels.shape[2]
    if k % 2 == 0:
        raise ContractError(f"per-sample depthwise conv needs an odd kernel, got {k}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ContractError(f"padding must be {pad} for kernel {k}, got {padding}")
    n, c, h, w = x.shape
    _trace("depthwise_conv_per_sample", n * c * h * w * k * k)
    xp = _pad(x.data, pad)
    kd = kernels.data
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + w] * kd[:, :, i, j][:, :, None, None]

    def rule(gd):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + w] += gd * kd[:, :, i, j][:, :, None, None]
                gk[:, :, i, j] = (gd * xp[:, :, i:i + h, j:j + w]).sum(axis=(2, 3))
        return _unpad(gxp, pad), gk

    return _record("depthwise_conv_per_sample", out, (x, kernels), rule)


def pool_windows(size: int, out: int) -> list[tuple[int, int]]:
    """Adaptive-pool windows: ``[floor(i*size/out), ceil((i+1)*size/out))``."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


@register_op("adaptive_avg_pool")
def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean over each adaptive window.

    Window sums accumulate sequentially in row-major order, so a 1x1 output is
    the plain left-to-right sum over H*W divided by H*W. Output extents larger
    than the input are allowed; windows then repeat input cells.
    """
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects a 4-D input, got {list(x.shape)}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ContractError(f"pool output extent must be >= 1, got {out_h}x{out_w}")
    _trace("adaptive_avg_pool", x.size)
    rows, cols = pool_windows(h, out_h), pool_windows(w, out_w)
    xd = x.data
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for oi, (h0, h1) in enumerate(rows):
        for oj, (w0, w1) in enumerate(cols):
            acc = np.zeros((n, c), dtype=x.dtype)
            for hh in range(h0, h1):
                for ww in range(w0, w1):
                    acc += xd[:, :, hh, ww]
            out[:, :, oi, oj] = acc / x.dtype.type((h1 - h0) * (w1 - w0))

    def rule(gd):
        gx = np.zeros_like(xd)
        for oi, (h0, h1) in enumerate(rows):
            for oj, (w0, w1) in enumerate(cols):
                share = gd[:, :, oi, oj] / x.dtype.type((h1 - h0) * (w1 - w0))
                gx[:, :, h0:h1, w0:w1] += share[:, :, None, None]
        return (gx,)

    return _record("adaptive_avg_pool", out, (x,), rule)


@register_op("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"axis {axis} out of range for rank {x.ndim}")
    _trace("softmax", x.size)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(gd):
        return (y * (gd - (gd * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), rule)


@register_op("batch_norm_inference")
def batch_norm_inference(x: Tensor, p: NormParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.num_channels:
        raise ShapeError(f"norm over {p.num_channels} channels got input {list(x.shape)}")
    _trace("batch_norm_inference", x.size)
    dt = x.dtype
    inv = (1.0 / np.sqrt(p.running_var.data.astype(dt) + dt.type(p.eps))).astype(dt)
    mean = p.running_mean.data.astype(dt)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    sc = p.scale.data
    out = xhat * sc[None, :, None, None] + p.shift.data[None, :, None, None]

    def rule(gd):
        gx = gd * (sc * inv)[None, :, None, None]
        return gx, (gd * xhat).sum(axis=(0, 2, 3)), gd.sum(axis=(0, 2, 3))

    return _record("batch_norm_inference", out, (x, p.scale, p.shift), rule)


@register_op("linear")
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[C_out, C_in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear of {list(x.shape)} with weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {list(bias.shape)} != [{weight.shape[0]}]")
    cout, cin = weight.shape
    _trace("linear", (x.size // cin) * cin * cout)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(gd):
        g2 = gd.reshape(-1, cout)
        grads = [gd @ wd, g2.T @ xd.reshape(-1, cin)]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, rule)


_GELU_C = math.sqrt(2.0 / math.pi)


@register_op("gelu")
def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    a = xd.dtype.type(0.044715)
    u = c * (xd + a * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def rule(gd):
        du = c * (1.0 + 3.0 * a * xd**2)
        return (gd * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record("gelu", out.astype(xd.dtype, copy=False), (x,), rule)
