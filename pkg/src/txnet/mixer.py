"""Dual dynamic token mixer: input-dependent depthwise conv, overlapping
spatial-reduction attention, squeezed token enhancer, and their composition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .ops import (
    Conv2dParams,
    NormParams,
    adaptive_avg_pool,
    batch_norm_inference,
    conv2d,
    conv_out_extent,
    depthwise_conv_per_sample,
    linear,
    softmax,
)
from .params import ParamFactory, make_conv, make_dwconv, make_norm
from .tensor import Tensor

IDCONV_KERNEL = 7
IDCONV_REDUCTION = 4
STE_REDUCTION = 8
STE_MIN_CHANNELS = 16


# ------------------------------------------------------------------ IDConv


@dataclass
class IDConvParams:
    channels: int
    kernel_size: int
    groups: int
    reduction: int
    squeeze_conv: Conv2dParams
    expand_conv: Conv2dParams
    static_kernels: Tensor

    def __post_init__(self):
        c, g, k = self.channels, self.groups, self.kernel_size
        if g < 1 or c // self.reduction < 1:
            raise ConfigError(f"invalid IDConv sizes C={c}, G={g}, r={self.reduction}")
        if self.static_kernels.shape != (g, c, k, k):
            raise ShapeError(f"static kernels {list(self.static_kernels.shape)} != {[g, c, k, k]}")


def make_idconv(f: ParamFactory, name: str, channels: int, groups: int,
                kernel_size: int = IDCONV_KERNEL, reduction: int = IDCONV_REDUCTION) -> IDConvParams:
    reduced = channels // reduction
    if reduced < 1:
        raise ConfigError(f"IDConv needs at least {reduction} channels, got {channels}")
    return IDConvParams(
        channels, kernel_size, groups, reduction,
        squeeze_conv=make_conv(f, f"{name}.squeeze", channels, reduced, 1),
        expand_conv=make_conv(f, f"{name}.expand", reduced, groups * channels, 1),
        static_kernels=f.param(f"{name}.static_kernels", (groups, channels, kernel_size, kernel_size)),
    )


def idconv_attention(x: Tensor, p: IDConvParams) -> Tensor:
    """Group attention ``A`` of shape [N, G, C, K*K], softmax-normalized over G."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"IDConv over {p.channels} channels got input {list(x.shape)}")
    n, c = x.shape[:2]
    k, g = p.kernel_size, p.groups
    pooled = adaptive_avg_pool(x, k, k)
    logits = conv2d(conv2d(pooled, p.squeeze_conv), p.expand_conv)
    return softmax(T.reshape(logits, (n, g, c, k * k)), axis=1)


def idconv_generate_kernels(x: Tensor, p: IDConvParams) -> Tensor:
    """Per-sample depthwise kernels [N, C, K, K] blended from the static banks."""
    n, c = x.shape[:2]
    k, g = p.kernel_size, p.groups
    attn = idconv_attention(x, p)
    banks = T.reshape(p.static_kernels, (1, g, c, k * k))
    blended = T.sum_axis(T.mul(attn, banks), axis=1)
    return T.reshape(blended, (n, c, k, k))


def idconv_forward(x: Tensor, p: IDConvParams) -> Tensor:
    if p.kernel_size % 2 == 0:
        raise ContractError(f"IDConv kernel must be odd, got {p.kernel_size}")
    return depthwise_conv_per_sample(x, idconv_generate_kernels(x, p), padding=(p.kernel_size - 1) // 2)


def idconv_weight_count(channels: int, groups: int, reduction: int, kernel_size: int) -> int:
    """Closed-form weight count (biases excluded): (C^2/r)(G+1) + G*C*K^2."""
    c, g, r, k = channels, groups, reduction, kernel_size
    return c * (c // r) * (g + 1) + g * c * k * k


# -------------------------------------------------------------------- OSRA


def osr_geometry(stride: int, mode: str = "osr") -> tuple[int, int] | None:
    """(kernel, padding) of the key/value reduction conv, or None when stride is 1."""
    if stride == 1:
        return None
    if mode == "osr":
        k = stride + 3
        return k, k // 2
    if mode == "nsr":
        return stride, 0
    raise ConfigError(f"unknown spatial reduction mode {mode!r}")


def kv_extent(size: int, stride: int, mode: str = "osr") -> int:
    geo = osr_geometry(stride, mode)
    if geo is None:
        return size
    k, pad = geo
    out = conv_out_extent(size, k, stride, pad)
    if out < 1:
        raise ConfigError(f"spatial reduction stride {stride} too large for extent {size}")
    return out


@dataclass
class OsraParams:
    channels: int
    heads: int
    sr_stride: int
    osr_conv: Conv2dParams | None
    osr_norm: NormParams | None
    lr_conv: Conv2dParams
    q_weight: Tensor
    q_bias: Tensor
    kv_weight: Tensor
    kv_bias: Tensor
    rel_bias: Tensor | None
    sr_mode: str = "osr"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(f"{self.channels} channels not divisible by {self.heads} heads")
        if self.sr_stride > 1 and self.sr_mode == "osr" and self.osr_conv.kernel_h != self.sr_stride + 3:
            raise ConfigError("overlapping reduction kernel must be stride + 3")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def make_rel_bias(f: ParamFactory, name: str, heads: int, height: int, width: int,
                  stride: int, mode: str = "osr") -> Tensor:
    n_q = height * width
    n_kv = kv_extent(height, stride, mode) * kv_extent(width, stride, mode)
    return f.param(name, (heads, n_q, n_kv), init="zeros")


def make_osra(f: ParamFactory, name: str, channels: int, heads: int, stride: int,
              rel_bias: Tensor | None, mode: str = "osr") -> OsraParams:
    geo = osr_geometry(stride, mode)
    osr_conv = osr_norm = None
    if geo is not None:
        k, pad = geo
        osr_conv = make_dwconv(f, f"{name}.osr", channels, k, stride=stride, padding=pad, bias=False)
        osr_norm = make_norm(f, f"{name}.osr_norm", channels)
    return OsraParams(
        channels, heads, stride, osr_conv, osr_norm,
        lr_conv=make_dwconv(f, f"{name}.lr", channels, 3),
        q_weight=f.param(f"{name}.q.weight", (channels, channels)),
        q_bias=f.param(f"{name}.q.bias", (channels,), init="zeros"),
        kv_weight=f.param(f"{name}.kv.weight", (2 * channels, channels)),
        kv_bias=f.param(f"{name}.kv.bias", (2 * channels,), init="zeros"),
        rel_bias=rel_bias,
        sr_mode=mode,
    )


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.permute(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def osra_reduce(x: Tensor, p: OsraParams) -> Tensor:
    """Key/value source map: OSR(x) + LR(OSR(x))."""
    y = x
    if p.osr_conv is not None:
        y = batch_norm_inference(conv2d(x, p.osr_conv), p.osr_norm)
    return T.add(y, conv2d(y, p.lr_conv))


def osra_forward(x: Tensor, p: OsraParams, return_attention: bool = False):
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"OSRA over {p.channels} channels got input {list(x.shape)}")
    n, c, h, w = x.shape
    heads, d = p.heads, p.head_dim
    n_q = h * w

    q = linear(_tokens(x), p.q_weight, p.q_bias)
    q = T.permute(T.reshape(q, (n, n_q, heads, d)), (0, 2, 1, 3))

    y = osra_reduce(x, p)
    n_kv = y.shape[2] * y.shape[3]
    if p.rel_bias is not None and p.rel_bias.shape != (heads, n_q, n_kv):
        raise ConfigError(
            f"relative bias {list(p.rel_bias.shape)} does not match resolution "
            f"{h}x{w} ({heads} heads, {n_q} queries, {n_kv} keys)"
        )
    kv = linear(_tokens(y), p.kv_weight, p.kv_bias)
    kv = T.reshape(T.permute(kv, (0, 2, 1)), (n, 2 * c, n_kv, 1))
    k, v = T.split_channels(kv, 2)
    k = T.reshape(k, (n, heads, d, n_kv))
    v = T.permute(T.reshape(v, (n, heads, d, n_kv)), (0, 1, 3, 2))

    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(d))
    if p.rel_bias is not None:
        scores = T.add(scores, T.reshape(p.rel_bias, (1, heads, n_q, n_kv)))
    attn = softmax(scores, axis=-1)
    z = T.matmul(attn, v)
    out = T.reshape(T.permute(z, (0, 1, 3, 2)), (n, c, h, w))
    return (out, attn) if return_attention else out


# --------------------------------------------------------------------- STE


def ste_channels(channels: int, reduction: int = STE_REDUCTION) -> int:
    return max(int(round(channels / reduction)), STE_MIN_CHANNELS)


@dataclass
class SteParams:
    channels: int
    reduction: int
    squeezed: int
    dw_conv: Conv2dParams
    squeeze: Conv2dParams
    expand: Conv2dParams


def make_ste(f: ParamFactory, name: str, channels: int, reduction: int = STE_REDUCTION,
             squeezed: int | None = None) -> SteParams:
    cs = ste_channels(channels, reduction) if squeezed is None else squeezed
    return SteParams(
        channels, reduction, cs,
        dw_conv=make_dwconv(f, f"{name}.dw", channels, 3),
        squeeze=make_conv(f, f"{name}.squeeze", channels, cs, 1),
        expand=make_conv(f, f"{name}.expand", cs, channels, 1),
    )


def ste_forward(x: Tensor, p: SteParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"STE over {p.channels} channels got input {list(x.shape)}")
    return T.add(conv2d(conv2d(conv2d(x, p.dw_conv), p.squeeze), p.expand), x)


def ste_flops(channels: int, squeezed: int, height: int, width: int) -> int:
    """Multiply-accumulates of one STE: depthwise 3x3 plus squeeze and expand 1x1."""
    return height * width * channels * (2 * squeezed + 9)


# ------------------------------------------------------------------ D-Mixer


def attention_split(channels: int, ratio: float) -> tuple[int, int]:
    """(attention channels, convolution channels) for a channel ratio."""
    exact = ratio * channels
    ca = math.ceil(exact - 1e-9)
    if abs(exact - round(exact)) > 1e-9:
        raise ConfigError(f"ratio {ratio} of {channels} channels is not an integer")
    if ca < 1 or channels - ca < 1:
        raise ConfigError(f"ratio {ratio} leaves an empty branch for {channels} channels")
    return ca, channels - ca


@dataclass
class DMixerParams:
    channels: int
    attention_ratio: float
    osra: OsraParams
    idconv: IDConvParams
    ste: SteParams | None
    proj: Conv2dParams | None = None

    def __post_init__(self):
        if self.osra.channels + self.idconv.channels != self.channels:
            raise ConfigError("branch widths do not add up to mixer width")
        if (self.ste is None) == (self.proj is None):
            raise ConfigError("mixer needs exactly one of STE or a 1x1 projection")

    @property
    def attention_channels(self) -> int:
        return self.osra.channels


def make_dmixer(f: ParamFactory, name: str, channels: int, heads: int, stride: int, groups: int,
                rel_bias: Tensor | None, attention_ratio: float = 0.5, kernel_size: int = IDCONV_KERNEL,
                sr_mode: str = "osr", use_ste: bool = True) -> DMixerParams:
    ca, ci = attention_split(channels, attention_ratio)
    osra = make_osra(f, f"{name}.osra", ca, heads, stride, rel_bias, mode=sr_mode)
    idconv = make_idconv(f, f"{name}.idconv", ci, groups, kernel_size)
    if use_ste:
        return DMixerParams(channels, attention_ratio, osra, idconv, make_ste(f, f"{name}.ste", channels))
    return DMixerParams(channels, attention_ratio, osra, idconv, None,
                        proj=make_conv(f, f"{name}.proj", channels, channels, 1))


def dmixer_forward(x: Tensor, p: DMixerParams, taps: dict | None = None) -> Tensor:
    """Split -> (OSRA | IDConv) -> concat -> STE. Leading channels go to OSRA."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"D-Mixer over {p.channels} channels got input {list(x.shape)}")
    x1, x2 = T.split_sizes(x, [p.osra.channels, p.idconv.channels])
    a = osra_forward(x1, p.osra)
    b = idconv_forward(x2, p.idconv)
    mixed = T.concat_channels([a, b])
    out = ste_forward(mixed, p.ste) if p.ste is not None else conv2d(mixed, p.proj)
    if taps is not None:
        taps["osra"], taps["idconv"], taps["dmixer"] = a, b, out
    return out


# ------------------------------------------------- depthwise baseline mixer


@dataclass
class DwMixerParams:
    channels: int
    dw_conv: Conv2dParams
    ste: SteParams


def make_dw_mixer(f: ParamFactory, name: str, channels: int, kernel_size: int = IDCONV_KERNEL) -> DwMixerParams:
    return DwMixerParams(channels, make_dwconv(f, f"{name}.dw", channels, kernel_size),
                         make_ste(f, f"{name}.ste", channels))


def dw_mixer_forward(x: Tensor, p: DwMixerParams, taps: dict | None = None) -> Tensor:
    out = ste_forward(conv2d(x, p.dw_conv), p.ste)
    if taps is not None:
        taps["dmixer"] = out
    return out
