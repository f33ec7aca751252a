"""Parameter/FLOP accounting, effective receptive fields, gradient checks and
a loop-based IDConv reference implementation.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckFailure, ContractError, SelectorError
from .mixer import DMixerParams, IDConvParams, OsraParams, SteParams
from .network import BlockParams, Model, ModelConfig, MsFfnParams, build_model
from .ops import Conv2dParams, conv_out_extent
from .params import ParamStore
from .tensor import Tensor

FLOP_CONVENTION = "1 MAC = 1 FLOP"
ERF_THRESHOLD = 1e-3
_PARAM_SUFFIXES = {"weight", "bias", "scale", "shift", "running_mean", "running_var"}


# ------------------------------------------------------------ cost reports


@dataclass
class CostRow:
    name: str
    params: int = 0
    flops: int = 0


@dataclass
class CostReport:
    rows: list[CostRow]
    resolution: int | None
    model_name: str = ""
    convention: str = FLOP_CONVENTION

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def grouped(self, depth: int = 1) -> "CostReport":
        """Merge rows sharing the first ``depth`` dotted name components."""
        merged: dict[str, CostRow] = {}
        for r in self.rows:
            key = ".".join(r.name.split(".")[:depth])
            row = merged.setdefault(key, CostRow(key))
            row.params += r.params
            row.flops += r.flops
        return CostReport(list(merged.values()), self.resolution, self.model_name, self.convention)

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [len("total")])
        res = f"{self.resolution}x{self.resolution}" if self.resolution else "n/a"
        lines = [f"model: {self.model_name}  resolution: {res}  convention: {self.convention}",
                 f"{'layer':<{width}}  {'params':>14}  {'flops':>16}"]
        lines += [f"{r.name:<{width}}  {r.params:>14,d}  {r.flops:>16,d}" for r in self.rows]
        lines.append(f"{'total':<{width}}  {self.total_params:>14,d}  {self.total_flops:>16,d}")
        lines.append(f"params: {self.total_params / 1e6:.2f} M   flops: {self.total_flops / 1e9:.2f} G")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "model": self.model_name,
            "resolution": self.resolution,
            "convention": self.convention,
            "rows": [{"name": r.name, "params": r.params, "flops": r.flops} for r in self.rows],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _as_model(model: Model | ModelConfig) -> Model:
    if isinstance(model, ModelConfig):
        return build_model(model, mode="zeros")
    return model


def param_layer(name: str) -> str:
    head, _, last = name.rpartition(".")
    return head if head and last in _PARAM_SUFFIXES else name


def count_params(model: Model | ModelConfig | ParamStore) -> CostReport:
    """Exact learnable element counts grouped by layer. BN running statistics are excluded."""
    if isinstance(model, ParamStore):
        store, name = model, ""
    else:
        m = _as_model(model)
        store, name = m.params, m.config.name
    rows: dict[str, CostRow] = {}
    for pname, t in store.learnable():
        layer = param_layer(pname)
        rows.setdefault(layer, CostRow(layer)).params += t.size
    return CostReport(list(rows.values()), None, name)


class _FlopSheet:
    def __init__(self):
        self.flops: dict[str, int] = {}

    def add(self, name: str, n: int) -> None:
        self.flops[name] = self.flops.get(name, 0) + int(n)

    def conv(self, name: str, p: Conv2dParams, h: int, w: int) -> tuple[int, int]:
        ho = conv_out_extent(h, p.kernel_h, p.stride, p.padding)
        wo = conv_out_extent(w, p.kernel_w, p.stride, p.padding)
        self.add(name, ho * wo * p.out_channels * (p.in_channels // p.groups) * p.kernel_h * p.kernel_w)
        return ho, wo

    def norm(self, name: str, c: int, h: int, w: int) -> None:
        self.add(name, c * h * w)


def _osra_flops(s: _FlopSheet, name: str, p: OsraParams, h: int, w: int) -> None:
    c = p.channels
    s.add(f"{name}.q", h * w * c * c)
    hk, wk = h, w
    if p.osr_conv is not None:
        hk, wk = s.conv(f"{name}.osr", p.osr_conv, h, w)
        s.norm(f"{name}.osr_norm", c, hk, wk)
    s.conv(f"{name}.lr", p.lr_conv, hk, wk)
    n_q, n_kv = h * w, hk * wk
    s.add(f"{name}.kv", n_kv * c * 2 * c)
    # QK^T and attn.V, plus the softmax over heads x queries x keys
    s.add(f"{name}.attn", 2 * n_q * n_kv * c + p.heads * n_q * n_kv)


def _idconv_flops(s: _FlopSheet, name: str, p: IDConvParams, h: int, w: int) -> None:
    c, k, g = p.channels, p.kernel_size, p.groups
    s.add(f"{name}.pool", c * h * w)
    s.conv(f"{name}.squeeze", p.squeeze_conv, k, k)
    s.conv(f"{name}.expand", p.expand_conv, k, k)
    s.add(f"{name}.softmax", g * c * k * k)
    s.add(f"{name}.dynamic_conv", c * h * w * k * k)


def _ste_flops(s: _FlopSheet, name: str, p: SteParams, h: int, w: int) -> None:
    s.conv(f"{name}.dw", p.dw_conv, h, w)
    s.conv(f"{name}.squeeze", p.squeeze, h, w)
    s.conv(f"{name}.expand", p.expand, h, w)


def _ffn_flops(s: _FlopSheet, name: str, p: MsFfnParams, h: int, w: int) -> None:
    s.conv(f"{name}.fc1", p.fc1, h, w)
    for k, conv in zip(p.scales, p.dw_convs):
        s.conv(f"{name}.dw{k}", conv, h, w)
    s.conv(f"{name}.fc2", p.fc2, h, w)


def _block_flops(s: _FlopSheet, name: str, b: BlockParams, h: int, w: int) -> None:
    c = b.channels
    if b.dpe is not None:
        s.conv(f"{name}.dpe", b.dpe, h, w)
    s.norm(f"{name}.norm1", c, h, w)
    mx, mname = b.mixer, f"{name}.mixer"
    if isinstance(mx, DMixerParams):
        _osra_flops(s, f"{mname}.osra", mx.osra, h, w)
        _idconv_flops(s, f"{mname}.idconv", mx.idconv, h, w)
        if mx.ste is not None:
            _ste_flops(s, f"{mname}.ste", mx.ste, h, w)
        else:
            s.conv(f"{mname}.proj", mx.proj, h, w)
    else:
        s.conv(f"{mname}.dw", mx.dw_conv, h, w)
        _ste_flops(s, f"{mname}.ste", mx.ste, h, w)
    s.norm(f"{name}.norm2", c, h, w)
    _ffn_flops(s, f"{name}.ffn", b.ffn, h, w)


def count_flops(model: Model | ModelConfig, resolution: int | None = None) -> CostReport:
    """Analytic per-layer cost of one image at the model's bound resolution.

    Convs, linears and attention matmuls count multiply-accumulates; pooling,
    softmax and normalization count one op per element; activations and
    residual additions are free. The parameter column matches :func:`count_params`.
    """
    m = _as_model(model)
    cfg = m.config
    if resolution is not None and resolution != cfg.image_size:
        raise ContractError(f"model is bound to {cfg.image_size}x{cfg.image_size}, not {resolution}x{resolution}; "
                            "rebuild the config at the new resolution")
    s = _FlopSheet()
    h = w = cfg.image_size
    for st in m.stages:
        ename = "stem" if st.index == 1 else f"stage{st.index}.embed"
        h, w = s.conv(f"{ename}.conv", st.embed.conv, h, w)
        s.norm(f"{ename}.norm", st.config.channels, h, w)
        for j, blk in enumerate(st.blocks):
            _block_flops(s, f"stage{st.index}.block{j}", blk, h, w)
    c = cfg.stages[-1].channels
    s.add("head.pool", c * h * w)
    s.add("head.fc", c * cfg.num_classes)

    rows: dict[str, CostRow] = {r.name: r for r in count_params(m).rows}
    for name, n in s.flops.items():
        rows.setdefault(name, CostRow(name)).flops += n
    ordered = sorted(rows.values(), key=lambda r: _row_order(r.name))
    return CostReport(ordered, cfg.image_size, cfg.name)


def _row_order(name: str) -> tuple:
    parts = name.split(".")
    top = parts[0]
    if top == "stem":
        key = (0, 0)
    elif top.startswith("stage"):
        sub = parts[1] if len(parts) > 1 else ""
        rank = 0 if sub == "embed" else 1 if sub == "rel_bias" else 2
        key = (int(top[5:]), rank)
    else:
        key = (99, 0)
    return key


def traced_flops(model: Model, batch: int = 1) -> int:
    """FLOPs per image measured by running a forward pass under the op tracer."""
    cfg = model.config
    x = T.zeros((batch, cfg.in_channels, cfg.image_size, cfg.image_size), dtype=model.dtype)
    with T.flop_trace() as log:
        model.forward(x)
    total = sum(n for _, n in log)
    return total // batch


# ----------------------------------------------------------------- ERF


@dataclass
class ErfMap:
    values: np.ndarray
    num_images: int
    center: tuple[int, int]
    tap: str
    normalization: str = "max"

    def support_fraction(self, threshold: float = ERF_THRESHOLD) -> float:
        return support_fraction(self.values, threshold)


def support_fraction(values: np.ndarray, threshold: float = ERF_THRESHOLD) -> float:
    """Fraction of pixels at or above ``threshold`` times the map maximum."""
    values = np.asarray(values)
    peak = values.max()
    if peak <= 0:
        return 0.0
    return float(np.count_nonzero(values >= threshold * peak)) / values.size


def seeded_images(count: int, size: int, seed: int = 0, channels: int = 3) -> np.ndarray:
    """Standard-normal images from a Philox stream, shape [count, channels, size, size]."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.standard_normal((count, channels, size, size))


def worker_count(default: int = 0) -> int:
    """Worker threads from ``TXNET_THREADS``; 0 means run sequentially."""
    raw = os.environ.get("TXNET_THREADS")
    if raw is None or raw.strip() == "":
        return default
    try:
        return max(int(raw), 0)
    except ValueError:
        raise ContractError(f"TXNET_THREADS must be an integer, got {raw!r}") from None


def _image_erf(model: Model, image: np.ndarray, tap: str) -> tuple[np.ndarray, tuple[int, int]]:
    x = Tensor(image[None], requires_grad=True, dtype=model.dtype)
    feat = model.forward_features(x, stop_at=tap)[tap]
    h, w = feat.shape[2:]
    ch, cw = h // 2, w // 2
    score = T.sum_all(T.slice_spatial(feat, ch, ch + 1, cw, cw + 1))
    T.backward(score)
    return np.abs(x.grad[0]).sum(axis=0).astype(np.float64), (ch, cw)


def erf_map(model: Model, images, tap: str, threads: int | None = None) -> ErfMap:
    """Effective receptive field of the centre activation of ``tap``.

    Per image: sum the tapped map's channels at the centre position, backpropagate
    to the input, take |grad| summed over colour channels. Maps are averaged over
    images in index order, then divided by their maximum.
    """
    available = model.tap_names()
    if tap not in available:
        raise SelectorError(tap, available)
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise ContractError(f"images must be a non-empty [N, C, H, W] array, got shape {list(images.shape)}")
    threads = worker_count() if threads is None else threads
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda img: _image_erf(model, img, tap), images))
    else:
        results = [_image_erf(model, img, tap) for img in images]
    acc = np.zeros(images.shape[2:], dtype=np.float64)
    for grad, _ in results:
        acc += grad
    acc /= len(images)
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return ErfMap(acc, len(images), results[0][1], tap)


# ------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_tensor: str
    worst_coord: tuple[int, ...]
    checked: int
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.checked} coords, worst {self.worst_tensor}{list(self.worst_coord)})")


def grad_check(fn: Callable[..., Tensor], inputs: Mapping[str, Tensor], tolerance: float = 1e-3,
               num_coords: int = 32, eps: float = 1e-4, seed: int = 0, name: str = "fn",
               floor: float = 1e-6, raise_on_fail: bool = True) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    The loss is ``sum(fn(**inputs) * R)`` for a fixed random ``R``. Each input
    gets ``num_coords`` sampled coordinates (all of them if it is smaller). The
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for key, t in inputs.items():
        if t.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 inputs; {key} is {t.dtype}")
    rng = np.random.default_rng(seed)
    out = fn(**inputs)
    proj = rng.standard_normal(out.shape)

    def loss_value() -> float:
        return float(np.sum(fn(**inputs).data * proj))

    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    T.backward(T.sum_all(T.mul(fn(**inputs), Tensor(proj, dtype=np.float64))))

    worst, worst_key, worst_coord, checked = 0.0, "", (), 0
    errors: dict[str, float] = {}
    for key, t in inputs.items():
        analytic = t.grad
        flat = np.arange(t.size)
        picks = flat if t.size <= num_coords else rng.choice(flat, size=num_coords, replace=False)
        tensor_worst = 0.0
        for idx in picks:
            coord = np.unravel_index(int(idx), t.shape)
            orig = t.data[coord]
            t.data[coord] = orig + eps
            up = loss_value()
            t.data[coord] = orig - eps
            down = loss_value()
            t.data[coord] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic[coord])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            tensor_worst = max(tensor_worst, err)
            if err > worst or not worst_key:
                worst, worst_key, worst_coord = err, key, tuple(int(i) for i in coord)
        errors[key] = tensor_worst
    report = GradCheckReport(name, worst, worst_key, worst_coord, checked, tolerance, errors)
    if raise_on_fail and not report.passed:
        raise CheckFailure(report.summary())
    return report


# ------------------------------------------------------------- IDConv oracle


def idconv_oracle(x: np.ndarray, p: IDConvParams) -> np.ndarray:
    """IDConv recomputed with explicit loops over every index. Tiny inputs only."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    k, g = p.kernel_size, p.groups
    if h > 8 or w > 8:
        raise ContractError(f"oracle is meant for spatial extents <= 8, got {h}x{w}")
    w1 = p.squeeze_conv.weight.data.reshape(p.squeeze_conv.out_channels, c).astype(np.float64)
    b1 = p.squeeze_conv.bias.data.astype(np.float64)
    w2 = p.expand_conv.weight.data.reshape(g * c, -1).astype(np.float64)
    b2 = p.expand_conv.bias.data.astype(np.float64)
    banks = p.static_kernels.data.astype(np.float64)
    cr = w1.shape[0]
    pad = (k - 1) // 2
    out = np.zeros((n, c, h, w))
    for b in range(n):
        # adaptive average pool to k x k
        pooled = np.zeros((c, k, k))
        for ch in range(c):
            for i in range(k):
                r0, r1 = (i * h) // k, -((-(i + 1) * h) // k)
                for j in range(k):
                    c0, c1 = (j * w) // k, -((-(j + 1) * w) // k)
                    total = 0.0
                    for r in range(r0, r1):
                        for s in range(c0, c1):
                            total += x[b, ch, r, s]
                    pooled[ch, i, j] = total / ((r1 - r0) * (c1 - c0))
        kernels = np.zeros((c, k, k))
        for i in range(k):
            for j in range(k):
                mid = [b1[o] + sum(w1[o, ch] * pooled[ch, i, j] for ch in range(c)) for o in range(cr)]
                logits = [b2[o] + sum(w2[o, q] * mid[q] for q in range(cr)) for o in range(g * c)]
                for ch in range(c):
                    vals = [logits[gi * c + ch] for gi in range(g)]
                    top = max(vals)
                    exps = [math.exp(v - top) for v in vals]
                    denom = sum(exps)
                    kernels[ch, i, j] = sum(exps[gi] / denom * banks[gi, ch, i, j] for gi in range(g))
        for ch in range(c):
            for r in range(h):
                for s in range(w):
                    total = 0.0
                    for i in range(k):
                        for j in range(k):
                            rr, ss = r + i - pad, s + j - pad
                            if 0 <= rr < h and 0 <= ss < w:
                                total += kernels[ch, i, j] * x[b, ch, rr, ss]
                    out[b, ch, r, s] = total
    return out


def receptive_radius(kernels_and_strides: Sequence[tuple[int, int]]) -> int:
    """Radius in input pixels of a stack of (kernel, stride) layers."""
    radius, jump = 0, 1
    for k, s in kernels_and_strides:
        radius += (k - 1) // 2 * jump
        jump *= s
    return radius
