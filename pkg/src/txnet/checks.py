"""Finite-difference and oracle suites run by ``txnet check`` and the tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import GradCheckReport, grad_check, idconv_oracle
from .errors import CheckFailure
from .mixer import IDConvParams, dmixer_forward, idconv_forward, idconv_generate_kernels, make_dmixer, make_idconv
from .network import block_forward, micro_config, _make_block
from .ops import (
    Conv2dParams,
    NormParams,
    adaptive_avg_pool,
    batch_norm_inference,
    conv2d,
    depthwise_conv_per_sample,
    gelu,
    linear,
    softmax,
)
from .params import ParamFactory
from .tensor import Tensor

LINEAR_TOL = 1e-5
SMOOTH_TOL = 1e-3
ORACLE_TOL = 1e-6


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: dict[str, Tensor]
    tolerance: float
    eps: float = 1e-4


def _rand(rng, *shape, lo=None, hi=None) -> Tensor:
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, dtype=np.float64)


def op_cases(seed: int = 0) -> list[GradCase]:
    """One or more small double-precision cases per registered op (<= 64 elements per tensor)."""
    rng = np.random.default_rng(seed)
    r = lambda *s, **kw: _rand(rng, *s, **kw)  # noqa: E731
    cases = [
        GradCase("add", lambda a, b: T.add(a, b), {"a": r(2, 2, 3, 3), "b": r(2, 2, 3, 3)}, LINEAR_TOL),
        GradCase("add[channel]", lambda a, b: T.add(a, b), {"a": r(2, 3, 3, 3), "b": r(1, 3, 1, 1)}, LINEAR_TOL),
        GradCase("add[batch]", lambda a, b: T.add(a, b), {"a": r(2, 3, 3, 3), "b": r(1, 3, 3, 3)}, LINEAR_TOL),
        GradCase("sub", lambda a, b: T.sub(a, b), {"a": r(2, 2, 3, 3), "b": r(1, 2, 1, 1)}, LINEAR_TOL),
        GradCase("mul", lambda a, b: T.mul(a, b), {"a": r(2, 2, 3, 3), "b": r(2, 2, 3, 3)}, LINEAR_TOL),
        GradCase("mul[channel]", lambda a, b: T.mul(a, b), {"a": r(2, 3, 3, 3), "b": r(1, 3, 1, 1)}, LINEAR_TOL),
        GradCase("scale", lambda a: T.scale(a, -1.7), {"a": r(2, 3, 4)}, LINEAR_TOL),
        GradCase("sum", lambda a: T.sum_all(a), {"a": r(2, 3, 4)}, LINEAR_TOL),
        GradCase("sum_axis", lambda a: T.sum_axis(a, 1), {"a": r(2, 3, 2, 4)}, LINEAR_TOL),
        GradCase("reshape", lambda a: T.reshape(a, (4, 6)), {"a": r(2, 3, 4)}, LINEAR_TOL),
        GradCase("permute", lambda a: T.permute(a, (2, 0, 1)), {"a": r(2, 3, 4)}, LINEAR_TOL),
        GradCase("matmul", lambda a, b: T.matmul(a, b), {"a": r(2, 3, 4), "b": r(2, 4, 5)}, LINEAR_TOL),
        GradCase("split_channels", lambda a: T.split_channels(a, 3)[1], {"a": r(2, 6, 2, 2)}, LINEAR_TOL),
        GradCase("concat_channels", lambda a, b: T.concat_channels([a, b]),
                 {"a": r(2, 2, 3, 3), "b": r(2, 3, 3, 3)}, LINEAR_TOL),
        GradCase("slice_spatial", lambda a: T.slice_spatial(a, 1, 3, 0, 2), {"a": r(2, 2, 4, 4)}, LINEAR_TOL),
        GradCase("softmax", lambda a: softmax(a, axis=1), {"a": r(2, 4, 3, 2)}, LINEAR_TOL),
        GradCase("softmax[last]", lambda a: softmax(a, axis=-1), {"a": r(3, 5, 4)}, LINEAR_TOL),
        GradCase("gelu", gelu, {"x": r(2, 3, 3, 3)}, SMOOTH_TOL),
        GradCase("adaptive_avg_pool", lambda x: adaptive_avg_pool(x, 3, 2), {"x": r(2, 2, 5, 4)}, LINEAR_TOL),
        GradCase("adaptive_avg_pool[up]", lambda x: adaptive_avg_pool(x, 3, 3), {"x": r(2, 2, 2, 2)}, LINEAR_TOL),
        GradCase("depthwise_conv_per_sample", lambda x, k: depthwise_conv_per_sample(x, k),
                 {"x": r(2, 2, 4, 4), "k": r(2, 2, 3, 3)}, LINEAR_TOL),
    ]
    lw, lb = r(5, 4), r(5)
    cases.append(GradCase("linear", lambda x, w, b: linear(x, w, b), {"x": r(2, 3, 4), "w": lw, "b": lb}, LINEAR_TOL))

    def conv_case(name, cin, cout, k, stride, pad, groups, h):
        w, b = r(cout, cin // groups, k, k), r(cout)

        def fn(x, w, b):
            return conv2d(x, Conv2dParams(cin, cout, k, k, w, b, stride=stride, padding=pad, groups=groups))

        return GradCase(name, fn, {"x": r(2, cin, h, h), "w": w, "b": b}, LINEAR_TOL)

    cases += [
        conv_case("conv2d", 2, 3, 3, 2, 1, 1, 5),
        conv_case("conv2d[1x1]", 4, 3, 1, 1, 0, 1, 3),
        conv_case("conv2d[grouped]", 4, 4, 3, 1, 1, 2, 3),
        conv_case("conv2d[depthwise]", 3, 3, 3, 1, 1, 3, 4),
    ]

    rm, rv = r(3), r(3, lo=0.5, hi=1.5)

    def bn(x, scale, shift):
        return batch_norm_inference(x, NormParams(3, scale, shift, rm, rv))

    cases.append(GradCase("batch_norm_inference", bn, {"x": r(2, 3, 3, 3), "scale": r(3), "shift": r(3)},
                          LINEAR_TOL))
    return cases


def _randomize(store, rng) -> None:
    """Replace init values with O(1) random values so every path is exercised."""
    for name, t in store.items():
        if name.endswith("running_var"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        else:
            t.data[...] = rng.standard_normal(t.shape) * 0.5


def composite_cases(seed: int = 0) -> list[GradCase]:
    """Full micro D-Mixer and a full micro block, checked against every parameter and the input."""
    rng = np.random.default_rng(seed + 1)
    f = ParamFactory(seed=seed, dtype=np.float64)
    rel = f.param("rel_bias", (1, 64, 4), init="zeros")
    mixer = make_dmixer(f, "mixer", 8, heads=1, stride=4, groups=2, rel_bias=rel)
    _randomize(f.store, rng)
    x = _rand(rng, 1, 8, 8, 8)
    inputs = {"x": x, **{n: t for n, t in f.store.learnable()}}
    cases = [GradCase("dmixer[micro]", lambda x, **_: dmixer_forward(x, mixer), inputs, SMOOTH_TOL)]

    cfg = micro_config()
    sc = cfg.stages[0]
    fb = ParamFactory(seed=seed, dtype=np.float64)
    rel_b = fb.param("stage1.rel_bias", (sc.heads, 64, 1), init="zeros")
    blk = _make_block(fb, "stage1.block0", cfg, sc, rel_b)
    _randomize(fb.store, rng)
    xb = _rand(rng, 1, 8, 8, 8)
    inputs_b = {"x": xb, **{n: t for n, t in fb.store.learnable()}}
    cases.append(GradCase("block[micro]", lambda x, **_: block_forward(x, blk), inputs_b, SMOOTH_TOL))
    return cases


def run_grad_suite(seed: int = 0, cases: list[GradCase] | None = None) -> list[GradCheckReport]:
    cases = cases if cases is not None else op_cases(seed) + composite_cases(seed)
    return [grad_check(c.fn, c.inputs, tolerance=c.tolerance, eps=c.eps, seed=seed, name=c.name,
                       raise_on_fail=False) for c in cases]


# ------------------------------------------------------------ IDConv oracle


def random_idconv(rng: np.random.Generator, channels: int | None = None, groups: int | None = None,
                  kernel_size: int | None = None) -> IDConvParams:
    c = channels or int(rng.choice([4, 8]))
    g = groups or int(rng.integers(1, 5))
    k = kernel_size or int(rng.choice([3, 5, 7]))
    f = ParamFactory(seed=int(rng.integers(2**31)), dtype=np.float64)
    p = make_idconv(f, "idconv", c, g, k, reduction=4)
    _randomize(f.store, rng)
    return p


@dataclass
class OracleReport:
    name: str
    max_abs_diff: float
    instances: int
    tolerance: float = ORACLE_TOL

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tolerance

    def summary(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status} {self.name}: max abs diff {self.max_abs_diff:.3e} "
                f"(tol {self.tolerance:.0e}, {self.instances} instances)")


def run_oracle_suite(seed: int = 0, instances: int = 50) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        p = random_idconv(rng)
        n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.standard_normal((n, p.channels, h, w))
        got = idconv_forward(Tensor(x, dtype=np.float64), p).data
        worst = max(worst, float(np.abs(got - idconv_oracle(x, p)).max()))
    reports = [OracleReport("idconv vs loop oracle", worst, instances)]

    # one group: softmax weight is 1 so the bank is used as a static depthwise kernel
    worst = 0.0
    for _ in range(instances):
        p = random_idconv(rng, groups=1)
        k = p.kernel_size
        x = Tensor(rng.standard_normal((2, p.channels, 6, 6)), dtype=np.float64)
        static = Conv2dParams(p.channels, p.channels, k, k, T.reshape(p.static_kernels, (p.channels, 1, k, k)),
                              None, padding=(k - 1) // 2, groups=p.channels)
        worst = max(worst, float(np.abs(idconv_forward(x, p).data - conv2d(x, static).data).max()))
    reports.append(OracleReport("idconv G=1 vs static depthwise", worst, instances))

    # identical samples share one generated kernel, so a plain depthwise conv reproduces them
    worst = 0.0
    for _ in range(instances):
        p = random_idconv(rng)
        k = p.kernel_size
        one = rng.standard_normal((1, p.channels, 5, 5))
        x = Tensor(np.repeat(one, 3, axis=0), dtype=np.float64)
        kern = idconv_generate_kernels(Tensor(one, dtype=np.float64), p).data[0]
        shared = Conv2dParams(p.channels, p.channels, k, k, Tensor(kern[:, None], dtype=np.float64), None,
                              padding=(k - 1) // 2, groups=p.channels)
        worst = max(worst, float(np.abs(idconv_forward(x, p).data - conv2d(x, shared).data).max()))
    reports.append(OracleReport("idconv batch-constant vs shared kernel", worst, instances))
    return reports


def run_all(seed: int = 0, raise_on_fail: bool = False) -> tuple[list[GradCheckReport], list[OracleReport]]:
    grads = run_grad_suite(seed)
    oracles = run_oracle_suite(seed)
    if raise_on_fail:
        bad = [r.summary() for r in [*grads, *oracles] if not r.passed]
        if bad:
            raise CheckFailure("; ".join(bad))
    return grads, oracles
