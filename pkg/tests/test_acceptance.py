"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""
import sys
import time

import numpy as np
import pytest

from txnet import tensor as T
from txnet import weights as W
from txnet.analysis import count_flops, count_params, erf_map, seeded_images
from txnet.checks import LINEAR_TOL, ORACLE_TOL, op_cases, run_grad_suite, run_oracle_suite
from txnet.mixer import (
    idconv_attention,
    make_idconv,
    make_osra,
    make_rel_bias,
    make_ste,
    osra_forward,
    ste_forward,
)
from txnet.network import build_model, micro_config, variant_config, with_changes
from txnet.params import ParamFactory
from txnet.tensor import Tensor

ERF_IMAGES = 32
LINEAR_OPS = {"add", "sub", "mul", "scale", "sum", "sum_axis", "reshape", "permute", "matmul", "split_channels",
              "concat_channels", "slice_spatial", "linear", "conv2d", "batch_norm_inference",
              "adaptive_avg_pool", "depthwise_conv_per_sample", "softmax"}


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, detail: str, seconds: float):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{seconds:.2f} s]")
        assert ok, detail

    return emit


def test_criterion_1_variant_costs(report):
    start = time.perf_counter()
    reported = {"t": (12.8e6, 1.8e9), "s": (26.9e6, 4.5e9), "b": (48.0e6, 8.3e9)}
    parts, ok = [], True
    for name, (params, flops) in reported.items():
        cfg = variant_config(name)
        p = count_params(cfg).total_params
        f = count_flops(cfg).total_flops
        dp, df = (p - params) / params, (f - flops) / flops
        ok &= abs(dp) <= 0.02 and abs(df) <= 0.05
        parts.append(f"{name.upper()} {p / 1e6:.2f}M ({dp:+.1%}) {f / 1e9:.3f}G ({df:+.1%})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 5.0
    report(1, ok, "; ".join(parts), elapsed)


def test_criterion_2_closed_forms(report):
    start = time.perf_counter()
    bad = []
    grid = [(c, g, r, k) for c in (16, 64) for g in (1, 2, 4) for r in (4,) for k in (3, 7)]
    for c, g, r, k in grid:
        f = ParamFactory(seed=0, mode="zeros")
        make_idconv(f, "idconv", c, g, k, reduction=r)
        weights = sum(t.size for n, t in f.store.items() if not n.endswith(".bias"))
        expected = (c * c // r) * (g + 1) + g * c * k * k
        if weights != expected:
            bad.append(f"idconv{(c, g, r, k)}: {weights} != {expected}")

    # STE: analytic rows of the T model and traced MACs of standalone layers
    ste_checked = 0
    cfg = variant_config("t")
    rep = count_flops(cfg)
    for i, sc in enumerate(cfg.stages, start=1):
        c, r = sc.channels, 8
        if c // r < 16:
            continue
        h, w = sc.resolution
        for j in range(sc.blocks):
            got = sum(row.flops for row in rep.rows if row.name.startswith(f"stage{i}.block{j}.mixer.ste."))
            ste_checked += 1
            if got != h * w * c * (2 * c // r + 9):
                bad.append(f"stage{i}.block{j} STE {got}")
    for c in (128, 256, 512):
        for hw in (7, 14):
            f = ParamFactory(seed=0)
            p = make_ste(f, "ste", c)
            with T.flop_trace() as log:
                ste_forward(T.zeros((1, c, hw, hw)), p)
            got = sum(n for _, n in log)
            ste_checked += 1
            if got != hw * hw * c * (2 * c // 8 + 9):
                bad.append(f"traced STE C={c} {hw}x{hw}: {got}")
    elapsed = time.perf_counter() - start
    detail = (f"IDConv weight formula on {len(grid)} grid points, STE FLOPs on {ste_checked} layers"
              + (f"; mismatches: {bad}" if bad else ", all exact"))
    report(2, not bad, detail, elapsed)


def test_criterion_3_idconv_oracle(report):
    start = time.perf_counter()
    reports = run_oracle_suite(seed=0, instances=50)
    elapsed = time.perf_counter() - start
    ok = all(r.max_abs_diff < ORACLE_TOL for r in reports) and len(reports) == 3 and elapsed < 30.0
    detail = "; ".join(f"{r.name} {r.max_abs_diff:.1e}" for r in reports)
    report(3, ok, detail, elapsed)


def test_criterion_4_gradient_suite(report):
    start = time.perf_counter()
    reports = run_grad_suite(seed=0)
    elapsed = time.perf_counter() - start
    names = {r.name for r in reports}
    covered = {c.name.split("[")[0] for c in op_cases()}
    missing = set(T.OP_REGISTRY) - covered
    failures = []
    for r in reports:
        base = r.name.split("[")[0]
        limit = LINEAR_TOL if base in LINEAR_OPS else 1e-3
        if not r.max_rel_error < limit:
            failures.append(f"{r.name} {r.max_rel_error:.1e} >= {limit:.0e}")
    ok = not missing and not failures and "dmixer[micro]" in names and "block[micro]" in names and elapsed < 60
    worst = max(reports, key=lambda r: r.max_rel_error)
    detail = (f"{len(reports)} cases over {len(T.OP_REGISTRY)} registered ops plus micro D-Mixer and block; "
              f"worst {worst.name} {worst.max_rel_error:.1e}")
    if missing or failures:
        detail += f"; missing {sorted(missing)} failures {failures}"
    report(4, ok, detail, elapsed)


def test_criterion_5_normalization(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_id = worst_os = 0.0
    for i in range(100):
        c = int(rng.choice([4, 8, 16]))
        f = ParamFactory(seed=i)
        p = make_idconv(f, "idconv", c, int(rng.integers(1, 5)), int(rng.choice([3, 5, 7])))
        for _, t in f.store.items():
            t.data[...] = rng.standard_normal(t.shape)
        x = Tensor(rng.standard_normal((2, c, int(rng.integers(1, 12)), int(rng.integers(1, 12)))), dtype=np.float32)
        a = idconv_attention(x, p).data
        assert a.dtype == np.float32
        a = a.astype(np.float64)
        worst_id = max(worst_id, float(np.abs(a.sum(axis=1) - 1).max()))
    for i in range(100):
        heads = int(rng.choice([1, 2, 4]))
        c = heads * int(rng.choice([2, 4]))
        stride = int(rng.choice([1, 2, 4]))
        size = stride * int(rng.integers(1, 5))
        f = ParamFactory(seed=i)
        rel = make_rel_bias(f, "rel", heads, size, size, stride)
        p = make_osra(f, "osra", c, heads, stride, rel)
        for name, t in f.store.items():
            t.data[...] = rng.uniform(0.5, 1.5, t.shape) if "running_var" in name else rng.standard_normal(t.shape)
        _, attn = osra_forward(Tensor(rng.standard_normal((2, c, size, size)), dtype=np.float32), p, return_attention=True)
        worst_os = max(worst_os, float(np.abs(attn.data.astype(np.float64).sum(axis=-1) - 1).max()))
    elapsed = time.perf_counter() - start
    ok = worst_id <= 1e-6 and worst_os <= 1e-6
    report(5, ok, f"IDConv group sums |1-s| <= {worst_id:.1e}, OSRA row sums |1-s| <= {worst_os:.1e} "
                  "(100 instances each, float32)", elapsed)


def test_criterion_6_shape_pipeline(report):
    start = time.perf_counter()
    parts, ok = [], True
    m = build_model(variant_config("t"), seed=0)
    x = Tensor(seeded_images(2, 224, seed=0))
    feats = m.forward_features(x)
    sizes = [feats[f"stage{i}"].shape[2:] for i in range(1, 5)]
    logits = m.head(feats["stage4"])
    ok &= sizes == [(56, 56), (28, 28), (14, 14), (7, 7)] and logits.shape == (2, 1000)
    parts.append(f"T@224 maps {[s[0] for s in sizes]} logits {list(logits.shape)}")
    for res, expect in ((32, [8, 4, 2, 1]), (64, [16, 8, 4, 2])):
        mm = build_model(micro_config(res), seed=0)
        f = mm.forward_features(Tensor(seeded_images(2, res, seed=0)))
        got = [f[f"stage{i}"].shape[2] for i in range(1, 5)]
        out = mm.head(f["stage4"]).shape
        ok &= got == expect and out == (2, 1000)
        parts.append(f"micro@{res} maps {got}")
    report(6, ok, "; ".join(parts), time.perf_counter() - start)


def test_criterion_7_erf_properties(report):
    start = time.perf_counter()
    cfg = micro_config(64)
    imgs = seeded_images(ERF_IMAGES, 64, seed=0)
    dm = build_model(cfg, seed=0)
    base = build_model(with_changes(cfg, mixer_mode="dwconv_baseline"), seed=0)
    osra = erf_map(dm, imgs, "stage1.block0.osra").support_fraction()
    idc = erf_map(dm, imgs, "stage1.block0.idconv").support_fraction()
    mix = erf_map(dm, imgs, "stage1.block0.dmixer").support_fraction()
    deep_dm = erf_map(dm, imgs, "stage4").support_fraction()
    deep_base = erf_map(base, imgs, "stage4").support_fraction()
    elapsed = time.perf_counter() - start
    a, b, c = osra > idc, mix >= idc, deep_base <= deep_dm
    ok = a and b and c and elapsed < 120
    detail = (f"(a) OSRA {osra:.3f} > IDConv {idc:.3f}: {a}; (b) D-Mixer {mix:.3f} >= IDConv: {b}; "
              f"(c) baseline stage4 {deep_base:.3f} <= D-Mixer stage4 {deep_dm:.3f}: {c}")
    report(7, ok, detail, elapsed)


def test_criterion_8_determinism(report, tmp_path):
    start = time.perf_counter()
    cfg = micro_config()
    blob_a = W.encode(build_model(cfg, seed=42).params.arrays())
    blob_b = W.encode(build_model(cfg, seed=42).params.arrays())
    same_build = blob_a == blob_b

    path = tmp_path / "w.txw"
    path.write_bytes(blob_a)
    W.save(tmp_path / "again.txw", W.load(path))
    round_trip = (tmp_path / "again.txw").read_bytes() == blob_a

    m = build_model(cfg, weights=W.load(path))
    x = Tensor(seeded_images(3, 32, seed=1))
    first, second = m.forward(x).data, m.forward(x).data
    repeat = first.tobytes() == second.tobytes()

    rng = np.random.default_rng(0)
    split_ok = True
    for parts in (1, 2, 3, 4):
        y = Tensor(rng.standard_normal((2, 12, 3, 5)))
        split_ok &= np.array_equal(T.concat_channels(T.split_channels(y, parts)).data, y.data)
    ok = same_build and round_trip and repeat and split_ok
    report(8, ok, f"byte-identical builds {same_build}; save/load byte-exact {round_trip}; "
                  f"repeat forward bit-identical {repeat}; concat(split) exact {split_ok}",
           time.perf_counter() - start)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
