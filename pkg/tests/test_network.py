import json

import numpy as np
import pytest

from txnet import tensor as T
from txnet.errors import ConfigError, ShapeError
from txnet.mixer import DMixerParams
from txnet.network import (
    ModelConfig,
    at_resolution,
    block_forward,
    build_model,
    dpe_forward,
    forward_classify,
    make_msffn,
    micro_config,
    msffn_forward,
    patch_embed_forward,
    stage_resolutions,
    variant_config,
    with_changes,
)
from txnet.ops import conv2d, gelu
from txnet.params import ParamFactory, make_dwconv
from txnet.tensor import Tensor


def x64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def randomize(store, rng, scale=0.5):
    for name, t in store.items():
        if name.endswith("running_var"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        else:
            t.data[...] = rng.standard_normal(t.shape) * scale


# ------------------------------------------------------------------- MS-FFN


def test_msffn_shape():
    f = ParamFactory(dtype=np.float64)
    p = make_msffn(f, "ffn", 8, 4)
    assert p.hidden == 32 and [c.in_channels for c in p.dw_convs] == [8, 8, 8, 8]
    x = x64(np.random.default_rng(0).standard_normal((2, 8, 14, 14)))
    assert msffn_forward(x, p).shape == x.shape


def test_msffn_scale_one_is_channel_scaling():
    f = ParamFactory(dtype=np.float64)
    p = make_msffn(f, "ffn", 4, 4)
    randomize(f.store, np.random.default_rng(1))
    conv = p.dw_convs[0]
    assert conv.kernel_h == 1
    h = np.random.default_rng(2).standard_normal((1, 4, 3, 3))
    out = conv2d(x64(h), conv).data
    np.testing.assert_allclose(out, h * conv.weight.data.reshape(1, 4, 1, 1) + conv.bias.data.reshape(1, 4, 1, 1),
                               atol=1e-14)


def test_msffn_single_scale_equals_one_depthwise():
    rng = np.random.default_rng(3)
    f = ParamFactory(dtype=np.float64)
    p = make_msffn(f, "ffn", 4, 2, scales=[3])
    randomize(f.store, rng)
    g = ParamFactory(dtype=np.float64)
    dw = make_dwconv(g, "dw", 8, 3)
    dw.weight.data[...] = p.dw_convs[0].weight.data
    dw.bias.data[...] = p.dw_convs[0].bias.data
    x = x64(rng.standard_normal((2, 4, 5, 5)))
    ref = conv2d(gelu(conv2d(gelu(conv2d(x, p.fc1)), dw)), p.fc2)
    np.testing.assert_array_equal(msffn_forward(x, p).data, ref.data)


def test_msffn_indivisible_hidden():
    with pytest.raises(ConfigError):
        make_msffn(ParamFactory(), "ffn", 48, 4, scales=[1, 3, 5, 7, 9])
    with pytest.raises(ConfigError):
        make_msffn(ParamFactory(), "ffn", 8, 4, scales=[1, 2])


# ---------------------------------------------------------------- DPE/block


def test_dpe_zero_weights_identity_and_shape():
    f = ParamFactory(dtype=np.float64)
    conv = make_dwconv(f, "dpe", 4, 7)
    conv.weight.data[...] = 0
    x = np.random.default_rng(4).standard_normal((1, 4, 5, 5))
    np.testing.assert_array_equal(dpe_forward(x64(x), conv).data, x)


def _micro_block(seed=0, requires_grad=False, size=32):
    model = build_model(micro_config(size), seed=seed, dtype=np.float64, requires_grad=requires_grad)
    return model, model.stages[0].blocks[0]


def test_block_zero_weights_is_identity():
    model, blk = _micro_block()
    for name, t in model.params.items():
        if name.startswith("stage1.block0") and not any(k in name for k in ("norm", "running")):
            t.data[...] = 0
    x = np.random.default_rng(5).standard_normal((2, 8, 8, 8))
    out = block_forward(x64(x), blk).data
    assert np.abs(out - x).max() < 1e-5


def test_block_gradients_reach_every_parameter():
    # at 64x64 the stage-1 keys form a 2x2 map; at 32x32 a single key would make B inert
    model, blk = _micro_block(requires_grad=True, size=64)
    randomize(model.params, np.random.default_rng(6))
    x = Tensor(np.random.default_rng(7).standard_normal((1, 8, 16, 16)), requires_grad=True)
    proj = x64(np.random.default_rng(8).standard_normal((1, 8, 16, 16)))
    T.backward(T.sum_all(T.mul(block_forward(x, blk), proj)))
    names = [n for n, _ in model.params.learnable() if n.startswith("stage1.block0") or n == "stage1.rel_bias"]
    assert len(names) > 30
    for n in names:
        g = model.params[n].grad
        assert g is not None and np.abs(g).max() > 0, n


def test_block_channel_mismatch():
    _, blk = _micro_block()
    with pytest.raises(ShapeError):
        block_forward(x64(np.ones((1, 4, 8, 8))), blk)


# ------------------------------------------------------------ patch embeds


def test_stage_resolution_chain():
    assert stage_resolutions(224) == [56, 28, 14, 7]
    assert stage_resolutions(32) == [8, 4, 2, 1]
    assert (224 + 2 * 3 - 7) // 4 + 1 == 56


def test_stem_output_for_t():
    model = build_model(variant_config("t"), mode="zeros")
    x = T.zeros((1, 3, 224, 224))
    out = patch_embed_forward(x, model.stages[0].embed)
    assert out.shape == (1, 48, 56, 56)


def test_indivisible_resolution_rejected():
    with pytest.raises(ConfigError):
        micro_config(image_size=48)
    with pytest.raises(ConfigError):
        at_resolution(micro_config(), 100)


# ---------------------------------------------------------------- variants


@pytest.mark.parametrize("name,channels,blocks,heads,groups,expansion", [
    ("t", [48, 96, 224, 448], [3, 3, 9, 3], [1, 2, 4, 8], [2, 2, 2, 2], [4, 4, 4, 4]),
    ("s", [64, 128, 320, 512], [4, 4, 12, 4], [1, 2, 5, 8], [2, 2, 3, 4], [6, 6, 4, 4]),
    ("b", [76, 152, 336, 672], [4, 4, 21, 4], [2, 4, 8, 16], [2, 2, 4, 4], [8, 8, 4, 4]),
])
def test_variant_tables(name, channels, blocks, heads, groups, expansion):
    cfg = variant_config(name)
    assert [s.channels for s in cfg.stages] == channels
    assert [s.blocks for s in cfg.stages] == blocks
    assert [s.heads for s in cfg.stages] == heads
    assert [s.groups for s in cfg.stages] == groups
    assert [s.expansion for s in cfg.stages] == expansion
    assert [s.sr_stride for s in cfg.stages] == [8, 4, 2, 1]
    assert all(s.kernel_size == 7 for s in cfg.stages)
    assert [s.resolution for s in cfg.stages] == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert cfg.stem_channels == channels[0] and cfg.num_classes == 1000


def test_unknown_variant():
    with pytest.raises(ConfigError):
        variant_config("xl")


def test_param_names_deterministic():
    a = build_model(micro_config(), seed=1).params.shapes()
    b = build_model(micro_config(), seed=2).params.shapes()
    assert list(a.items()) == list(b.items())
    assert "stage1.block0.mixer.osra.q.weight" in a
    assert "stage2.embed.conv.weight" in a and "stem.conv.weight" in a and "head.fc.bias" in a


def test_init_statistics():
    model = build_model(variant_config("t"), seed=0)
    w = model.params["stage3.block0.ffn.fc1.weight"].data
    assert abs(w.std() - 0.02 * 0.88) < 0.002 and np.abs(w).max() <= 0.04
    assert not model.params["stage3.block0.ffn.fc1.bias"].data.any()
    assert not model.params["stage1.rel_bias"].data.any()
    assert np.all(model.params["stem.norm.scale"].data == 1)
    assert np.abs(model.params["stage1.block0.mixer.idconv.static_kernels"].data).max() <= 0.04


def test_init_independent_of_build_order():
    a = build_model(micro_config(), seed=3)
    b = build_model(micro_config(mixer_mode="dwconv_baseline"), seed=3)
    for name in ("stem.conv.weight", "stage1.block0.dpe.weight", "stage2.block0.ffn.fc2.weight"):
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


# -------------------------------------------------------------- JSON config


def test_config_json_round_trip():
    cfg = variant_config("s")
    again = ModelConfig.from_json(cfg.to_json())
    assert again == cfg
    assert json.loads(cfg.to_json())["stages"][2]["heads"] == 5


def _cfg_dict():
    return micro_config().to_dict()


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d["stages"][1].__setitem__("channels", 15), "stages[1].channels"),
    (lambda d: d["stages"][0].__setitem__("heads", 3), "stages[0].heads"),
    (lambda d: d["stages"][2].__setitem__("blocks", 0), "stages[2].blocks"),
    (lambda d: d["stages"][2].__setitem__("blocks", "two"), "stages[2].blocks"),
    (lambda d: d["stages"][3].pop("groups"), "stages[3].groups"),
    (lambda d: d["stages"][0].__setitem__("resolution", [9, 9]), "stages[0].resolution"),
    (lambda d: d.__setitem__("mixer_mode", "mlp"), "mixer_mode"),
    (lambda d: d.__setitem__("bogus", 1), "bogus"),
    (lambda d: d.__setitem__("stem_channels", 9), "stem_channels"),
    (lambda d: d.__setitem__("attention_ratio", 1.5), "attention_ratio"),
])
def test_config_errors_name_field(mutate, path):
    d = _cfg_dict()
    mutate(d)
    with pytest.raises(ConfigError) as exc:
        ModelConfig.from_dict(d)
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_odd_channels_message_names_stage():
    d = _cfg_dict()
    d["stages"][1]["channels"] = 15
    with pytest.raises(ConfigError, match="stage 2"):
        ModelConfig.from_dict(d)


def test_malformed_json():
    with pytest.raises(ConfigError, match="malformed"):
        ModelConfig.from_json("{not json")


# ------------------------------------------------------------------ forward


def test_micro_forward_shapes_and_taps():
    model = build_model(micro_config(), seed=0)
    x = Tensor(np.random.default_rng(9).standard_normal((2, 3, 32, 32)), dtype=np.float32)
    feats = model.forward_features(x)
    assert [feats[f"stage{i}"].shape[2] for i in range(1, 5)] == [8, 4, 2, 1]
    assert [feats[f"stage{i}"].shape[1] for i in range(1, 5)] == [8, 16, 32, 64]
    assert set(feats) == set(model.tap_names())
    logits = forward_classify(model, x)
    assert logits.shape == (2, 1000) and np.all(np.isfinite(logits.data))


def test_forward_stops_at_tap():
    model = build_model(micro_config(), seed=0)
    feats = model.forward_features(T.zeros((1, 3, 32, 32)), stop_at="stage1.block0.idconv")
    assert "stage1.block0.idconv" in feats and "stage2" not in feats


def test_identical_images_identical_rows():
    model = build_model(micro_config(), seed=0)
    one = np.random.default_rng(10).standard_normal((1, 3, 32, 32))
    logits = forward_classify(model, Tensor(np.concatenate([one, one]), dtype=np.float32)).data
    np.testing.assert_array_equal(logits[0], logits[1])
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)


def test_wrong_resolution_rejected():
    model = build_model(micro_config(), seed=0)
    with pytest.raises(ConfigError):
        forward_classify(model, T.zeros((1, 3, 64, 64)))


def test_every_parameter_perturbation_changes_logits():
    # 64x64 keeps at least four key tokens per stage so every B entry matters
    model = build_model(micro_config(64), seed=0, dtype=np.float64)
    randomize(model.params, np.random.default_rng(11), scale=0.1)
    x = x64(np.random.default_rng(12).standard_normal((1, 3, 64, 64)))
    base = forward_classify(model, x).data.copy()
    for name, t in model.params.learnable():
        # centre element: corner taps of 7x7 kernels only ever see padding on 2x2 maps
        idx = tuple(n // 2 for n in t.shape)
        old = t.data[idx]
        t.data[idx] = old + 1e-2
        changed = np.abs(forward_classify(model, x).data - base).max()
        t.data[idx] = old
        assert changed > 0, name


def test_zero_weight_stages_are_identity_between_embeds():
    model = build_model(micro_config(), seed=0, dtype=np.float64)
    for name, t in model.params.items():
        if ".block" in name and "norm" not in name:
            t.data[...] = 0
    x = x64(np.random.default_rng(13).standard_normal((1, 3, 32, 32)))
    feats = model.forward_features(x)
    for i in range(1, 5):
        entry = feats["stem" if i == 1 else f"stage{i}.embed"].data
        assert np.abs(feats[f"stage{i}"].data - entry).max() < 1e-5


def test_repeated_forward_bit_identical():
    model = build_model(micro_config(), seed=0)
    x = Tensor(np.random.default_rng(14).standard_normal((2, 3, 32, 32)), dtype=np.float32)
    assert model(x).data.tobytes() == model(x).data.tobytes()


def test_ablation_configs_build_and_run():
    for cfg in (micro_config(sr_mode="nsr"), micro_config(use_ste=False), micro_config(use_dpe=False),
                micro_config(mixer_mode="dwconv_baseline"), micro_config(ffn_scales=(1, 3))):
        model = build_model(cfg, seed=0)
        assert model(T.zeros((1, 3, 32, 32))).shape == (1, 1000)
    base = build_model(micro_config(mixer_mode="dwconv_baseline"))
    assert not any(isinstance(b.mixer, DMixerParams) for s in base.stages for b in s.blocks)
    assert not any("rel_bias" in n for n in base.params)


def test_with_changes_validates():
    with pytest.raises(ConfigError):
        with_changes(micro_config(), attention_ratio=0.3)
