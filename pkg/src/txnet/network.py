"""Blocks, stages and whole-model assembly for the T/S/B variants.

Parameter names follow ``stem.*``, ``stage{i}.embed.*`` (i = 2..4),
``stage{i}.rel_bias``, ``stage{i}.block{j}.<path>`` and ``head.fc.*``; stages
count from 1, blocks from 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, SelectorError, ShapeError
from .mixer import (
    DMixerParams,
    DwMixerParams,
    attention_split,
    dmixer_forward,
    dw_mixer_forward,
    kv_extent,
    make_dmixer,
    make_dw_mixer,
    make_rel_bias,
)
from .ops import (
    Conv2dParams,
    NormParams,
    adaptive_avg_pool,
    batch_norm_inference,
    conv2d,
    gelu,
    linear,
)
from .params import ParamFactory, ParamStore, make_conv, make_dwconv, make_norm
from .tensor import Tensor

DEFAULT_SCALES = (1, 3, 5, 7)
MIXER_MODES = ("dmixer", "dwconv_baseline")
SR_MODES = ("osr", "nsr")
STEM_KERNEL, STEM_STRIDE, STEM_PAD = 7, 4, 3
DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD = 3, 2, 1
DPE_KERNEL = 7


# ------------------------------------------------------------------ configs


@dataclass
class StageConfig:
    channels: int
    blocks: int
    sr_stride: int
    heads: int
    kernel_size: int
    groups: int
    expansion: int
    resolution: tuple[int, int]


@dataclass
class ModelConfig:
    stages: list[StageConfig]
    stem_channels: int
    num_classes: int = 1000
    attention_ratio: float = 0.5
    mixer_mode: str = "dmixer"
    image_size: int = 224
    in_channels: int = 3
    ffn_scales: tuple[int, ...] = DEFAULT_SCALES
    sr_mode: str = "osr"
    use_ste: bool = True
    use_dpe: bool = True
    name: str = "custom"

    def validate(self) -> "ModelConfig":
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}", "stages")
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image size {self.image_size} must be a positive multiple of 32", "image_size")
        if self.mixer_mode not in MIXER_MODES:
            raise ConfigError(f"must be one of {MIXER_MODES}", "mixer_mode")
        if self.sr_mode not in SR_MODES:
            raise ConfigError(f"must be one of {SR_MODES}", "sr_mode")
        if not 0.0 < self.attention_ratio < 1.0:
            raise ConfigError("must lie strictly between 0 and 1", "attention_ratio")
        for name in ("num_classes", "in_channels", "stem_channels"):
            if getattr(self, name) < 1:
                raise ConfigError("must be positive", name)
        if self.stem_channels != self.stages[0].channels:
            raise ConfigError("must equal stages[0].channels", "stem_channels")
        if not self.ffn_scales or any(k < 1 or k % 2 == 0 for k in self.ffn_scales):
            raise ConfigError(f"scales must be odd positive kernels, got {list(self.ffn_scales)}", "ffn_scales")
        for i, (st, res) in enumerate(zip(self.stages, stage_resolutions(self.image_size))):
            path = f"stages[{i}]"
            for name in ("channels", "blocks", "sr_stride", "heads", "kernel_size", "groups", "expansion"):
                if getattr(st, name) < 1:
                    raise ConfigError("must be positive", f"{path}.{name}")
            if tuple(st.resolution) != (res, res):
                raise ConfigError(f"resolution {list(st.resolution)} != {[res, res]} for image {self.image_size}",
                                  f"{path}.resolution")
            if st.kernel_size % 2 == 0:
                raise ConfigError("IDConv kernel must be odd", f"{path}.kernel_size")
            if self.mixer_mode == "dmixer":
                try:
                    ca, ci = attention_split(st.channels, self.attention_ratio)
                except ConfigError as e:
                    raise ConfigError(f"stage {i + 1}: {e}", f"{path}.channels") from None
                if ca % st.heads:
                    raise ConfigError(f"stage {i + 1}: {ca} attention channels not divisible by {st.heads} heads",
                                      f"{path}.heads")
                if ci < 4:
                    raise ConfigError(f"stage {i + 1}: IDConv branch needs >= 4 channels, got {ci}",
                                      f"{path}.channels")
                try:
                    kv_extent(res, st.sr_stride, self.sr_mode)
                except ConfigError as e:
                    raise ConfigError(str(e), f"{path}.sr_stride") from None
            hidden = st.channels * st.expansion
            if hidden % len(self.ffn_scales):
                raise ConfigError(f"stage {i + 1}: hidden width {hidden} not divisible by "
                                  f"{len(self.ffn_scales)} scales", f"{path}.expansion")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ffn_scales"] = list(self.ffn_scales)
        for st in d["stages"]:
            st["resolution"] = list(st["resolution"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown field", key)
        for key in ("stages", "stem_channels"):
            if key not in d:
                raise ConfigError("missing required field", key)
        if not isinstance(d["stages"], list):
            raise ConfigError("must be a list", "stages")
        stages = [_stage_from_dict(s, f"stages[{i}]") for i, s in enumerate(d["stages"])]
        kwargs = {k: v for k, v in d.items() if k != "stages"}
        for key, typ in (("stem_channels", int), ("num_classes", int), ("image_size", int), ("in_channels", int),
                         ("attention_ratio", (int, float)), ("mixer_mode", str), ("sr_mode", str),
                         ("use_ste", bool), ("use_dpe", bool), ("name", str)):
            if key in kwargs and (not isinstance(kwargs[key], typ) or (typ is int and isinstance(kwargs[key], bool))):
                raise ConfigError(f"wrong type {type(kwargs[key]).__name__}", key)
        if "ffn_scales" in kwargs:
            kwargs["ffn_scales"] = tuple(kwargs["ffn_scales"])
        return cls(stages=stages, **kwargs).validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e}") from None
        return cls.from_dict(d)


def _stage_from_dict(d, path: str) -> StageConfig:
    if not isinstance(d, Mapping):
        raise ConfigError("must be an object", path)
    names = [f.name for f in fields(StageConfig)]
    for key in d:
        if key not in names:
            raise ConfigError("unknown field", f"{path}.{key}")
    for key in names:
        if key not in d:
            raise ConfigError("missing required field", f"{path}.{key}")
        if key == "resolution":
            v = d[key]
            if not (isinstance(v, list) and len(v) == 2 and all(isinstance(e, int) for e in v)):
                raise ConfigError("must be [height, width]", f"{path}.resolution")
        elif not isinstance(d[key], int) or isinstance(d[key], bool):
            raise ConfigError(f"must be an integer, got {d[key]!r}", f"{path}.{key}")
    return StageConfig(**{**d, "resolution": tuple(d["resolution"])})


def stage_resolutions(image_size: int) -> list[int]:
    r = (image_size + 2 * STEM_PAD - STEM_KERNEL) // STEM_STRIDE + 1
    out = [r]
    for _ in range(3):
        r = (r + 2 * DOWN_PAD - DOWN_KERNEL) // DOWN_STRIDE + 1
        out.append(r)
    return out


def make_config(channels: Sequence[int], blocks: Sequence[int], heads: Sequence[int], groups: Sequence[int],
                expansion: Sequence[int], image_size: int = 224, sr_strides: Sequence[int] = (8, 4, 2, 1),
                kernel_size: int = 7, name: str = "custom", **kwargs) -> ModelConfig:
    res = stage_resolutions(image_size)
    stages = [StageConfig(channels[i], blocks[i], sr_strides[i], heads[i], kernel_size, groups[i], expansion[i],
                          (res[i], res[i])) for i in range(4)]
    return ModelConfig(stages, channels[0], image_size=image_size, name=name, **kwargs).validate()


VARIANTS = {
    "t": dict(channels=[48, 96, 224, 448], blocks=[3, 3, 9, 3], heads=[1, 2, 4, 8], groups=[2, 2, 2, 2],
              expansion=[4, 4, 4, 4]),
    "s": dict(channels=[64, 128, 320, 512], blocks=[4, 4, 12, 4], heads=[1, 2, 5, 8], groups=[2, 2, 3, 4],
              expansion=[6, 6, 4, 4]),
    "b": dict(channels=[76, 152, 336, 672], blocks=[4, 4, 21, 4], heads=[2, 4, 8, 16], groups=[2, 2, 4, 4],
              expansion=[8, 8, 4, 4]),
}
_ALIASES = {"tiny": "t", "small": "s", "base": "b"}


def variant_config(name: str, image_size: int = 224, **kwargs) -> ModelConfig:
    key = name.lower().removeprefix("transxnet-").removeprefix("transxnet_")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from t, s, b")
    return make_config(**VARIANTS[key], image_size=image_size, name=f"transxnet-{key}", **kwargs)


def micro_config(image_size: int = 32, **kwargs) -> ModelConfig:
    """Tiny four-stage config (one block per stage) for fast tests."""
    return make_config(channels=[8, 16, 32, 64], blocks=[1, 1, 1, 1], heads=[1, 2, 4, 8], groups=[2, 2, 2, 2],
                       expansion=[4, 4, 4, 4], image_size=image_size, name="micro", **kwargs)


# ------------------------------------------------------------------- MS-FFN


@dataclass
class MsFfnParams:
    channels: int
    expansion: int
    hidden: int
    fc1: Conv2dParams
    scales: tuple[int, ...]
    dw_convs: list[Conv2dParams]
    fc2: Conv2dParams


def make_msffn(f: ParamFactory, name: str, channels: int, expansion: int,
               scales: Sequence[int] = DEFAULT_SCALES) -> MsFfnParams:
    hidden = channels * expansion
    scales = tuple(scales)
    if hidden % len(scales):
        raise ConfigError(f"hidden width {hidden} not divisible by {len(scales)} scales")
    if any(k % 2 == 0 for k in scales):
        raise ConfigError(f"MS-FFN kernels must be odd, got {list(scales)}")
    part = hidden // len(scales)
    return MsFfnParams(
        channels, expansion, hidden,
        fc1=make_conv(f, f"{name}.fc1", channels, hidden, 1),
        scales=scales,
        dw_convs=[make_dwconv(f, f"{name}.dw{k}", part, k) for k in scales],
        fc2=make_conv(f, f"{name}.fc2", hidden, channels, 1),
    )


def msffn_forward(x: Tensor, p: MsFfnParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"MS-FFN over {p.channels} channels got input {list(x.shape)}")
    h = gelu(conv2d(x, p.fc1))
    parts = T.split_channels(h, len(p.scales))
    h = T.concat_channels([conv2d(part, conv) for part, conv in zip(parts, p.dw_convs)])
    return conv2d(gelu(h), p.fc2)


# ------------------------------------------------------------ block & stage


def dpe_forward(x: Tensor, conv: Conv2dParams) -> Tensor:
    """Residual 7x7 depthwise position encoding."""
    return T.add(conv2d(x, conv), x)


@dataclass
class BlockParams:
    channels: int
    dpe: Conv2dParams | None
    norm1: NormParams
    mixer: DMixerParams | DwMixerParams
    norm2: NormParams
    ffn: MsFfnParams


def block_forward(x: Tensor, p: BlockParams, taps: dict | None = None) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"block over {p.channels} channels got input {list(x.shape)}")
    if p.dpe is not None:
        x = dpe_forward(x, p.dpe)
    normed = batch_norm_inference(x, p.norm1)
    if isinstance(p.mixer, DMixerParams):
        mixed = dmixer_forward(normed, p.mixer, taps)
    else:
        mixed = dw_mixer_forward(normed, p.mixer, taps)
    y = T.add(mixed, x)
    return T.add(msffn_forward(batch_norm_inference(y, p.norm2), p.ffn), y)


@dataclass
class PatchEmbedParams:
    conv: Conv2dParams
    norm: NormParams


def patch_embed_forward(x: Tensor, p: PatchEmbedParams) -> Tensor:
    return batch_norm_inference(conv2d(x, p.conv), p.norm)


@dataclass
class StageParams:
    index: int
    config: StageConfig
    embed: PatchEmbedParams
    rel_bias: Tensor | None
    blocks: list[BlockParams] = field(default_factory=list)


# ------------------------------------------------------------------- model


class Model:
    """Built network: immutable parameters plus the forward pass."""

    def __init__(self, config: ModelConfig, params: ParamStore, stages: list[StageParams],
                 head_weight: Tensor, head_bias: Tensor):
        self.config = config
        self.params = params
        self.stages = stages
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def dtype(self) -> np.dtype:
        return self.head_weight.dtype

    def tap_names(self) -> list[str]:
        names = []
        for st in self.stages:
            i = st.index
            names.append("stem" if i == 1 else f"stage{i}.embed")
            for j, blk in enumerate(st.blocks):
                if isinstance(blk.mixer, DMixerParams):
                    names += [f"stage{i}.block{j}.osra", f"stage{i}.block{j}.idconv"]
                names += [f"stage{i}.block{j}.dmixer", f"stage{i}.block{j}"]
            names.append(f"stage{i}")
        return names

    def check_input(self, x: Tensor) -> None:
        cfg = self.config
        expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ConfigError(f"input {list(x.shape)} does not match [N, {', '.join(map(str, expect))}]", "image_size")

    def forward_features(self, x: Tensor, stop_at: str | None = None) -> dict[str, Tensor]:
        """Run the stages, recording every tap. Stops once ``stop_at`` has been produced."""
        self.check_input(x)
        if stop_at is not None and stop_at not in self.tap_names():
            raise SelectorError(stop_at, self.tap_names())
        out: dict[str, Tensor] = {}
        for st in self.stages:
            i = st.index
            x = patch_embed_forward(x, st.embed)
            out["stem" if i == 1 else f"stage{i}.embed"] = x
            if stop_at in out:
                return out
            for j, blk in enumerate(st.blocks):
                taps: dict[str, Tensor] = {}
                x = block_forward(x, blk, taps)
                for k, v in taps.items():
                    out[f"stage{i}.block{j}.{k}"] = v
                out[f"stage{i}.block{j}"] = x
                if stop_at in out:
                    return out
            out[f"stage{i}"] = x
            if stop_at in out:
                return out
        return out

    def head(self, feat: Tensor) -> Tensor:
        n, c = feat.shape[:2]
        pooled = T.reshape(adaptive_avg_pool(feat, 1, 1), (n, 1, c))
        logits = linear(pooled, self.head_weight, self.head_bias)
        return T.reshape(logits, (n, self.config.num_classes))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.forward_features(x)["stage4"])

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0, dtype=None, weights: Mapping[str, np.ndarray] | None = None,
                requires_grad: bool = False, mode: str | None = None) -> Model:
    """Assemble the network: stem -> [blocks -> downsample]x4 -> pool -> FC."""
    cfg.validate()
    f = ParamFactory(seed=seed, dtype=dtype, weights=weights, requires_grad=requires_grad, mode=mode)
    stages = []
    cin = cfg.in_channels
    for idx, sc in enumerate(cfg.stages):
        i = idx + 1
        if i == 1:
            name, k, s, pad = "stem", STEM_KERNEL, STEM_STRIDE, STEM_PAD
        else:
            name, k, s, pad = f"stage{i}.embed", DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD
        embed = PatchEmbedParams(make_conv(f, f"{name}.conv", cin, sc.channels, k, stride=s, padding=pad, bias=False),
                                 make_norm(f, f"{name}.norm", sc.channels))
        h, w = sc.resolution
        rel_bias = None
        if cfg.mixer_mode == "dmixer":
            ca, _ = attention_split(sc.channels, cfg.attention_ratio)
            rel_bias = make_rel_bias(f, f"stage{i}.rel_bias", sc.heads, h, w, sc.sr_stride, cfg.sr_mode)
        stage = StageParams(i, sc, embed, rel_bias)
        for j in range(sc.blocks):
            stage.blocks.append(_make_block(f, f"stage{i}.block{j}", cfg, sc, rel_bias))
        stages.append(stage)
        cin = sc.channels
    head_w = f.param("head.fc.weight", (cfg.num_classes, cin))
    head_b = f.param("head.fc.bias", (cfg.num_classes,), init="zeros")
    f.check_no_extra()
    return Model(cfg, f.store, stages, head_w, head_b)


def _make_block(f: ParamFactory, name: str, cfg: ModelConfig, sc: StageConfig, rel_bias) -> BlockParams:
    c = sc.channels
    dpe = make_dwconv(f, f"{name}.dpe", c, DPE_KERNEL) if cfg.use_dpe else None
    norm1 = make_norm(f, f"{name}.norm1", c)
    if cfg.mixer_mode == "dmixer":
        mixer = make_dmixer(f, f"{name}.mixer", c, sc.heads, sc.sr_stride, sc.groups, rel_bias,
                            attention_ratio=cfg.attention_ratio, kernel_size=sc.kernel_size,
                            sr_mode=cfg.sr_mode, use_ste=cfg.use_ste)
    else:
        mixer = make_dw_mixer(f, f"{name}.mixer", c, sc.kernel_size)
    norm2 = make_norm(f, f"{name}.norm2", c)
    ffn = make_msffn(f, f"{name}.ffn", c, sc.expansion, cfg.ffn_scales)
    return BlockParams(c, dpe, norm1, mixer, norm2, ffn)


def forward_classify(model: Model, images: Tensor) -> Tensor:
    """Logits ``[N, num_classes]`` for a batch of images at the configured resolution."""
    return model.forward(images)


def with_changes(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes).validate()


def at_resolution(cfg: ModelConfig, image_size: int) -> ModelConfig:
    """Same architecture bound to another square input size."""
    if image_size < 32 or image_size % 32:
        raise ConfigError(f"image size {image_size} must be a positive multiple of 32", "image_size")
    res = stage_resolutions(image_size)
    stages = [replace(st, resolution=(r, r)) for st, r in zip(cfg.stages, res)]
    return replace(cfg, stages=stages, image_size=image_size).validate()
