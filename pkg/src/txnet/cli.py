"""``txnet`` command line: build, summary, forward, erf, check.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import weights as W
from .analysis import ERF_THRESHOLD, count_flops, erf_map, seeded_images
from .errors import ConfigError, ContractError, SelectorError, TxNetError
from .network import ModelConfig, at_resolution, build_model, micro_config, variant_config
from .params import WeightMismatchError
from .tensor import Tensor

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
BUILTIN_CONFIGS = ("t", "s", "b", "micro")
_PRECISION = {"f32": np.float32, "f64": np.float64}


class UsageError(TxNetError):
    pass


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits: {text}")
    return v


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return v


def load_config(spec: str, resolution: int | None = None) -> ModelConfig:
    """Read a JSON config file, or one of the built-in names t, s, b, micro."""
    path = Path(spec)
    if path.is_file():
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read {spec}: {e}") from None
        cfg = ModelConfig.from_json(text)
    elif spec.lower() == "micro":
        cfg = micro_config()
    elif spec.lower() in BUILTIN_CONFIGS:
        cfg = variant_config(spec)
    else:
        raise ConfigError(f"no such config file {spec!r} (built-ins: {', '.join(BUILTIN_CONFIGS)})")
    if resolution is not None and resolution != cfg.image_size:
        cfg = at_resolution(cfg, resolution)
    return cfg


def _model(args, requires_grad: bool = False):
    cfg = load_config(args.config, args.resolution)
    dtype = _PRECISION[args.precision]
    weights = W.load(args.weights) if args.weights else None
    return build_model(cfg, seed=args.seed, dtype=dtype, weights=weights, requires_grad=requires_grad)


def cmd_build(args) -> int:
    if not args.out:
        raise UsageError("build needs --out PATH for the weight file")
    model = _model(args)
    W.save(args.out, model.params.arrays())
    print(f"wrote {len(model.params)} tensors ({model.params.num_params():,} learnable values) to {args.out}")
    return EXIT_OK


def cmd_summary(args) -> int:
    cfg = load_config(args.config, args.resolution)
    report = count_flops(cfg)
    print(report.grouped(2).to_text())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_forward(args) -> int:
    model = _model(args)
    cfg = model.config
    if args.input:
        tensors = W.load(args.input)
        if len(tensors) != 1:
            raise UsageError(f"input file must hold exactly one tensor, found {len(tensors)}")
        images = next(iter(tensors.values()))
    else:
        images = seeded_images(args.images, cfg.image_size, seed=args.seed, channels=cfg.in_channels)
    logits = model.forward(Tensor(images, dtype=model.dtype)).data
    k = min(args.top_k, logits.shape[1])
    for row, values in enumerate(logits):
        top = np.argsort(-values, kind="stable")[:k]
        print(f"image {row}: " + "  ".join(f"{int(i)}:{values[i]:.6g}" for i in top))
    if args.out:
        W.save(args.out, {"logits": logits})
    return EXIT_OK


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """8-bit binary PGM of a [0, 1] map."""
    h, w = values.shape
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def sidecar_path(out: str | Path) -> Path:
    return Path(out).with_suffix(".json")


def cmd_erf(args) -> int:
    if not args.tap:
        raise UsageError("erf needs --tap NAME")
    if not args.out:
        raise UsageError("erf needs --out PATH for the PGM image")
    model = _model(args)
    cfg = model.config
    images = seeded_images(args.images, cfg.image_size, seed=args.seed, channels=cfg.in_channels)
    erf = erf_map(model, images, args.tap)
    write_pgm(args.out, erf.values)
    meta = {
        "tap": erf.tap,
        "num_images": erf.num_images,
        "center": list(erf.center),
        "normalization": erf.normalization,
        "threshold": ERF_THRESHOLD,
        "support_fraction": erf.support_fraction(),
        "resolution": cfg.image_size,
        "seed": args.seed,
        "model": cfg.name,
    }
    sidecar_path(args.out).write_text(json.dumps(meta, indent=2) + "\n")
    print(f"tap {erf.tap}: support fraction {meta['support_fraction']:.4f} over {erf.num_images} images")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_all

    if args.precision != "f64":
        raise UsageError("check runs in double precision; drop --precision or pass f64")
    grads, oracles = run_all(seed=args.seed)
    for r in [*grads, *oracles]:
        print(r.summary())
    worst = max(r.max_rel_error for r in grads)
    dev = max(r.max_abs_diff for r in oracles)
    print(f"worst relative gradient error {worst:.3e}; worst IDConv oracle deviation {dev:.3e}")
    failed = [r for r in [*grads, *oracles] if not r.passed]
    for r in failed:
        print(f"FAILED {r.summary()}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txnet", description="TransXNet toolkit: build, inspect and analyse models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, default_precision="f32"):
        p.add_argument("--config", required=config_required,
                       help="JSON config file, or a built-in name: t, s, b, micro")
        p.add_argument("--seed", type=_u64, default=0, help="initialization / input seed (default 0)")
        p.add_argument("--resolution", type=_positive, help="override the configured input size")
        p.add_argument("--precision", choices=sorted(_PRECISION), default=default_precision)
        return p

    p = common(sub.add_parser("build", help="initialize parameters and write a weight file"))
    p.add_argument("--out", help="weight file to write")
    p.set_defaults(func=cmd_build)

    p = common(sub.add_parser("summary", help="print parameter and FLOP counts"))
    p.add_argument("--out", help="also write the full report as JSON")
    p.set_defaults(func=cmd_summary)

    p = common(sub.add_parser("forward", help="classify seeded random images"))
    p.add_argument("--weights", help="weight file (default: seeded initialization)")
    p.add_argument("--images", type=_positive, default=1, help="batch size of generated images")
    p.add_argument("--input", help="weight-format file holding one [N,3,H,W] tensor to use as input")
    p.add_argument("--top-k", type=_positive, default=5)
    p.add_argument("--out", help="write logits to a weight-format file")
    p.set_defaults(func=cmd_forward)

    p = common(sub.add_parser("erf", help="effective receptive field heatmap"))
    p.add_argument("--weights", help="weight file (default: seeded initialization)")
    p.add_argument("--tap", help="feature map to probe, e.g. stage4 or stage1.block0.osra")
    p.add_argument("--images", type=_positive, default=32)
    p.add_argument("--out", help="PGM output path; a .json sidecar is written next to it")
    p.set_defaults(func=cmd_erf)

    p = common(sub.add_parser("check", help="gradient and IDConv oracle suites"), config_required=False,
               default_precision="f64")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("weights", "tap", "out", "input"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    try:
        return args.func(args)
    except SelectorError as e:
        print(f"txnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except WeightMismatchError as e:
        print(f"txnet {args.command}: weight mismatch at tensor {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ContractError, UsageError, W.WeightFormatError) as e:
        print(f"txnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"txnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
