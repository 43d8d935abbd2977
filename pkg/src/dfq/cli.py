"""Command-line pipeline: train the toy segmenter, synthesize calibration
images, quantize, evaluate, and run the calibration-source comparison.

Every command resolves its configuration from defaults, an optional flat
``key=value`` config file, explicit flags (which win), and the ``DFQ_SEED``
environment variable (which overrides any seed); the fully-resolved config is
echoed to a ``.cfg`` file next to the outputs so runs can be reproduced
exactly.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
from pathlib import Path

import numpy as np

from dfq.evaluate import (
    COMPARE_FIELDS,
    compare,
    evaluate,
    model_size_bytes,
    write_comparison_csv,
)
from dfq.model import (
    FormatError,
    ModelConfig,
    SegModel,
    generate_dataset,
    load_model,
    model_file_size,
    save_model,
    train,
)
from dfq.quant import calibration_views, load_quantized, quantize_model, save_quantized
from dfq.synth import SynthesisConfig, synthesize, write_trace_csv

RAW_MAGIC = b"DFQI"

MODEL_KEYS = ("image_size", "patch_size", "embed_dim", "num_layers", "num_heads", "mlp_ratio", "num_classes", "channels")


# ---------------------------------------------------------------------------
# image files


def write_pnm(path, arr: np.ndarray) -> None:
    """8-bit min-max scaled view of a float image: P5 for one channel, P6 for
    three.  For viewing only — the quantization path reads the raw export."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    if c == 1:
        header, body = b"P5", pixels[..., 0]
    elif c == 3:
        header, body = b"P6", pixels
    else:
        raise ValueError("image must have 1 or 3 channels")
    with open(path, "wb") as f:
        f.write(header + b"\n%d %d\n255\n" % (w, h))
        f.write(body.tobytes())


def write_gray_pgm(path, values: np.ndarray) -> None:
    """P5 file from an integer grid already in [0, 255]."""
    v = np.asarray(values)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (v.shape[1], v.shape[0]))
        f.write(v.astype(np.uint8).tobytes())


def write_raw_image(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def read_raw_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != RAW_MAGIC:
            raise FormatError(f"{path}: not a raw image file")
        h, w, c = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != h * w * c:
        raise FormatError(f"{path}: truncated raw image")
    return data.reshape(h, w, c)


def load_calibration_image(path) -> np.ndarray:
    """The 8-bit view formats are lossy, so calibration always reads the raw
    float export written next to them."""
    p = Path(path)
    if p.suffix in (".pgm", ".ppm"):
        raw = p.with_suffix(".raw")
        if not raw.exists():
            raise FileNotFoundError(f"missing raw image {raw} (8-bit {p.name} is for viewing only)")
        p = raw
    if not p.exists():
        raise FileNotFoundError(f"missing calibration image {p}")
    return read_raw_image(p)


# ---------------------------------------------------------------------------
# config resolution


def parse_config_file(path) -> dict:
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key] = value
    return out


def _coerce(value, default):
    if isinstance(value, str):
        if default is None or isinstance(default, float):
            return None if value == "none" else float(value)
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
    return value


def resolve_config(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
        for key, value in file_values.items():
            if key in cfg:
                cfg[key] = _coerce(value, defaults[key])
    for key in cfg:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    env_seed = os.environ.get("DFQ_SEED")
    if env_seed is not None and "seed" in cfg:
        cfg["seed"] = int(env_seed)
    return cfg


def write_config_echo(out_path, cfg: dict) -> None:
    echo = Path(out_path).with_suffix(".cfg")
    with open(echo, "w") as f:
        for key in sorted(cfg):
            value = cfg[key]
            f.write(f"{key}={'none' if value is None else value}\n")


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})


def load_any_model(path):
    """Model file or quantized container, distinguished by size."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing model file {p}")
    header = load_model if _is_plain_model(p) else load_quantized
    return header(p)


def _is_plain_model(path: Path) -> bool:
    with open(path, "rb") as f:
        probe = f.read(40)
    if len(probe) < 40:
        raise FormatError(f"{path}: truncated header")
    # parse just the config block to compute the plain-model size; anything
    # longer carries the quantization section
    cfg = ModelConfig(*struct.unpack("<8I", probe[8:40]))
    return path.stat().st_size == model_file_size(cfg)


# ---------------------------------------------------------------------------
# commands

TRAIN_DEFAULTS = dict(
    seed=42, train_images=96, val_images=16, epochs=24, lr=3e-3, weight_decay=3e-4,
    image_size=64, patch_size=8, embed_dim=64, num_layers=4, num_heads=4,
    mlp_ratio=2, num_classes=5, channels=1,
)


def cmd_train(args) -> int:
    cfg = resolve_config(args, TRAIN_DEFAULTS)
    mcfg = model_config_from(cfg)
    data = generate_dataset(cfg["seed"], cfg["train_images"] + cfg["val_images"], mcfg)
    model = SegModel.init(mcfg, seed=cfg["seed"])
    trained = train(
        model, data[: cfg["train_images"]], epochs=cfg["epochs"], lr=cfg["lr"],
        seed=cfg["seed"], weight_decay=cfg["weight_decay"],
    )
    report = evaluate(trained, data[cfg["train_images"] :])
    save_model(trained, args.out)
    write_config_echo(args.out, cfg)
    print(f"trained model written to {args.out}; validation mean IoU {report.mean_iou:.4f}")
    return 0


SYNTH_DEFAULTS = dict(
    seed=0, alpha=0.5, beta=0.05, eps1=0.8, eps2=None, iters=1500, evolve_iters=500,
    lr=0.1, lr_final=0.01, kde_eval_points=512,
)


def cmd_synth(args) -> int:
    cfg = resolve_config(args, SYNTH_DEFAULTS)
    model = load_model(args.model)
    scfg = SynthesisConfig(
        alpha=cfg["alpha"], beta=cfg["beta"], eps1=cfg["eps1"], eps2=cfg["eps2"],
        total_iters=cfg["iters"], evolve_iters=min(cfg["evolve_iters"], cfg["iters"]),
        lr=cfg["lr"], lr_final=cfg["lr_final"], seed=cfg["seed"],
        kde_eval_points=int(cfg["kde_eval_points"]),
    )
    result = synthesize(model, scfg)
    out = Path(args.out)
    write_pnm(out, result.image.data)
    write_raw_image(out.with_suffix(".raw"), result.image.data)
    # label overlay: gray level proportional to mask category
    grid = np.zeros(result.labels.occupancy.shape, dtype=np.int64)
    for mask in result.labels.masks:
        grid[mask.pixels] = mask.category
    write_gray_pgm(out.with_name(out.stem + ".labels.pgm"), grid * (255 // (model.config.num_classes - 1)))
    write_trace_csv(out.with_name(out.stem + ".trace.csv"), result.trace)
    write_config_echo(out, cfg)
    print(f"synthesized image written to {out} ({len(result.labels)} masks)")
    return 0


QUANT_DEFAULTS = dict(seed=0, w_bits=4, a_bits=4, calib_views=16)


def cmd_quantize(args) -> int:
    cfg = resolve_config(args, QUANT_DEFAULTS)
    if args.bits is not None:
        cfg["w_bits"] = cfg["a_bits"] = args.bits
    model = load_model(args.model)
    images = [
        view
        for p in args.calib
        for view in calibration_views(load_calibration_image(p), cfg["calib_views"])
    ]
    qm = quantize_model(model, images, w_bits=cfg["w_bits"], a_bits=cfg["a_bits"])
    save_quantized(qm, args.out)
    write_config_echo(args.out, cfg)
    print(f"W{cfg['w_bits']}/A{cfg['a_bits']}, weights per-channel, activations per-layer")
    print(f"quantized model written to {args.out} ({model_size_bytes(model.config, cfg['w_bits'])} bytes deployed)")
    return 0


EVAL_DEFAULTS = dict(seed=0, images=16)


def cmd_eval(args) -> int:
    cfg = resolve_config(args, EVAL_DEFAULTS)
    model = load_any_model(args.model)
    mcfg = model.config if isinstance(model, SegModel) else model.model.config
    data = generate_dataset(cfg["seed"], cfg["images"], mcfg)
    report = evaluate(model, data)
    w_bits = report.fingerprint["w_bits"]
    a_bits = report.fingerprint["a_bits"]
    row = dict(
        method="fp" if w_bits == 32 else "ptq", source="model-file",
        w_bits=w_bits, a_bits=a_bits, size_bytes=report.size_bytes, bops=report.bops,
        dataset="generated", mean_iou=report.mean_iou, seed=cfg["seed"],
    )
    write_comparison_csv(args.out, [row])
    write_config_echo(args.out, cfg)
    print(f"precision {w_bits}/{a_bits}, mean IoU {report.mean_iou:.4f}; report written to {args.out}")
    return 0


COMPARE_DEFAULTS = dict(seed=0, images=16, calib_images=1, calib_views=16)


def cmd_compare(args) -> int:
    cfg = resolve_config(args, COMPARE_DEFAULTS)
    model = load_model(args.model)
    mcfg = model.config
    data = generate_dataset(cfg["seed"], cfg["images"] + cfg["calib_images"], mcfg)
    eval_data = data[: cfg["images"]]
    sources = [s.strip() for s in args.sources.split(",") if s.strip()]
    calib: dict[str, list] = {}
    rng = np.random.default_rng(cfg["seed"])
    shape = (mcfg.image_size, mcfg.image_size, mcfg.channels)
    for source in sources:
        if source == "synthesized":
            if not args.synth:
                raise FileNotFoundError("missing synthesized image: pass --synth (from `dfq synth`)")
            calib[source] = [load_calibration_image(p) for p in args.synth]
        elif source == "gaussian":
            calib[source] = [rng.standard_normal(shape) for _ in range(cfg["calib_images"])]
        elif source == "real":
            calib[source] = [img for img, _ in data[cfg["images"] :]]
        else:
            raise ValueError(f"unknown calibration source {source!r}")
    bit_settings = [int(b) for b in args.bits.split(",")]
    rows = []
    for i, bits in enumerate(bit_settings):
        legs = compare(
            model, eval_data, calib, w_bits=bits, a_bits=bits, seed=cfg["seed"],
            num_views=cfg["calib_views"],
        )
        rows.extend(legs if i == 0 else legs[1:])  # one shared FP baseline
    write_comparison_csv(args.out, rows)
    write_config_echo(args.out, cfg)
    for row in rows:
        print(f"{row['method']:>4} {row['source']:>12} W{row['w_bits']}/A{row['a_bits']} mean IoU {row['mean_iou']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file; flags override it")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the toy segmenter on generated data")
    common(p)
    p.add_argument("--out", required=True, help="output model file")
    for key in ("train_images", "val_images", "epochs", *MODEL_KEYS):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a calibration image from a trained model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output image (.pgm/.ppm; raw float written alongside)")
    p.add_argument("--iters", type=int)
    p.add_argument("--evolve-iters", dest="evolve_iters", type=int)
    p.add_argument("--kde-eval-points", dest="kde_eval_points", type=int)
    for key in ("alpha", "beta", "eps1", "eps2", "lr", "lr_final"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", help="post-training quantization with calibration images")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True, nargs="+", help="calibration image path(s)")
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, help="sets both weight and activation bits")
    p.add_argument("--w-bits", dest="w_bits", type=int)
    p.add_argument("--a-bits", dest="a_bits", type=int)
    p.add_argument("--calib-views", dest="calib_views", type=int,
                   help="geometric views per calibration image (1 disables)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a model or quantized container")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output report CSV")
    p.add_argument("--images", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="calibration-source comparison table")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--sources", default="synthesized,gaussian,real")
    p.add_argument("--synth", nargs="+", help="synthesized calibration image path(s)")
    p.add_argument("--bits", default="4", help="comma-separated symmetric bit settings")
    p.add_argument("--images", type=int)
    p.add_argument("--calib-images", dest="calib_images", type=int)
    p.add_argument("--calib-views", dest="calib_views", type=int,
                   help="geometric views per calibration image (1 disables)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, FormatError) as exc:
        print(f"dfq {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
