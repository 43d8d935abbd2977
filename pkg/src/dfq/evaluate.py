"""Accuracy and complexity evaluation: IoU, model size, bit-operations, and
the comparison harness for calibration sources (synthesized vs Gaussian noise
vs held-out real images) against the full-precision baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from dfq.model import ModelConfig, SegModel
from dfq.model import predict as model_predict
from dfq.quant import WEIGHT_SITES_2D, QuantizedModel, calibration_views, quantize_model
from dfq.tensor import ShapeError

# serialized per-channel overhead: one float64 scale + one int32 zero-point
CHANNEL_OVERHEAD_BYTES = 8 + 4


@dataclass
class EvalReport:
    per_image_iou: list
    mean_iou: float
    size_bytes: int
    bops: int
    fingerprint: dict = field(default_factory=dict)


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred_mask & gt_mask) / union


def _predict(model_or_quantized, image):
    if isinstance(model_or_quantized, QuantizedModel):
        return model_or_quantized.predict(image)
    return model_predict(model_or_quantized, image)


def _config_of(model_or_quantized) -> ModelConfig:
    if isinstance(model_or_quantized, QuantizedModel):
        return model_or_quantized.model.config
    return model_or_quantized.config


def _bits_of(model_or_quantized):
    if isinstance(model_or_quantized, QuantizedModel):
        return model_or_quantized.w_bits, model_or_quantized.a_bits
    return 32, 32


def image_iou(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean IoU over the non-background classes present in the label; falls
    back to foreground-union IoU when the label holds no foreground."""
    classes = [c for c in np.unique(label) if c != 0]
    if not classes:
        return iou(pred != 0, label != 0)
    return float(np.mean([iou(pred == c, label == c) for c in classes]))


def evaluate(model_or_quantized, dataset, fingerprint: dict | None = None) -> EvalReport:
    """Per-image class-averaged IoU over a (image, label) dataset."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = _config_of(model_or_quantized)
    per_image = [image_iou(_predict(model_or_quantized, img), lab) for img, lab in dataset]
    w_bits, a_bits = _bits_of(model_or_quantized)
    return EvalReport(
        per_image_iou=per_image,
        mean_iou=float(np.mean(per_image)),
        size_bytes=model_size_bytes(cfg, w_bits),
        bops=bops(cfg, w_bits, a_bits),
        fingerprint=dict(fingerprint or {}, w_bits=w_bits, a_bits=a_bits),
    )


def _weight_matrix_channels(config: ModelConfig) -> int:
    """Total output channels across quantized weight matrices (per-channel
    scale/zero-point records)."""
    per_block = {
        "qkv.w": 3 * config.embed_dim,
        "proj.w": config.embed_dim,
        "mlp.w1": config.mlp_ratio * config.embed_dim,
        "mlp.w2": config.embed_dim,
    }
    total = config.embed_dim  # embed.w
    total += config.num_layers * sum(per_block.values())
    total += config.num_classes * config.patch_size**2  # head.w
    assert set(per_block) | {"embed.w", "head.w"} == set(WEIGHT_SITES_2D)
    return total


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in config.param_shapes())


def model_size_bytes(model_or_config, w_bits: int) -> int:
    """Idealized deployed size: every parameter at w_bits, plus per-channel
    quantizer records for the quantized weight matrices (none at 32 bits)."""
    cfg = model_or_config if isinstance(model_or_config, ModelConfig) else model_or_config.config
    if w_bits not in (4, 8, 32):
        raise ValueError("w_bits must be one of 4, 8, 32")
    size = parameter_count(cfg) * w_bits // 8
    if w_bits < 32:
        size += _weight_matrix_channels(cfg) * CHANNEL_OVERHEAD_BYTES
    return size


def mac_count(config: ModelConfig) -> int:
    """Closed-form multiply-accumulate count for one forward pass.

    Matmul sites only: patch embedding, per block qkv / attention score /
    attention-value / output projections and the two-layer MLP, and the
    per-patch head.  Elementwise ops, normalization, and softmax excluded.
    """
    n = config.num_patches
    d = config.embed_dim
    macs = n * (config.patch_size**2 * config.channels) * d  # embed
    per_block = (
        n * d * 3 * d  # qkv
        + n * n * d  # q k^T (all heads)
        + n * n * d  # scores @ v
        + n * d * d  # output projection
        + 2 * n * d * (config.mlp_ratio * d)  # mlp
    )
    macs += config.num_layers * per_block
    macs += n * d * (config.num_classes * config.patch_size**2)  # head
    return macs


def bops(model_or_config, w_bits: int, a_bits: int) -> int:
    """Bit-operations: MACs weighted by weight-bits times activation-bits."""
    if w_bits < 1 or a_bits < 1:
        raise ValueError("bit widths must be positive")
    cfg = model_or_config if isinstance(model_or_config, ModelConfig) else model_or_config.config
    return mac_count(cfg) * w_bits * a_bits


COMPARE_FIELDS = ("method", "source", "w_bits", "a_bits", "size_bytes", "bops", "dataset", "mean_iou", "seed")


def compare(model: SegModel, dataset, calib_sources: dict, w_bits: int = 4, a_bits: int = 4,
            dataset_name: str = "generated", seed: int = 0, num_views: int = 16) -> list[dict]:
    """Full-precision baseline plus one post-training-quantization row per
    calibration source; rows match the CSV report schema.

    Every source's calibration batch is built the same way: num_views
    geometric views per provided image, so the sources differ only in where
    the images come from."""
    rows = []
    fp = evaluate(model, dataset)
    rows.append(
        dict(
            method="fp", source="none", w_bits=32, a_bits=32, size_bytes=fp.size_bytes,
            bops=fp.bops, dataset=dataset_name, mean_iou=fp.mean_iou, seed=seed,
        )
    )
    for source, images in calib_sources.items():
        batch = [v for img in images for v in calibration_views(img, num_views)]
        qm = quantize_model(model, batch, w_bits=w_bits, a_bits=a_bits)
        rep = evaluate(qm, dataset)
        rows.append(
            dict(
                method="ptq", source=source, w_bits=w_bits, a_bits=a_bits,
                size_bytes=rep.size_bytes, bops=rep.bops, dataset=dataset_name,
                mean_iou=rep.mean_iou, seed=seed,
            )
        )
    return rows


def write_comparison_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COMPARE_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["mean_iou"] = repr(float(row["mean_iou"]))
            writer.writerow(out)
