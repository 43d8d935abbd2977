"""Data-free quantization for a toy transformer segmentation model.

Subpackages:

- :mod:`dfq.tensor` -- float64 autodiff core (define-by-run tape).
- :mod:`dfq.model` -- toy ViT-style segmenter, procedural dataset, trainer.
- :mod:`dfq.quant` -- uniform quantizer, calibration, scale reparameterization.
- :mod:`dfq.synth` -- calibration-image synthesis from model priors.
- :mod:`dfq.evaluate` -- IoU / size / BOPs accounting and comparison harness.
- :mod:`dfq.cli` -- the ``dfq`` command-line entry point.
"""

from dfq.evaluate import bops, compare, evaluate, iou, model_size_bytes
from dfq.model import ModelConfig, SegModel, generate_dataset, load_model, save_model, train
from dfq.quant import QuantizedModel, calibration_views, load_quantized, quantize_model, save_quantized
from dfq.synth import SynthesisConfig, synthesize
from dfq.tensor import Tape, Tensor

__all__ = [
    "ModelConfig",
    "QuantizedModel",
    "SegModel",
    "SynthesisConfig",
    "Tape",
    "Tensor",
    "bops",
    "calibration_views",
    "compare",
    "evaluate",
    "generate_dataset",
    "iou",
    "load_model",
    "load_quantized",
    "model_size_bytes",
    "quantize_model",
    "save_model",
    "save_quantized",
    "synthesize",
    "train",
]
