"""Post-training quantization of the trained model, with the LayerNorm scale
reparameterization that makes per-layer activation quantization viable.

Post-LayerNorm activations have severe inter-channel range variation, so they
are calibrated per channel; the per-channel scales are then folded into the
LayerNorm affine parameters and the following weight matrix, leaving a single
scalar scale per tensor — the network function is unchanged (exactly, in
float), but the quantizer now sees channels on a common footing.

Run demos/01 and demos/02 first to create toy_model.dfqm and calib.raw.
"""

import numpy as np

from dfq.cli import read_raw_image
from dfq.evaluate import bops, evaluate, model_size_bytes
from dfq.model import generate_dataset, load_model
from dfq.quant import quantize_model, save_quantized

model = load_model("toy_model.dfqm")
calib = read_raw_image("calib.raw")

qm = quantize_model(model, [calib], w_bits=4, a_bits=4)
print("W4/A4, weights per-channel, activations per-layer (after reparameterization)")

# the reparameterized model still computes the same function in float
rng = np.random.default_rng(0)
probe = rng.standard_normal((model.config.image_size,) * 2 + (model.config.channels,))
from dfq.model import forward
from dfq.tensor import Tensor

S_orig, _ = forward(model, Tensor(probe))
S_repar, _ = forward(qm.model, Tensor(probe))
print(f"max |reparameterized - original| on a probe image: {np.abs(S_repar.data - S_orig.data).max():.2e}")

cfg = model.config
print(f"size: {model_size_bytes(cfg, 32)} B at FP32 -> {model_size_bytes(cfg, 4)} B at 4-bit "
      f"({model_size_bytes(cfg, 32) / model_size_bytes(cfg, 4):.2f}x)")
print(f"bops: {bops(cfg, 32, 32):,} -> {bops(cfg, 4, 4):,} (64x)")

val = generate_dataset(7, 16, cfg)
print(f"FP mean IoU   {evaluate(model, val).mean_iou:.3f}")
print(f"W4/A4 mean IoU {evaluate(qm, val).mean_iou:.3f}")

save_quantized(qm, "toy_model_w4a4.dfqm")
print("saved to toy_model_w4a4.dfqm")
