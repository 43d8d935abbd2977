"""Train the toy patch-transformer segmenter on procedurally generated scenes.

The generator draws a handful of ellipses per image, one intensity band per
class, over a dark background — enough structure for the model to learn
meaningful attention responses while staying desk-sized.  Everything is
seeded, so rerunning this script reproduces the model bit for bit.
"""

import numpy as np

from dfq.evaluate import evaluate
from dfq.model import ModelConfig, SegModel, generate_dataset, save_model, train

cfg = ModelConfig(image_size=32, patch_size=4, embed_dim=32, num_layers=2, num_heads=2)
print(f"config: {cfg.image_size}px, {cfg.num_patches} patches, {cfg.embed_dim}-d, {cfg.num_layers} blocks")

data = generate_dataset(seed=42, n_images=96, config=cfg)
train_split, val_split = data[:80], data[80:]
frac_bg = np.mean([(lab == 0).mean() for _, lab in data])
print(f"dataset: {len(data)} images, mean background fraction {frac_bg:.2f}")

model = train(SegModel.init(cfg, seed=42), train_split, epochs=8, seed=42)
report = evaluate(model, val_split)
print(f"validation mean IoU: {report.mean_iou:.3f} over {len(val_split)} held-out images")

save_model(model, "toy_model.dfqm")
print("saved to toy_model.dfqm")
