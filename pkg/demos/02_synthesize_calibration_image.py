"""Synthesize a calibration image from the trained model alone — no data.

Starting from pure Gaussian noise, the loop alternates two moves: it promotes
the model's own most confident predicted regions into a pseudo ground-truth
label set (first third of the run), and it updates the image so that (a) the
prediction matches those labels sharply and (b) the patch-similarity entropy
of the attention outputs rises toward the diversity real images produce.

Run demos/01_train_toy_segmenter.py first to create toy_model.dfqm.
"""

from dfq.cli import write_pnm, write_raw_image
from dfq.model import load_model
from dfq.synth import SynthesisConfig, synthesize, write_trace_csv

model = load_model("toy_model.dfqm")

config = SynthesisConfig(seed=0, total_iters=300, evolve_iters=100)  # short demo run
result = synthesize(model, config)

print(f"label set: {len(result.labels)} masks (+{result.labels.rejected} rejected)")
for m in result.labels.masks:
    tag = "seed rectangle" if m.birth_iter < 0 else f"born at iter {m.birth_iter}"
    print(f"  class {m.category}: {m.size} px, peak score {m.peak_score:.3f} ({tag})")

first, last = result.trace[0], result.trace[-1]
print(f"semantic loss {first.loss_sm:.3f} -> {last.loss_sm:.3f}")
print(f"similarity entropy {first.loss_dm:.3f} -> {last.loss_dm:.3f} (driven up)")

write_pnm("calib.pgm", result.image.data)  # 8-bit view
write_raw_image("calib.raw", result.image.data)  # what the quantizer consumes
write_trace_csv("calib.trace.csv", result.trace)
print("wrote calib.pgm / calib.raw / calib.trace.csv")
