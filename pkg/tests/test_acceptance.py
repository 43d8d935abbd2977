"""Acceptance suite: one test per shipping criterion, each printing a single
pass/fail line.  The expensive artifacts (trained default model, three full
synthesis runs) are session fixtures shared between criteria; their wall time
counts toward the criterion-7 pipeline budget."""

import time

import numpy as np
import pytest

from dfq import tensor as T
from dfq.evaluate import bops, evaluate, model_size_bytes
from dfq.model import ModelConfig, SegModel, generate_dataset, train
from dfq.quant import (
    PER_CHANNEL,
    PER_LAYER,
    calibrate,
    calibration_views,
    fake_quant,
    quantize_model,
    reparameterize,
)
from dfq.synth import (
    Mask,
    PseudoLabelSet,
    SynthesisConfig,
    distribution_loss,
    kde_entropy_points,
    semantic_loss,
    synthesize,
)
from dfq.tensor import Tape, Tensor

PIPELINE_BUDGET_S = 15 * 60


def report(num: int, name: str, ok: bool, detail: str = ""):
    suffix = f"  [{detail}]" if detail else ""
    line = f"[criterion {num}] {name}: {'PASS' if ok else 'FAIL'}{suffix}"
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="session")
def pipeline_clock():
    return {"elapsed": 0.0}


@pytest.fixture(scope="session")
def trained(pipeline_clock):
    t0 = time.monotonic()
    cfg = ModelConfig()
    data = generate_dataset(42, 112, cfg)
    model = train(SegModel.init(cfg, seed=42), data[:96], epochs=24, seed=42, weight_decay=3e-4)
    pipeline_clock["elapsed"] += time.monotonic() - t0
    return model, data[96:]


@pytest.fixture(scope="session")
def synthesis_runs(trained, pipeline_clock):
    model, _ = trained
    t0 = time.monotonic()
    runs = {seed: synthesize(model, SynthesisConfig(seed=seed)) for seed in (0, 1, 2)}
    pipeline_clock["elapsed"] += time.monotonic() - t0
    return runs


def test_criterion_1_reparameterization_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 48))
        dp = int(rng.integers(2, 48))
        gamma = rng.uniform(0.5, 2.0, size=d)
        beta = rng.normal(size=d)
        w = rng.normal(size=(d, dp))
        b = rng.normal(size=dp)
        x = rng.normal(size=(1000, d)) * rng.uniform(0.1, 10.0, size=d)
        qp = calibrate(x, 4, PER_CHANNEL)
        xhat = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-6)
        before = (gamma * xhat + beta) @ w + b
        g2, b2, w2, bias2, scalar = reparameterize(gamma, beta, w, b, qp)
        after = (g2 * xhat + b2) @ w2 + bias2
        rel = np.abs(after - before) / np.maximum(np.abs(before), 1e-8)
        worst = max(worst, float(rel.max()))
        assert scalar.granularity == PER_LAYER
    elapsed = time.monotonic() - t0
    report(1, "reparameterization equivalence", worst < 1e-5 and elapsed < 10.0,
           f"max rel dev {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_quantizer_contract():
    t0 = time.monotonic()
    # hand cases first
    p = calibrate(np.array([0.0, 1.5, 3.0]), bits=2)
    assert p.scale == 1.0 and p.zero_point == 0
    p = calibrate(np.array([-1.0, 1.0]), bits=4)
    assert np.isclose(p.scale, 2.0 / 15.0) and p.zero_point == 8
    rng = np.random.default_rng(1)
    failures = 0
    for _ in range(10_000):
        bits = int(rng.integers(2, 9))
        x = rng.uniform(-1, 1, size=32) * rng.uniform(0.01, 10.0)
        p = calibrate(x, bits=bits)
        deq = fake_quant(x, p)
        grid = p.scale * (np.arange(p.qmax + 1) - p.zero_point)
        ok = np.all(np.isclose(deq[:, None], grid[None, :], rtol=0, atol=1e-12).any(axis=1))
        order = np.argsort(x, kind="stable")
        ok &= np.all(np.diff(((deq - deq.min()) / p.scale)[order].round()) >= 0)
        ok &= np.all(np.abs(deq - x) <= p.scale / 2 + 1e-12)
        failures += 0 if ok else 1
    elapsed = time.monotonic() - t0
    report(2, "quantizer contract (10k trials)", failures == 0 and elapsed < 5.0,
           f"{failures} failures, {elapsed:.1f}s")


def test_criterion_3_gradient_integrity():
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    worst_op = 0.0

    def fd(fn, x, eps=1e-6):
        g = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            g[i] = (fn(xp) - fn(xm)) / (2 * eps)
        return g

    def check(make_loss, x0):
        nonlocal worst_op
        t = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = make_loss(t)
        tape.backward(loss)
        num = fd(lambda x: make_loss(Tensor(x)).item(), x0)
        denom = np.maximum(np.abs(num), np.maximum(np.abs(t.grad), 1e-6))
        worst_op = max(worst_op, float(np.max(np.abs(num - t.grad) / denom)))

    w = Tensor(rng.normal(size=(6, 4)))
    probe = Tensor(rng.normal(size=(5, 4)))
    probe_sq = Tensor(rng.normal(size=(5, 5)))
    ops = [
        (lambda t: T.reduce_sum(t @ w), rng.normal(size=(5, 6))),
        (lambda t: T.reduce_sum(T.softmax(t) * probe), rng.normal(size=(5, 4))),
        (lambda t: T.reduce_sum(T.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))) * probe), rng.normal(size=(5, 4))),
        (lambda t: T.reduce_sum(T.gelu(t)), rng.normal(size=(8,))),
        (lambda t: T.reduce_sum(T.relu(t)), rng.normal(size=(8,)) + 0.01),
        (lambda t: T.reduce_sum(T.exp(t)), rng.normal(size=(8,))),
        (lambda t: T.reduce_sum(T.log(t)), rng.uniform(0.5, 2.0, size=(8,))),
        (lambda t: T.reduce_mean(t * t), rng.normal(size=(8,))),
        (lambda t: T.reduce_sum(T.cosine_similarity_matrix(t) * probe_sq), rng.normal(size=(5, 4))),
        (lambda t: kde_entropy_points(t, h=0.5), rng.normal(size=(20,))),
    ]
    for make_loss, x0 in ops:
        check(make_loss, x0)

    # composed synthesis objective on the 16x16 config, end to end wrt image
    cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_layers=2, num_heads=2, num_classes=3)
    model = SegModel.init(cfg, seed=5)
    labels = PseudoLabelSet((16, 16))
    px = np.zeros((16, 16), dtype=bool)
    px[4:10, 4:10] = True
    labels.add(Mask(px, 1, 0.9, 36, 0))
    from dfq.model import forward

    def objective(img_tensor):
        S, attn = forward(model, img_tensor)
        return semantic_loss(S, labels, 0.5) - 0.05 * distribution_loss(attn, h=0.5)

    img = rng.normal(size=(16, 16, 1))
    t = Tensor(img, requires_grad=True)
    with Tape() as tape:
        loss = objective(t)
    tape.backward(loss)
    idx = [tuple(i) for i in rng.integers(0, 16, size=(25, 2))]
    worst_e2e = 0.0
    for i, j in idx:
        eps = 1e-5
        xp, xm = img.copy(), img.copy()
        xp[i, j, 0] += eps
        xm[i, j, 0] -= eps
        num = (objective(Tensor(xp)).item() - objective(Tensor(xm)).item()) / (2 * eps)
        ana = t.grad[i, j, 0]
        worst_e2e = max(worst_e2e, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    elapsed = time.monotonic() - t0
    report(3, "gradient integrity", worst_op < 1e-4 and worst_e2e < 1e-3 and elapsed < 60.0,
           f"ops {worst_op:.2e}, end-to-end {worst_e2e:.2e}, {elapsed:.1f}s")


def test_criterion_4_kde_entropy_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    x = rng.standard_normal(10_000)
    ref = 0.5 * np.log(2 * np.pi * np.e)
    est = kde_entropy_points(x).item()
    monotone = kde_entropy_points(2 * x).item() > est
    elapsed = time.monotonic() - t0
    report(4, "kde entropy oracle", abs(est - ref) < 0.1 and monotone and elapsed < 10.0,
           f"est {est:.4f} vs {ref:.4f}, {elapsed:.1f}s")


def test_criterion_5_label_evolution_soundness(trained, synthesis_runs):
    model, _ = trained
    cfg_model = model.config
    ok = True
    details = []
    for seed, res in synthesis_runs.items():
        scfg = SynthesisConfig(seed=seed)
        eps2 = scfg.resolved_eps2(cfg_model)
        occ = np.zeros_like(res.labels.occupancy)
        for m in res.labels.masks:
            if np.any(occ & m.pixels):
                ok = False
            occ |= m.pixels
            if m.birth_iter >= 0:
                if not (m.peak_score > scfg.eps1 and m.size > eps2):
                    ok = False
        frozen = {r.num_masks for r in res.trace if r.iteration > scfg.evolve_iters}
        if len(frozen) > 1:
            ok = False
        details.append(f"seed {seed}: {len(res.labels)} masks")
    report(5, "label-evolution soundness", ok, "; ".join(details))


def test_criterion_6_granularity_claim():
    rng = np.random.default_rng(4)
    violations = 0
    for _ in range(100):
        ranges = np.exp(rng.uniform(np.log(0.01), np.log(100.0), size=16))
        x = rng.normal(size=(128, 16)) * ranges
        mse_pc = np.mean((fake_quant(x, calibrate(x, 4, PER_CHANNEL)) - x) ** 2)
        mse_pl = np.mean((fake_quant(x, calibrate(x, 4, PER_LAYER)) - x) ** 2)
        violations += 0 if mse_pc <= mse_pl else 1
    report(6, "per-channel granularity claim", violations == 0, f"{violations}/100 violations")


def test_criterion_7_end_to_end_trend(trained, synthesis_runs, pipeline_clock):
    model, eval_data = trained
    t0 = time.monotonic()
    fp = evaluate(model, eval_data).mean_iou
    shape = (model.config.image_size, model.config.image_size, model.config.channels)
    good_seeds = 0
    details = [f"FP {fp:.3f}"]
    synth_ious = []
    # same calibration-batch construction for both sources: the shipped
    # pipeline default of 16 geometric views per image
    for seed, res in synthesis_runs.items():
        qs = quantize_model(model, calibration_views(res.image.data), 4, 4)
        iou_s = evaluate(qs, eval_data).mean_iou
        noise = np.random.default_rng(seed).standard_normal(shape)
        qg = quantize_model(model, calibration_views(noise), 4, 4)
        iou_g = evaluate(qg, eval_data).mean_iou
        synth_ious.append(iou_s)
        if fp >= iou_s >= iou_g and fp - iou_s <= 0.15:
            good_seeds += 1
        details.append(f"seed {seed}: synth {iou_s:.3f} gauss {iou_g:.3f}")
    pipeline_clock["elapsed"] += time.monotonic() - t0
    elapsed = pipeline_clock["elapsed"]
    within = fp - float(np.mean(synth_ious)) <= 0.15
    details.append(f"pipeline {elapsed:.0f}s")
    report(7, "end-to-end calibration trend", good_seeds >= 2 and within and elapsed < PIPELINE_BUDGET_S,
           "; ".join(details))


def test_criterion_8_complexity_accounting():
    # overhead is negligible only at realistic transformer width
    big = ModelConfig(image_size=256, patch_size=16, embed_dim=768, num_layers=12, num_heads=12)
    ratio = model_size_bytes(big, 32) / model_size_bytes(big, 4)
    bops_ratio = bops(big, 32, 32) / bops(big, 4, 4)
    toy_ratio = bops(ModelConfig(), 32, 32) / bops(ModelConfig(), 4, 4)
    report(8, "complexity accounting", 7.5 <= ratio <= 8.0 and bops_ratio == 64.0 and toy_ratio == 64.0,
           f"size ratio {ratio:.2f}, bops ratio {bops_ratio:.0f}")


def test_criterion_9_cli_determinism(tmp_path):
    from dfq.cli import main

    tiny = [
        "--image-size", "16", "--patch-size", "4", "--embed-dim", "16",
        "--num-layers", "2", "--num-heads", "2", "--num-classes", "3",
        "--train-images", "8", "--val-images", "2", "--epochs", "1",
    ]
    ok = True
    model = tmp_path / "m.dfqm"
    other = tmp_path / "m2.dfqm"
    assert main(["train", "--out", str(model), "--seed", "3", *tiny]) == 0
    assert main(["train", "--out", str(other), "--seed", "3", *tiny]) == 0
    ok &= model.read_bytes() == other.read_bytes()
    for run in ("a", "b"):
        assert main([
            "synth", "--model", str(model), "--out", str(tmp_path / f"{run}.pgm"),
            "--iters", "5", "--evolve-iters", "2", "--kde-eval-points", "64",
        ]) == 0
        assert main([
            "compare", "--model", str(model), "--out", str(tmp_path / f"{run}.csv"),
            "--synth", str(tmp_path / f"{run}.pgm"), "--images", "2", "--seed", "1",
        ]) == 0
    for name in ("%s.pgm", "%s.raw", "%s.trace.csv", "%s.csv"):
        ok &= (tmp_path / (name % "a")).read_bytes() == (tmp_path / (name % "b")).read_bytes()
    report(9, "cli determinism", ok, "train/synth/compare byte-identical")
