"""Calibration-image synthesis from a trained segmenter.

Alternating label evolution and image updating: starting from Gaussian noise,
the image is optimized so that (a) the model's own high-confidence predicted
masks, progressively promoted into a pseudo ground-truth set, are matched ever
more sharply (semantic term), and (b) the differential entropy of the
attention-output patch-similarity distribution grows toward the diverse
responses characteristic of structured images (distribution term).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage

from dfq import tensor as T
from dfq.model import AdamState, ModelConfig, SegModel, forward
from dfq.tensor import NonFiniteError, Tape, Tensor, cosine_similarity_matrix

LOG_FLOOR = 1e-12
SIGMA_FLOOR = 1e-4


class SynthesisAbortedError(RuntimeError):
    """Loss became non-finite; carries the iteration and last good image."""

    def __init__(self, iteration: int, last_image: np.ndarray):
        super().__init__(f"non-finite loss at synthesis iteration {iteration}")
        self.iteration = iteration
        self.last_image = last_image


# ---------------------------------------------------------------------------
# pseudo-positive label evolution


@dataclass
class Mask:
    """One connected predicted region with its category and filter metadata."""

    pixels: np.ndarray  # bool (H, W)
    category: int  # in [1, C)
    peak_score: float
    size: int
    birth_iter: int = 0


class PseudoLabelSet:
    """The evolving ground-truth mask collection.

    Accepted masks are pairwise pixel-disjoint by construction: a new mask
    first yields all pixels already claimed in the occupancy grid.
    """

    def __init__(self, shape: tuple[int, int]):
        self.masks: list[Mask] = []
        self.occupancy = np.zeros(shape, dtype=bool)
        self.rejected = 0

    def __len__(self):
        return len(self.masks)

    def add(self, mask: Mask) -> None:
        if not mask.pixels.any():
            raise ValueError("mask pixel set is empty")
        if mask.category < 1:
            raise ValueError("mask category must be non-background")
        self.masks.append(mask)
        self.occupancy |= mask.pixels

    def union(self) -> np.ndarray:
        return self.occupancy

    def category_weights(self, num_classes: int) -> np.ndarray:
        """(H, W, C) indicator: 1 at (pixel in mask m, category of m)."""
        h, w = self.occupancy.shape
        out = np.zeros((h, w, num_classes))
        for m in self.masks:
            out[..., m.category][m.pixels] = 1.0
        return out

    @classmethod
    def with_random_rectangle(cls, shape, num_classes: int, rng) -> "PseudoLabelSet":
        """Initial label: one rectangle of random position, size, and category.

        The seed mask predates any model response, so it carries peak score 1
        and birth iteration -1 to distinguish it from evolved (filtered) masks.
        """
        h, w = shape
        labels = cls(shape)
        rh = int(rng.integers(h // 8, h // 3 + 1))
        rw = int(rng.integers(w // 8, w // 3 + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        cat = int(rng.integers(1, num_classes))
        pixels = np.zeros(shape, dtype=bool)
        pixels[top : top + rh, left : left + rw] = True
        labels.add(Mask(pixels, cat, peak_score=1.0, size=int(pixels.sum()), birth_iter=-1))
        return labels


def extract_candidate_masks(S, birth_iter: int = 0) -> list[Mask]:
    """Argmax the class scores and split every non-background class into
    4-connected components."""
    scores = S.data if isinstance(S, Tensor) else np.asarray(S)
    amax = np.argmax(scores, axis=-1)  # ties go to the lowest class index
    candidates = []
    for c in range(1, scores.shape[-1]):
        region = amax == c
        if not region.any():
            continue
        lab, n = ndimage.label(region)  # default structure = 4-connectivity
        # work inside bounding boxes; a speckly argmax map can have hundreds
        # of components and full-grid passes per component dominate otherwise
        for i, box in enumerate(ndimage.find_objects(lab), start=1):
            local = lab[box] == i
            pixels = np.zeros(amax.shape, dtype=bool)
            pixels[box] = local
            candidates.append(
                Mask(
                    pixels,
                    category=c,
                    peak_score=float(scores[..., c][box][local].max()),
                    size=int(local.sum()),
                    birth_iter=birth_iter,
                )
            )
    return candidates


def select_pseudo_positive(candidates: list[Mask], S) -> Mask | None:
    """Candidate with the highest mean in-mask score; ties prefer larger size,
    then lower category index."""
    if not candidates:
        return None
    scores = S.data if isinstance(S, Tensor) else np.asarray(S)

    def key(m: Mask):
        mean = scores[..., m.category][m.pixels].mean()
        return (-mean, -m.size, m.category)

    return min(candidates, key=key)


def evolve_labels(labels: PseudoLabelSet, m: Mask, eps1: float, eps2: float, scores=None) -> PseudoLabelSet:
    """Filter the sampled mask and, if it passes, claim it into the label set.

    The mask first yields pixels already claimed; it is accepted iff its peak
    score exceeds eps1 and its remaining size exceeds eps2.  When ``scores``
    is given the peak is re-measured on the remaining pixels.
    """
    remaining = m.pixels & ~labels.occupancy
    size = int(remaining.sum())
    if size == 0:
        labels.rejected += 1
        return labels
    if scores is not None:
        sc = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
        peak = float(sc[..., m.category][remaining].max())
    else:
        peak = m.peak_score
    if peak > eps1 and size > eps2:
        labels.add(Mask(remaining, m.category, peak, size, m.birth_iter))
    else:
        labels.rejected += 1
    return labels


# ---------------------------------------------------------------------------
# losses


def semantic_loss(S: Tensor, labels: PseudoLabelSet, alpha: float) -> Tensor:
    """Soft-IoU mask complement plus alpha-weighted conditional cross-entropy.

    The mask term is 1 - sum(min(p, g)) / sum(max(p, g)) with p the per-pixel
    foreground probability and g the binary union of the label set; on binary
    p it reduces to the set-IoU complement.  The class term averages
    -log S[.., c*] over all labeled pixels.  Empty label set gives exactly 0.
    """
    if len(labels) == 0:
        return Tensor(0.0)
    num_classes = S.shape[-1]
    p = 1.0 - T.select_channel(S, 0)
    g = Tensor(labels.union().astype(np.float64))
    inter = T.reduce_sum(T.minimum(p, g))
    union = T.reduce_sum(T.maximum(p, g))
    l_mask = 1.0 - T.divide(inter, union)
    weights = labels.category_weights(num_classes)
    n_labeled = weights.sum()
    logs = T.log(T.clip(S, LOG_FLOOR, 1.0))
    l_class = T.reduce_sum(logs * Tensor(weights)) * (-1.0 / n_labeled)
    return l_mask + alpha * l_class


def patch_similarity(attn_output: Tensor) -> Tensor:
    """All-pairs cosine similarity of patch vectors (N x D -> N x N)."""
    return cosine_similarity_matrix(attn_output)


@njit(cache=True, fastmath=True)
def _kde_log_density(x, h, eval_idx, loo):
    m = eval_idx.shape[0]
    k = x.shape[0]
    inv = -0.5 / (h * h)
    denom = (k - 1) if loo else k
    norm = 1.0 / (denom * h * math.sqrt(2.0 * math.pi))
    out = np.empty(m)
    for a in range(m):
        i = eval_idx[a]
        xi = x[i]
        s = 0.0
        for j in range(k):
            if loo and j == i:
                continue
            d = xi - x[j]
            s += math.exp(inv * d * d)
        out[a] = math.log(norm * s)
    return out


@njit(cache=True, fastmath=True)
def _kde_entropy_grad(x, h, eval_idx, loo, f_vals):
    """d/dx of -(1/m) * sum_i log f(x_i); h is treated as a constant."""
    m = eval_idx.shape[0]
    k = x.shape[0]
    inv = -0.5 / (h * h)
    h2 = h * h
    denom = (k - 1) if loo else k
    norm = 1.0 / (denom * h * math.sqrt(2.0 * math.pi))
    grad = np.zeros(k)
    for a in range(m):
        i = eval_idx[a]
        xi = x[i]
        coef = -norm / (m * f_vals[a])
        si = 0.0
        for j in range(k):
            if loo and j == i:
                continue
            d = xi - x[j]
            # d/dx_j of exp(-(xi-xj)^2 / 2h^2), sign folded into kp
            kp = (d / h2) * math.exp(inv * d * d)
            si += kp
            grad[j] += coef * kp
        grad[i] -= coef * si
    return grad


def silverman_bandwidth(x: np.ndarray) -> float:
    k = x.size
    sigma = float(np.std(x, ddof=1)) if k > 1 else 0.0
    return 1.06 * max(sigma, SIGMA_FLOOR) * k ** (-0.2)


def _eval_indices(x: np.ndarray, eval_points) -> np.ndarray:
    k = x.size
    if eval_points is None or eval_points >= k:
        return np.arange(k, dtype=np.int64)
    # quantile-stratified subset: evenly spaced order statistics, so the
    # estimate stays invariant under permutations of the input
    order = np.argsort(x, kind="stable")
    pick = np.linspace(0, k - 1, eval_points).round().astype(np.int64)
    return order[pick]


def kde_entropy_points(x, bandwidth_rule: str = "silverman", h: float | None = None,
                       eval_points: int | None = None, leave_one_out: bool = False) -> Tensor:
    """Differential entropy of a 1-D sample via a normal-kernel density fit.

    Entropy is estimated by resubstitution, -mean(log f_h(x_i)) over the
    sample points themselves (optionally a quantile-stratified subset, or
    leave-one-out).  The bandwidth follows Silverman's rule unless given
    explicitly; it is held constant in the backward pass.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.ndim != 1 or xt.data.size < 2:
        raise T.ShapeError("kde_entropy_points needs a 1-D sample of at least 2 points")
    if h is None:
        if bandwidth_rule != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
        h = silverman_bandwidth(xt.data)
    h = float(h)
    idx = _eval_indices(xt.data, eval_points)
    logf = _kde_log_density(xt.data, h, idx, leave_one_out)
    entropy = -logf.mean()

    def grad(g):
        gx = _kde_entropy_grad(xt.data, h, idx, leave_one_out, np.exp(logf))
        return (float(g) * gx,)

    return T.apply_op(np.asarray(entropy), (xt,), grad)


def upper_triangle(gamma: Tensor) -> Tensor:
    """Strict upper triangle of a square matrix, flattened."""
    n = gamma.shape[0]
    i, j = np.triu_indices(n, k=1)
    return T.take(gamma, i * n + j)


def kde_entropy(gamma: Tensor, bandwidth_rule: str = "silverman", **kwargs) -> Tensor:
    """Entropy of the off-diagonal patch-similarity values of an N x N matrix."""
    return kde_entropy_points(upper_triangle(gamma), bandwidth_rule, **kwargs)


def distribution_loss(attn_outputs, **kde_kwargs) -> Tensor:
    """Summed per-layer patch-similarity entropy (higher = more diverse)."""
    if not attn_outputs:
        raise ValueError("need at least one attention output")
    total = kde_entropy(patch_similarity(attn_outputs[0]), **kde_kwargs)
    for o in attn_outputs[1:]:
        total = total + kde_entropy(patch_similarity(o), **kde_kwargs)
    return total


# ---------------------------------------------------------------------------
# the synthesis loop


@dataclass
class SynthesisConfig:
    alpha: float = 0.5
    beta: float = 0.05
    eps1: float = 0.8
    eps2: float | None = None  # default resolves to 0.002 * H * W
    total_iters: int = 1500
    evolve_iters: int = 500
    lr: float = 0.1
    lr_final: float = 0.01
    adam_betas: tuple = (0.9, 0.999)
    seed: int = 0
    kde_bandwidth_rule: str = "silverman"
    kde_eval_points: int | None = 512
    kde_leave_one_out: bool = False
    # minimize L_SM - beta * entropy by default (diversity is rewarded);
    # False flips the sign for comparison runs
    maximize_entropy: bool = True
    # project the image into the data range after every update so calibration
    # statistics transfer to real inputs; None leaves pixels unconstrained
    pixel_range: tuple | None = (0.0, 1.0)

    def __post_init__(self):
        if self.total_iters < 0 or not 0 <= self.evolve_iters <= max(self.total_iters, 1):
            raise ValueError("need 0 <= evolve_iters <= total_iters")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 < self.eps1 < 1:
            raise ValueError("eps1 must lie in (0, 1)")
        if self.eps2 is not None and self.eps2 < 1:
            raise ValueError("eps2 must be >= 1")

    def resolved_eps2(self, model_config: ModelConfig) -> float:
        if self.eps2 is not None:
            return self.eps2
        return 0.002 * model_config.image_size * model_config.image_size


@dataclass
class TraceRow:
    iteration: int
    loss_sm: float
    loss_dm: float
    loss_total: float
    num_masks: int


@dataclass
class SynthesisResult:
    image: Tensor
    labels: PseudoLabelSet
    trace: list = field(default_factory=list)


def init_image(seed: int, model_config: ModelConfig) -> Tensor:
    """I.i.d. standard-normal image with gradient tracking enabled."""
    rng = np.random.default_rng(seed)
    shape = (model_config.image_size, model_config.image_size, model_config.channels)
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _cosine_lr(cfg: SynthesisConfig, t: int) -> float:
    if cfg.total_iters <= 1:
        return cfg.lr
    frac = (t - 1) / (cfg.total_iters - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


def synthesize(model: SegModel, config: SynthesisConfig) -> SynthesisResult:
    """Run the full synthesis loop; deterministic under (model, config)."""
    mcfg = model.config
    image = init_image(config.seed, mcfg)
    rng = np.random.default_rng([config.seed, 0xD1CE])
    labels = PseudoLabelSet.with_random_rectangle(
        (mcfg.image_size, mcfg.image_size), mcfg.num_classes, rng
    )
    eps2 = config.resolved_eps2(mcfg)
    opt = AdamState([image.data], lr=config.lr, betas=config.adam_betas)
    kde_kwargs = dict(
        bandwidth_rule=config.kde_bandwidth_rule,
        eval_points=config.kde_eval_points,
        leave_one_out=config.kde_leave_one_out,
    )
    trace: list[TraceRow] = []
    last_good = image.data.copy()
    for t in range(1, config.total_iters + 1):
        image.zero_grad()
        try:
            with Tape() as tape:
                S, attn = forward(model, image)
                if t <= config.evolve_iters:
                    cands = extract_candidate_masks(S.data, birth_iter=t)
                    best = select_pseudo_positive(cands, S.data)
                    if best is not None:
                        evolve_labels(labels, best, config.eps1, eps2, scores=S.data)
                loss_sm = semantic_loss(S, labels, config.alpha)
                entropy = distribution_loss(attn, **kde_kwargs)
                if config.maximize_entropy:
                    loss = loss_sm - config.beta * entropy
                else:
                    loss = loss_sm + config.beta * entropy
            tape.backward(loss)
        except NonFiniteError:
            raise SynthesisAbortedError(t, last_good) from None
        grad = image.grad if image.grad is not None else np.zeros_like(image.data)
        opt.step([image.data], [grad], lr=_cosine_lr(config, t))
        if config.pixel_range is not None:
            np.clip(image.data, *config.pixel_range, out=image.data)
        trace.append(TraceRow(t, loss_sm.item(), entropy.item(), loss.item(), len(labels)))
        last_good = image.data.copy()
    return SynthesisResult(image, labels, trace)


TRACE_FIELDS = ("iteration", "loss_sm", "loss_dm", "loss_total", "num_masks")


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow(
                [row.iteration, repr(row.loss_sm), repr(row.loss_dm), repr(row.loss_total), row.num_masks]
            )
