"""Toy ViT-style segmentation model, procedural dataset, trainer, serialization.

The model maps an H x W image to per-pixel class scores S (softmax over C) and
also exposes the per-block attention-module outputs, which downstream code
hooks for distribution matching and activation calibration.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass

import numpy as np

from dfq import tensor as T
from dfq.tensor import Tape, Tensor

MAGIC = b"DFQM"
FORMAT_VERSION = 1
LN_EPS = 1e-6

# activation sites a forward pass reports to its hook, per block
BLOCK_SITES = ("ln1", "qkv", "attn_softmax", "attn_out", "ln2", "mlp_hidden", "mlp_out")


class FormatError(ValueError):
    """Model file is malformed; the message names the failing byte offset."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at training step {step}")
        self.step = step


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 5
    channels: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_classes < 2:
            raise ValueError("need at least background plus one class")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (grayscale) or 3 (color)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def param_shapes(self):
        """Parameter (name, shape) pairs in declaration order."""
        c = self
        p2c = c.patch_size * c.patch_size * c.channels
        d, dh = c.embed_dim, c.mlp_ratio * c.embed_dim
        shapes = [
            ("embed.w", (p2c, d)),
            ("embed.b", (d,)),
            ("pos", (c.num_patches, d)),
        ]
        for l in range(c.num_layers):
            shapes += [
                (f"block{l}.ln1.gamma", (d,)),
                (f"block{l}.ln1.beta", (d,)),
                (f"block{l}.qkv.w", (d, 3 * d)),
                (f"block{l}.qkv.b", (3 * d,)),
                (f"block{l}.proj.w", (d, d)),
                (f"block{l}.proj.b", (d,)),
                (f"block{l}.ln2.gamma", (d,)),
                (f"block{l}.ln2.beta", (d,)),
                (f"block{l}.mlp.w1", (d, dh)),
                (f"block{l}.mlp.b1", (dh,)),
                (f"block{l}.mlp.w2", (dh, d)),
                (f"block{l}.mlp.b2", (d,)),
            ]
        shapes += [
            ("head.w", (d, c.num_classes * c.patch_size * c.patch_size)),
            ("head.b", (c.num_classes * c.patch_size * c.patch_size,)),
        ]
        return shapes


class SegModel:
    """Patch embedder + L transformer blocks + per-patch dense class head.

    ``params`` maps the names from :meth:`ModelConfig.param_shapes` to float64
    tensors.  The model is treated as immutable after training/loading; the
    trainer and the quantizer both work on private copies.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "SegModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_shapes():
            if name.endswith(("gamma",)):
                data = np.ones(shape)
            elif name.endswith((".b", ".b1", ".b2", "beta")):
                data = np.zeros(shape)
            elif name == "pos":
                data = rng.normal(0.0, 0.02, size=shape)
            else:
                data = rng.normal(0.0, 0.06, size=shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def copy(self) -> "SegModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return SegModel(copy.deepcopy(self.config), params)

    def parameters(self):
        return list(self.params.values())


def _patchify(image: Tensor, cfg: ModelConfig) -> Tensor:
    """(H, W, ch) -> (N, P*P*ch) row-major patch grid."""
    g, p, ch = cfg.grid, cfg.patch_size, cfg.channels
    x = T.reshape(image, (g, p, g, p, ch))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (cfg.num_patches, p * p * ch))


def _unpatchify(x: Tensor, cfg: ModelConfig, ch: int) -> Tensor:
    """(N, P*P*ch) -> (H, W, ch)."""
    g, p = cfg.grid, cfg.patch_size
    y = T.reshape(x, (g, g, p, p, ch))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (cfg.image_size, cfg.image_size, ch))


def forward(model: SegModel, image: Tensor, site_hook=None):
    """Run the segmenter on one image.

    Returns ``(S, attn_outputs)`` where S is (H, W, C) softmax-normalized over
    the class axis and attn_outputs lists the L attention-module outputs, each
    (N, D).  ``site_hook(name, t) -> t`` may replace activations in flight
    (identity when None); quantized inference and calibration both plug in
    here so there is a single forward implementation.
    """
    cfg = model.config
    if isinstance(image, np.ndarray):
        image = Tensor(image)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if image.shape != expected:
        raise T.ShapeError(f"image shape {image.shape} != {expected}")
    hook = site_hook if site_hook is not None else (lambda name, t: t)
    P = model.params
    heads = cfg.num_heads
    d = cfg.embed_dim
    dh = d // heads
    n = cfg.num_patches

    image = hook("input", image)
    x = _patchify(image, cfg) @ P["embed.w"] + P["embed.b"] + P["pos"]
    x = hook("embed", x)

    attn_outputs = []
    for l in range(cfg.num_layers):
        pre = f"block{l}."
        h1 = T.layer_norm(x, P[pre + "ln1.gamma"], P[pre + "ln1.beta"], eps=LN_EPS)
        h1 = hook(pre + "ln1", h1)
        qkv = h1 @ P[pre + "qkv.w"] + P[pre + "qkv.b"]
        qkv = hook(pre + "qkv", qkv)
        qkv = T.transpose(T.reshape(qkv, (n, 3, heads, dh)), (1, 2, 0, 3))
        q, k, v = (T.index_axis0(qkv, i) for i in range(3))
        att = T.softmax(q @ T.transpose(k, (0, 2, 1)) * (1.0 / math.sqrt(dh)), axis=-1)
        att = hook(pre + "attn_softmax", att)
        ctx = T.reshape(T.transpose(att @ v, (1, 0, 2)), (n, d))
        o = ctx @ P[pre + "proj.w"] + P[pre + "proj.b"]
        o = hook(pre + "attn_out", o)
        attn_outputs.append(o)
        x = x + o
        h2 = T.layer_norm(x, P[pre + "ln2.gamma"], P[pre + "ln2.beta"], eps=LN_EPS)
        h2 = hook(pre + "ln2", h2)
        m = T.gelu(h2 @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"])
        m = hook(pre + "mlp_hidden", m)
        m = m @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"]
        m = hook(pre + "mlp_out", m)
        x = x + m

    logits = x @ P["head.w"] + P["head.b"]
    logits = hook("head", logits)
    grid = _unpatchify(logits, cfg, cfg.num_classes)
    return T.softmax(grid, axis=-1), attn_outputs


# ---------------------------------------------------------------------------
# procedural dataset

# per-class mean intensity (grayscale) and mean radius as a fraction of H
_CLASS_INTENSITY = [0.10, 0.32, 0.50, 0.68, 0.88, 0.25, 0.45, 0.65]
_CLASS_RADIUS = [0.0, 0.22, 0.18, 0.16, 0.20, 0.17, 0.19, 0.16]
_NOISE_SIGMA = 0.03


def _class_band(c: int, channels: int):
    base = _CLASS_INTENSITY[c % len(_CLASS_INTENSITY)]
    if channels == 1:
        return np.array([base])
    # deterministic distinct color per class
    return np.array([base, (base * 1.7) % 1.0, 1.0 - base * 0.8])


def generate_dataset(seed: int, n_images: int, config: ModelConfig):
    """Procedural ellipse scenes with class-dependent intensity/size priors.

    Non-background regions are filled ellipses; class 3 is always placed left
    of class 4 when both occur, so the data carries a relative-position prior
    for synthesis to recover.  Deterministic under (seed, n_images, config).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(seed)
    h = w = config.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    samples = []
    for _ in range(n_images):
        label = np.zeros((h, w), dtype=np.int64)
        image = np.full((h, w, config.channels), _class_band(0, config.channels))
        k = int(rng.integers(1, 4))
        classes = rng.choice(np.arange(1, config.num_classes), size=min(k, config.num_classes - 1), replace=False)
        centers = {}
        for c in classes:
            centers[int(c)] = rng.uniform(0.25, 0.75, size=2) * [h, w]
        if 3 in centers and 4 in centers and centers[3][1] > centers[4][1]:
            centers[3], centers[4] = centers[4], centers[3]
        for c in classes:
            c = int(c)
            cy, cx = centers[c]
            r = _CLASS_RADIUS[c % len(_CLASS_RADIUS)] * h
            ry = r * rng.uniform(0.85, 1.15)
            rx = r * rng.uniform(0.85, 1.15)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(theta) + dx * np.sin(theta)
            v = -dy * np.sin(theta) + dx * np.cos(theta)
            inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
            label[inside] = c
            image[inside] = _class_band(c, config.channels)
        image += rng.normal(0.0, _NOISE_SIGMA, size=image.shape)
        samples.append((image, label))
    return samples


# ---------------------------------------------------------------------------
# training


class AdamState:
    """Adaptive-moment optimizer over a list of (tensor-like) slots."""

    def __init__(self, arrays, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def pixel_cross_entropy(S: Tensor, label: np.ndarray) -> Tensor:
    """Mean per-pixel negative log score of the true class."""
    h, w, c = S.shape
    onehot = np.zeros((h, w, c))
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], label] = 1.0
    logs = T.log(T.clip(S, 1e-12, 1.0))
    return T.reduce_sum(logs * Tensor(onehot)) * (-1.0 / (h * w))


def train(model: SegModel, dataset, epochs: int, lr: float = 3e-3, seed: int = 0,
          weight_decay: float = 0.0) -> SegModel:
    """Minimize per-pixel cross-entropy with Adam; returns a trained copy."""
    if not dataset:
        raise ValueError("dataset is empty")
    out = model.copy()
    params = out.parameters()
    opt = AdamState([p.data for p in params], lr=lr)
    rng = np.random.default_rng(seed)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for i in order:
            image, label = dataset[i]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                S, _ = forward(out, Tensor(image))
                loss = pixel_cross_entropy(S, label)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(step)
            tape.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if weight_decay:
                grads = [g + weight_decay * p.data for g, p in zip(grads, params)]
            opt.step([p.data for p in params], grads)
            step += 1
    return out


def predict(model: SegModel, image, site_hook=None) -> np.ndarray:
    """Per-pixel argmax class map (H, W) ints."""
    S, _ = forward(model, Tensor(np.asarray(image)), site_hook=site_hook)
    return np.argmax(S.data, axis=-1)


# ---------------------------------------------------------------------------
# serialization: little-endian container, magic DFQM, u32 version,
# config block (8 u32), tensors in declaration order as raw float64


def _pack_config(cfg: ModelConfig) -> bytes:
    return struct.pack(
        "<8I",
        cfg.image_size,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.mlp_ratio,
        cfg.num_classes,
        cfg.channels,
    )


def header_size() -> int:
    return 4 + 4 + 8 * 4


def model_file_size(cfg: ModelConfig) -> int:
    return header_size() + sum(8 * int(np.prod(s)) for _, s in cfg.param_shapes())


def write_model_section(f, model: SegModel) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<I", FORMAT_VERSION))
    f.write(_pack_config(model.config))
    for name, _ in model.config.param_shapes():
        f.write(np.ascontiguousarray(model.params[name].data).tobytes())


def save_model(model: SegModel, path) -> None:
    with open(path, "wb") as f:
        write_model_section(f, model)


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes for {what} at offset {f.tell() - len(buf)}")
    return buf


def read_model_section(f) -> SegModel:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    cfg_raw = _read_exact(f, 32, "config block")
    cfg = ModelConfig(*struct.unpack("<8I", cfg_raw))
    params = {}
    for name, shape in cfg.param_shapes():
        count = int(np.prod(shape))
        raw = _read_exact(f, 8 * count, f"tensor {name}")
        params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True)
    return SegModel(cfg, params)


def load_model(path) -> SegModel:
    with open(path, "rb") as f:
        model = read_model_section(f)
        if f.read(1):
            raise FormatError(f"unexpected trailing bytes at offset {f.tell() - 1}")
    return model
