"""Uniform quantization: calibration, fake-quant inference, reparameterization.

The quantizer maps reals to b-bit integers via x_q = clip(round(x/s) + z) and
back via s * (x_q - z).  Rounding ties break away from zero everywhere.
Weights are quantized per output channel directly from their values;
activations are calibrated from feature maps hooked on calibration images,
with post-LayerNorm sites first calibrated per channel and then rewritten to
a single shared (s, z) by an exact model transform that folds the per-channel
variation into the LayerNorm affine factors and the next linear layer.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from dfq.model import (
    BLOCK_SITES,
    FormatError,
    SegModel,
    _read_exact,
    forward,
    read_model_section,
    write_model_section,
)
from dfq.tensor import Tensor

DEGENERATE_SCALE = 1e-8

PER_CHANNEL = "per_channel"
PER_LAYER = "per_layer"

# weight matrices quantized per output channel; 1-D params stay full precision
WEIGHT_SITES_2D = ("embed.w", "qkv.w", "proj.w", "mlp.w1", "mlp.w2", "head.w")


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantParams:
    bits: int
    scale: np.ndarray  # scalar array () for per_layer, (D,) for per_channel
    zero_point: np.ndarray  # integer-valued, same shape as scale
    granularity: str = PER_LAYER

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64)
        if self.bits < 2:
            raise ValueError("bit-width must be >= 2")
        if self.granularity not in (PER_CHANNEL, PER_LAYER):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_LAYER and self.scale.ndim != 0:
            raise ValueError("per_layer params must be scalar")
        if self.granularity == PER_CHANNEL and self.scale.shape != self.zero_point.shape:
            raise ValueError("scale and zero_point lengths differ")
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > self.qmax):
            raise ValueError("zero_point outside the integer grid")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1


def calibrate(samples, bits: int, granularity: str = PER_LAYER) -> QuantParams:
    """Min/max calibration: s = (max-min)/(2^b - 1), z = round(-min/s).

    Per-channel granularity treats the trailing axis as the channel axis and
    pools everything else.  Constant channels get s = 1e-8, z = 0 and a
    recorded warning.
    """
    data = samples.data if isinstance(samples, Tensor) else np.asarray(samples, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot calibrate from empty samples")
    if bits < 2:
        raise ValueError("bit-width must be >= 2")
    if granularity == PER_LAYER:
        lo, hi = data.min(), data.max()
    else:
        flat = data.reshape(-1, data.shape[-1])
        lo, hi = flat.min(axis=0), flat.max(axis=0)
    degenerate = np.asarray(hi - lo) == 0
    # extend the range to cover zero so the zero-point lands inside the
    # integer grid; otherwise one-sided data (e.g. softmax outputs) would
    # need z outside [0, 2^b - 1] and clipping would collapse the range
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    qmax = 2**bits - 1
    span = np.asarray(hi - lo, dtype=np.float64)
    if np.any(degenerate):
        warnings.warn("degenerate (constant) channel during calibration; scale pinned to 1e-8")
    scale = np.where(degenerate, DEGENERATE_SCALE, span / qmax)
    zero = np.where(degenerate, 0, np.clip(round_half_away(-np.asarray(lo) / scale), 0, qmax))
    return QuantParams(bits, scale, zero.astype(np.int64), granularity)


def quantize(x, p: QuantParams) -> np.ndarray:
    """Real -> integer grid; per-channel params broadcast over the trailing axis."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    q = round_half_away(data / p.scale) + p.zero_point
    return np.clip(q, 0, p.qmax).astype(np.int64)


def dequantize(xq, p: QuantParams) -> np.ndarray:
    xq = np.asarray(xq)
    if np.any(xq < 0) or np.any(xq > p.qmax):
        raise ValueError("quantized values outside [0, 2^b - 1]")
    return p.scale * (xq.astype(np.float64) - p.zero_point)


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


def reparameterize(gamma, beta, w_next, b_next, qp: QuantParams):
    """Fold per-channel activation quantization into a shared scalar pair.

    Given per-channel (s, z) for a post-LayerNorm activation and the next
    linear layer (w_next: D x D', b_next: D'), rewrites the affine factors and
    weights so that full-precision outputs are unchanged while the activation
    can use the scalar pair (mean(s), round(mean(z))).

    Returns (gamma', beta', w', b', scalar QuantParams).
    """
    if qp.granularity != PER_CHANNEL:
        raise ValueError("reparameterize expects per-channel activation params")
    s = qp.scale
    z = qp.zero_point.astype(np.float64)
    s_bar = s.mean()
    z_bar = round_half_away(z.mean())
    r1 = s / s_bar
    if np.any(r1 == 0):
        raise RuntimeError("variation factor r1 contains zero; scales must be positive")
    r2 = z - z_bar
    shift = s * r2
    gamma_t = gamma / r1
    beta_t = (beta + shift) / r1
    w_t = w_next * r1[:, None]
    b_t = b_next - shift @ w_next
    scalar = QuantParams(qp.bits, np.asarray(s_bar), np.asarray(int(z_bar)), PER_LAYER)
    return gamma_t, beta_t, w_t, b_t, scalar


class QuantizedModel:
    """A reparameterized model copy plus per-site fake-quant parameters.

    Immutable after construction; forward simulates integer inference by a
    quantize/dequantize round trip at every weight and activation site.
    """

    def __init__(self, model: SegModel, act_params: dict, weight_params: dict,
                 w_bits: int, a_bits: int):
        self.model = model
        self.act_params = act_params
        self.weight_params = weight_params
        self.w_bits = w_bits
        self.a_bits = a_bits
        self._inference_model = self._with_fake_quant_weights()

    def _with_fake_quant_weights(self) -> SegModel:
        m = self.model.copy()
        for name, qp in self.weight_params.items():
            m.params[name] = Tensor(fake_quant(m.params[name].data, qp))
        return m

    def _hook(self, name, t: Tensor) -> Tensor:
        qp = self.act_params.get(name)
        if qp is None:
            return t
        return Tensor(fake_quant(t.data, qp))

    def forward(self, image):
        return forward(self._inference_model, image, site_hook=self._hook)

    def predict(self, image) -> np.ndarray:
        S, _ = self.forward(image)
        return np.argmax(S.data, axis=-1)


def activation_sites(config) -> list[str]:
    """Quantized activation sites: the transformer-block tensors (post-LN,
    attention in/out, softmax, MLP in/out).  The raw input, the patch
    embedding, and the head logits stay full precision — every quantized site
    then sits downstream of a LayerNorm, so its range is bounded regardless
    of input magnitude and calibration transfers across image scales."""
    return [f"block{l}.{s}" for l in range(config.num_layers) for s in BLOCK_SITES]


def _post_ln_next_layer(site: str) -> str | None:
    """Weight fed by a post-LayerNorm site, or None if the site is not post-LN."""
    if site.endswith(".ln1"):
        return site[: -len("ln1")] + "qkv.w"
    if site.endswith(".ln2"):
        return site[: -len("ln2")] + "mlp.w1"
    return None


def collect_activations(model: SegModel, images) -> dict[str, np.ndarray]:
    """Hooked feature maps per site, pooled over all calibration images."""
    pools: dict[str, list] = {}

    def hook(name, t):
        pools.setdefault(name, []).append(t.data.reshape(-1, t.data.shape[-1]))
        return t

    for image in images:
        forward(model, Tensor(np.asarray(image)), site_hook=hook)
    return {k: np.concatenate(v, axis=0) for k, v in pools.items()}


def calibration_views(image, num_views: int = 16) -> list[np.ndarray]:
    """Deterministic geometric views of one calibration image.

    Min/max calibration is asymmetric: a range the calibration batch fails to
    reach clips every activation beyond it at inference, while an overshoot
    only coarsens the grid.  A single image under-covers because each patch is
    seen at exactly one grid alignment; flips, rotations, transposes, and
    cyclic shifts re-align the same content against the patch grid and widen
    the observed ranges without inventing data.  The first view is always the
    identity; all views are pixel permutations of the input.
    """
    img = np.asarray(image)
    if not 1 <= num_views <= 16:
        raise ValueError("num_views must be in [1, 16]")
    views = [
        img,
        img[::-1],
        img[:, ::-1],
        np.rot90(img),
        np.rot90(img, 2),
        np.rot90(img, 3),
        img.transpose(1, 0, 2),
        np.rot90(img, 2).transpose(1, 0, 2),
    ]
    h, w = img.shape[0], img.shape[1]
    for fy, fx in ((1, 0), (0, 1), (2, 2), (4, 0), (0, 4), (3, 5), (5, 3), (6, 2)):
        views.append(np.roll(img, (fy * h // 8, fx * w // 8), axis=(0, 1)))
    return [np.ascontiguousarray(v) for v in views[:num_views]]


def quantize_model(model: SegModel, calib_images, w_bits: int, a_bits: int) -> QuantizedModel:
    """Post-training quantization from calibration images.

    Weights: per-channel from parameter values, no data needed.  Activations:
    post-LayerNorm sites per-channel then reparameterized to per-layer; all
    other sites per-layer.
    """
    if not calib_images:
        raise ValueError("need at least one calibration image")
    m = model.copy()
    acts = collect_activations(m, calib_images)

    act_params: dict[str, QuantParams] = {}
    for site in activation_sites(m.config):
        samples = acts[site]
        next_w = _post_ln_next_layer(site)
        if next_w is not None:
            per_ch = calibrate(samples, a_bits, PER_CHANNEL)
            prefix = site[: site.rindex(".") + 1]  # "block{l}."
            ln = site[site.rindex(".") + 1 :]  # "ln1" | "ln2"
            next_b = next_w[:-1] + "b"  # ".w1" -> ".b1", ".w" -> ".b"
            if next_w.endswith(".w1"):
                next_b = next_w[:-2] + "b1"
            gamma = m.params[f"{prefix}{ln}.gamma"].data
            beta = m.params[f"{prefix}{ln}.beta"].data
            g, b, w, bias, scalar = reparameterize(
                gamma, beta, m.params[next_w].data, m.params[next_b].data, per_ch
            )
            m.params[f"{prefix}{ln}.gamma"] = Tensor(g, requires_grad=True)
            m.params[f"{prefix}{ln}.beta"] = Tensor(b, requires_grad=True)
            m.params[next_w] = Tensor(w, requires_grad=True)
            m.params[next_b] = Tensor(bias, requires_grad=True)
            act_params[site] = scalar
        else:
            act_params[site] = calibrate(samples, a_bits, PER_LAYER)

    weight_params: dict[str, QuantParams] = {}
    for name, p in m.params.items():
        if any(name.endswith(sfx) for sfx in WEIGHT_SITES_2D):
            weight_params[name] = calibrate(p.data, w_bits, PER_CHANNEL)

    return QuantizedModel(m, act_params, weight_params, w_bits, a_bits)


# ---------------------------------------------------------------------------
# serialization: model container followed by a QuantParams section

_QSECTION_MAGIC = b"DFQQ"


def _write_qparams(f, site: str, qp: QuantParams) -> None:
    sid = site.encode()
    n = qp.scale.size
    f.write(struct.pack("<H", len(sid)))
    f.write(sid)
    f.write(struct.pack("<BBI", 1 if qp.granularity == PER_CHANNEL else 0, qp.bits, n))
    f.write(np.ascontiguousarray(qp.scale, dtype="<f8").tobytes())
    f.write(np.ascontiguousarray(qp.zero_point, dtype="<i4").tobytes())


def _read_qparams(f):
    (slen,) = struct.unpack("<H", _read_exact(f, 2, "site id length"))
    site = _read_exact(f, slen, "site id").decode()
    per_ch, bits, n = struct.unpack("<BBI", _read_exact(f, 6, "qparams header"))
    scale = np.frombuffer(_read_exact(f, 8 * n, "scales"), dtype="<f8")
    zero = np.frombuffer(_read_exact(f, 4 * n, "zero points"), dtype="<i4").astype(np.int64)
    if per_ch:
        qp = QuantParams(bits, scale.copy(), zero, PER_CHANNEL)
    else:
        qp = QuantParams(bits, scale[0].copy(), zero[0], PER_LAYER)
    return site, qp


def save_quantized(qm: QuantizedModel, path) -> None:
    with open(path, "wb") as f:
        write_model_section(f, qm.model)
        f.write(_QSECTION_MAGIC)
        f.write(struct.pack("<BB", qm.w_bits, qm.a_bits))
        records = [("act:" + k, v) for k, v in qm.act_params.items()]
        records += [("w:" + k, v) for k, v in qm.weight_params.items()]
        f.write(struct.pack("<I", len(records)))
        for site, qp in records:
            _write_qparams(f, site, qp)


def load_quantized(path) -> QuantizedModel:
    with open(path, "rb") as f:
        model = read_model_section(f)
        magic = _read_exact(f, 4, "quant section magic")
        if magic != _QSECTION_MAGIC:
            raise FormatError(f"bad quant section magic {magic!r} at offset {f.tell() - 4}")
        w_bits, a_bits = struct.unpack("<BB", _read_exact(f, 2, "bit widths"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        act, wq = {}, {}
        for _ in range(count):
            site, qp = _read_qparams(f)
            if site.startswith("act:"):
                act[site[4:]] = qp
            elif site.startswith("w:"):
                wq[site[2:]] = qp
            else:
                raise FormatError(f"unknown record kind for site {site!r}")
        if f.read(1):
            raise FormatError(f"unexpected trailing bytes at offset {f.tell() - 1}")
    return QuantizedModel(model, act, wq, w_bits, a_bits)
