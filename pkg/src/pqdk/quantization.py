"""Unsigned 8-bit affine quantization: observers, fake quant with STE,
integer kernels and the integer inference model.

A real value ``x`` maps to ``q = clip(rint(x / s) + z, 0, 255)`` and back to
``s * (q - z)``.  ``np.rint`` rounds half to even, which is used everywhere,
including requantization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

QMIN, QMAX = 0, 255
MAX_REDUCTION = 2**15


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point must lie in [0, 255], got {self.zero_point}")

    def to_dict(self) -> dict:
        return {"scale": self.scale, "zero_point": self.zero_point}


def qparams_from_range(lo: float, hi: float) -> QuantParams:
    """Min/max calibration rule.  The range is widened to contain 0 so that
    zero (padding, pruned weights) is exactly representable.

    A degenerate range can then only be the all-zero tensor; it gets the
    scale floor ``max(|v|, 1) / 255`` and a centred zero point.
    """
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return QuantParams(max(abs(lo), 1.0) / 255.0, 128)
    scale = (hi - lo) / 255.0
    z = int(np.clip(np.rint(-lo * 255.0 / (hi - lo)), QMIN, QMAX))
    return QuantParams(scale, z)


def tensor_qparams(x: np.ndarray) -> QuantParams:
    return qparams_from_range(x.min(), x.max())


def quantize(x, qp: QuantParams):
    q = np.clip(np.rint(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point, QMIN, QMAX)
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.uint8)


def dequantize(q, qp: QuantParams):
    x = (np.asarray(q, dtype=np.float64) - qp.zero_point) * qp.scale
    if np.ndim(x) == 0:
        return float(x)
    return x


def fake_quant_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, qp), qp).astype(x.dtype)


def quantize_kept(x: np.ndarray, qp: QuantParams, keep: np.ndarray | None) -> np.ndarray:
    """Quantize weights so that no kept coordinate lands on the zero point.

    A kept weight that would round to ``z`` moves one grid step towards its
    sign, keeping the nonzero count equal to the mask popcount.
    """
    q = quantize(x, qp)
    if keep is None:
        return q
    hit = keep & (q == qp.zero_point)
    if np.any(hit):
        up = np.where(np.asarray(x) >= 0, 1, -1)
        up = np.where(qp.zero_point + up > QMAX, -1, np.where(qp.zero_point + up < QMIN, 1, up))
        q = np.where(hit, qp.zero_point + up, q).astype(np.uint8)
    return q


def fake_quant_kept(x: np.ndarray, qp: QuantParams, keep: np.ndarray | None) -> np.ndarray:
    return dequantize(quantize_kept(x, qp, keep), qp).astype(x.dtype)


def in_range_mask(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Where ``x / s + z`` lies inside [0, 255] before clipping."""
    u = np.asarray(x, dtype=np.float64) / qp.scale + qp.zero_point
    return (u >= QMIN) & (u <= QMAX)


@dataclass
class QuantTensor:
    data: np.ndarray  # uint8
    qparams: QuantParams

    def __post_init__(self):
        if self.data.dtype != np.uint8:
            raise TypeError(f"QuantTensor data must be uint8, got {self.data.dtype}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @classmethod
    def from_float(cls, x: np.ndarray, qp: QuantParams, keep: np.ndarray | None = None) -> "QuantTensor":
        return cls(np.asarray(quantize_kept(x, qp, keep), dtype=np.uint8), qp)

    def dequantize(self) -> np.ndarray:
        return dequantize(self.data, self.qparams)

    def nonzero(self) -> int:
        return int(np.count_nonzero(self.data != self.qparams.zero_point))


class Observer:
    """Running min/max; the range only ever widens."""

    def __init__(self):
        self.min = math.inf
        self.max = -math.inf

    def update(self, x: np.ndarray):
        self.min = min(self.min, float(np.min(x)))
        self.max = max(self.max, float(np.max(x)))

    @property
    def ready(self) -> bool:
        return self.min <= self.max

    def qparams(self) -> QuantParams:
        if not self.ready:
            raise RuntimeError("observer has seen no data")
        return qparams_from_range(self.min, self.max)


class EMAObserver(Observer):
    """Exponential moving average of per-batch min/max (first batch taken as-is)."""

    def __init__(self, decay: float = 0.99):
        super().__init__()
        self.decay = decay

    def update(self, x: np.ndarray):
        lo, hi = float(np.min(x)), float(np.max(x))
        if not self.ready:
            self.min, self.max = lo, hi
        else:
            self.min = self.decay * self.min + (1 - self.decay) * lo
            self.max = self.decay * self.max + (1 - self.decay) * hi


@dataclass
class FakeQuantNode:
    qparams: QuantParams | None = None
    enabled: bool = True


def ste_backward(upstream: np.ndarray, x: np.ndarray, node: FakeQuantNode) -> np.ndarray:
    """Clipped straight-through estimator: identity inside the grid range, zero outside."""
    if not node.enabled:
        return upstream
    return upstream * in_range_mask(x, node.qparams)


def fake_quant_forward(x: Tensor, node: FakeQuantNode, keep: np.ndarray | None = None) -> Tensor:
    """``dequantize(quantize(x))`` forward, clipped STE backward."""
    if not node.enabled:
        return x
    if node.qparams is None:
        raise RuntimeError("fake-quant node has no qparams")
    xd = x.data
    return ag.custom(x, fake_quant_kept(xd, node.qparams, keep), lambda g: ste_backward(g, xd, node))


class QuantHooks:
    """Fake-quant hooks passed to ``Model.forward``.

    Weights get fresh min/max qparams on every call.  Activations use EMA
    observers while ``observing`` is set and frozen qparams otherwise.
    """

    def __init__(self, model, ema_decay: float = 0.99, enabled: bool = True, masks: dict | None = None):
        self.enabled = enabled
        self.masks = masks or {}
        self.observing = True
        self.weight_nodes = {name: FakeQuantNode() for name in model.maskable()}
        self.act_nodes = {site: FakeQuantNode() for site, _ in model.sites}
        self.observers = {site: EMAObserver(ema_decay) for site, _ in model.sites}

    def weight(self, name: str, p: Tensor) -> Tensor:
        if not self.enabled:
            return p
        node = self.weight_nodes[name]
        node.qparams = tensor_qparams(p.data)
        return fake_quant_forward(p, node, self.masks.get(name))

    def activation(self, site: str, t: Tensor) -> Tensor:
        if not self.enabled:
            return t
        node = self.act_nodes[site]
        if self.observing:
            obs = self.observers[site]
            obs.update(t.data)
            node.qparams = obs.qparams()
        return fake_quant_forward(t, node)

    def freeze(self):
        self.observing = False

    def activation_qparams(self) -> dict[str, QuantParams]:
        return {site: node.qparams for site, node in self.act_nodes.items()}

    def set_activation_qparams(self, qps: dict[str, QuantParams]):
        for site, qp in qps.items():
            self.act_nodes[site].qparams = qp
            self.observers[site].min = min(dequantize(QMIN, qp), 0.0)
            self.observers[site].max = max(dequantize(QMAX, qp), 0.0)


class _ObserveHooks:
    def __init__(self, model):
        self.observers = {site: Observer() for site, _ in model.sites}

    def weight(self, name, p):
        return p

    def activation(self, site, t):
        self.observers[site].update(t.data)
        return t


def calibrate_minmax(model, calibration_batches) -> dict[str, QuantParams]:
    """Post-training calibration: min/max qparams for every weight and activation site."""
    hooks = _ObserveHooks(model)
    seen = 0
    for x in calibration_batches:
        model.predict_logits(x, hooks)
        seen += 1
    if not seen:
        raise ValueError("calibration needs at least one batch")
    out = {name: tensor_qparams(p.data) for name, p in model.maskable().items()}
    out.update({site: obs.qparams() for site, obs in hooks.observers.items()})
    return out


# -- integer kernels -----------------------------------------------------------

def quantize_multiplier(m: float) -> tuple[int, int]:
    """Represent ``m`` as ``mantissa / 2**shift`` with a 31-bit mantissa in [2**30, 2**31)."""
    if not m > 0:
        raise ValueError(f"requantization multiplier must be positive, got {m}")
    frac, exp = math.frexp(m)
    mant = int(round(frac * 2**31))
    if mant == 2**31:
        mant //= 2
        exp += 1
    shift = 31 - exp
    if shift < 1:
        raise ValueError(f"requantization multiplier {m} too large")
    return mant, shift


def rounding_shift(v: np.ndarray, shift: int) -> np.ndarray:
    """``v / 2**shift`` rounded half to even, in int64."""
    v = v.astype(np.int64)
    if shift > 62:
        return np.zeros_like(v)
    q = v >> shift
    rem = v - (q << shift)
    half = np.int64(1) << np.int64(shift - 1)
    return q + ((rem > half) | ((rem == half) & ((q & 1) == 1)))


def requantize(acc: np.ndarray, mant: int, shift: int, out_qp: QuantParams, relu: bool = False) -> np.ndarray:
    q = rounding_shift(acc.astype(np.int64) * np.int64(mant), shift) + out_qp.zero_point
    lo = out_qp.zero_point if relu else QMIN
    return np.clip(q, lo, QMAX).astype(np.uint8)


def bias_to_int32(bias: np.ndarray, in_qp: QuantParams, w_qp: QuantParams) -> np.ndarray:
    b = np.rint(np.asarray(bias, np.float64) / (in_qp.scale * w_qp.scale))
    return np.clip(b, -2**31, 2**31 - 1).astype(np.int32)


def _centered(q: QuantTensor) -> np.ndarray:
    return q.data.astype(np.int32) - np.int32(q.qparams.zero_point)


def int8_linear(xq: QuantTensor, wq: QuantTensor, bias_i32, out_qp: QuantParams,
                relu: bool = False) -> QuantTensor:
    """``acc = sum_i (xq - zx)(wq - zw) + bias`` in int32, then fixed-point requantization."""
    if xq.data.ndim != 2 or wq.data.ndim != 2 or xq.shape[1] != wq.shape[1]:
        raise ag.ShapeError(f"int8_linear: input {xq.shape} incompatible with weight {wq.shape}")
    if xq.shape[1] > MAX_REDUCTION:
        raise ValueError(f"int8_linear: reduction length {xq.shape[1]} exceeds {MAX_REDUCTION}")
    acc = _centered(xq) @ _centered(wq).T
    acc = acc.astype(np.int64)
    if bias_i32 is not None:
        acc += np.asarray(bias_i32, np.int64)
    mant, shift = quantize_multiplier(xq.qparams.scale * wq.qparams.scale / out_qp.scale)
    return QuantTensor(requantize(acc, mant, shift, out_qp, relu), out_qp)


def int8_conv2d(xq: QuantTensor, wq: QuantTensor, bias_i32, out_qp: QuantParams,
                stride: int = 1, pad: int = 0, relu: bool = False) -> QuantTensor:
    """Integer cross-correlation with the same accumulation and requantization as :func:`int8_linear`.

    Padding uses the input zero point, i.e. real zero.
    """
    bsz, c, h, w = xq.shape
    f, cw, k, kw = wq.shape
    if cw != c or k != kw:
        raise ag.ShapeError(f"int8_conv2d: input {xq.shape} incompatible with weight {wq.shape}")
    if c * k * k > MAX_REDUCTION:
        raise ValueError(f"int8_conv2d: reduction length {c * k * k} exceeds {MAX_REDUCTION}")
    ho, wo = ag.conv_output_size(h, k, stride, pad), ag.conv_output_size(w, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ag.ShapeError(f"int8_conv2d: kernel {k} too large for input {h}x{w} with pad {pad}")
    xc = _centered(xq).transpose(0, 2, 3, 1)  # NHWC
    if pad:
        xc = np.pad(xc, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    wc = _centered(wq)
    acc = np.zeros((bsz, ho, wo, f), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            xs = xc[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            acc += xs @ wc[:, :, i, j].T
    acc = acc.astype(np.int64)
    if bias_i32 is not None:
        acc += np.asarray(bias_i32, np.int64)
    mant, shift = quantize_multiplier(xq.qparams.scale * wq.qparams.scale / out_qp.scale)
    out = requantize(acc, mant, shift, out_qp, relu)
    return QuantTensor(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), out_qp)


def maxpool_u8(q: QuantTensor, k: int = 2) -> QuantTensor:
    bsz, c, h, w = q.shape
    ho, wo = h // k, w // k
    win = q.data[:, :, :ho * k, :wo * k].reshape(bsz, c, ho, k, wo, k)
    return QuantTensor(win.max(axis=(3, 5)), q.qparams)


@dataclass
class IntModel:
    """Integer-only inference graph produced by :func:`convert_to_int8`."""

    topology: dict
    weights: dict[str, QuantTensor]
    biases: dict[str, np.ndarray]  # float32, as stored
    act_qparams: dict[str, QuantParams]
    bias_i32: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        layers = self.topology["layers"]
        prev = "input"
        for i, spec in enumerate(layers):
            if spec["type"] in ("conv", "linear"):
                name = spec["name"]
                self.bias_i32[name] = bias_to_int32(
                    self.biases[name + ".bias"], self.act_qparams[prev], self.weights[name + ".weight"].qparams)
                prev = name + ".out"

    def forward_q(self, x: np.ndarray) -> QuantTensor:
        q = QuantTensor.from_float(x, self.act_qparams["input"])
        layers = self.topology["layers"]
        i = 0
        while i < len(layers):
            spec = layers[i]
            t = spec["type"]
            if t in ("conv", "linear"):
                name = spec["name"]
                fused = i + 1 < len(layers) and layers[i + 1]["type"] == "relu"
                out_qp = self.act_qparams[name + ".out"]
                wq = self.weights[name + ".weight"]
                if t == "conv":
                    q = int8_conv2d(q, wq, self.bias_i32[name], out_qp, spec["stride"], spec["pad"], relu=fused)
                else:
                    q = int8_linear(q, wq, self.bias_i32[name], out_qp, relu=fused)
                i += 2 if fused else 1
                continue
            if t == "maxpool":
                q = maxpool_u8(q, spec["k"])
            elif t == "flatten":
                q = QuantTensor(q.data.reshape(q.shape[0], -1), q.qparams)
            elif t == "relu":
                q = QuantTensor(np.maximum(q.data, np.uint8(q.qparams.zero_point)), q.qparams)
            i += 1
        return q

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward_q(x).dequantize()

    __call__ = predict_logits


def convert_to_int8(model, qparams: dict[str, QuantParams]) -> IntModel:
    """Freeze a float model into integer weights; every weight and activation site needs qparams."""
    needed = list(model.maskable()) + [site for site, _ in model.sites]
    missing = [k for k in needed if k not in qparams]
    if missing:
        raise KeyError(f"missing qparams for {missing}")
    weights = {name: QuantTensor.from_float(p.data, qparams[name]) for name, p in model.maskable().items()}
    biases = {name: p.data.copy() for name, p in model.params.items() if name.endswith(".bias")}
    acts = {site: qparams[site] for site, _ in model.sites}
    return IntModel(model.topology(), weights, biases, acts)


# -- size and noise accounting ------------------------------------------------

def compression_estimate(rho: float, bits_from: int = 32, bits_to: int = 8) -> float:
    """Idealized size reduction ``(bits_from / bits_to) / (1 - rho)``, ignoring sparse-storage overhead."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return (bits_from / bits_to) / (1.0 - rho)


def quant_noise_bound(active_count: int, delta: float) -> float:
    """Expected squared rounding error of ``active_count`` weights under a uniform error model."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    return delta * delta / 12.0 * active_count
