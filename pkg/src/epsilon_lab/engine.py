"""Minimal 8-bit quantized inference engine.

Tensors carry a leading batch axis. Quantization is per-tensor symmetric
with zero-point 0: ``value ~= data * scale``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .approx_arith import MultiplierModel

WEIGHTED = ("dense", "conv2d")
KINDS = ("dense", "conv2d", "relu", "maxpool2d", "globalavgpool", "flatten")


class ShapeError(ValueError):
    pass


@dataclass
class QuantTensor:
    data: np.ndarray
    scale: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


@dataclass
class AccumTensor:
    data: np.ndarray
    scale: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        if self.data.size and (self.data.max() > 2**31 - 1 or self.data.min() < -(2**31)):
            raise OverflowError("accumulator exceeds 32-bit range")
        self.data = self.data.astype(np.int32)

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


@dataclass
class LayerSpec:
    """One layer. Weighted layers hold int8 weights and int32 bias.

    Dense weights are (out, in); conv weights are (out_c, in_c, k, k).
    ``output_scale=None`` on a weighted layer means it emits raw logits
    as an :class:`AccumTensor` instead of requantizing.
    """

    kind: str
    params: dict = field(default_factory=dict)
    weights: np.ndarray | None = None
    weight_scale: float = 1.0
    bias: np.ndarray | None = None
    output_scale: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            self.params.setdefault("stride", 1)
            self.params.setdefault("padding", 0)
        if self.kind in WEIGHTED:
            if self.weights is None:
                raise ValueError(f"{self.kind} layer requires weights")
            self.weights = np.asarray(self.weights, dtype=np.int8).reshape(self.weight_shape)
            out = self.weight_shape[0]
            self.bias = (
                np.zeros(out, dtype=np.int32) if self.bias is None else np.asarray(self.bias, dtype=np.int32)
            )
            if self.bias.shape != (out,):
                raise ValueError(f"bias must have {out} entries, got {self.bias.shape}")
            if not self.weight_scale > 0:
                raise ValueError("weight scale must be > 0")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def weight_shape(self) -> tuple:
        p = self.params
        if self.kind == "dense":
            return (p["out_features"], p["in_features"])
        if self.kind == "conv2d":
            return (p["out_channels"], p["in_channels"], p["kernel"], p["kernel"])
        return ()

    def copy(self) -> "LayerSpec":
        return LayerSpec(
            kind=self.kind,
            params=dict(self.params),
            weights=None if self.weights is None else self.weights.copy(),
            weight_scale=self.weight_scale,
            bias=None if self.bias is None else self.bias.copy(),
            output_scale=self.output_scale,
            name=self.name,
        )


def dense(in_features, out_features, weights, bias=None, weight_scale=1.0, output_scale=None, name=""):
    return LayerSpec(
        "dense",
        {"in_features": in_features, "out_features": out_features},
        weights=weights,
        weight_scale=weight_scale,
        bias=bias,
        output_scale=output_scale,
        name=name,
    )


def conv2d(in_channels, out_channels, kernel, weights, bias=None, stride=1, padding=0,
           weight_scale=1.0, output_scale=None, name=""):
    return LayerSpec(
        "conv2d",
        {"in_channels": in_channels, "out_channels": out_channels, "kernel": kernel,
         "stride": stride, "padding": padding},
        weights=weights,
        weight_scale=weight_scale,
        bias=bias,
        output_scale=output_scale,
        name=name,
    )


def simple(kind, name="", **params):
    return LayerSpec(kind, params, name=name)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def requantize(acc: np.ndarray, multiplier: float) -> np.ndarray:
    """Scale an accumulator to int8: round half away from zero, then clamp."""
    v = round_half_away(np.asarray(acc, dtype=np.float64) * multiplier)
    return np.clip(v, -128, 127).astype(np.int8)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def output_shape(layer: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape; raises :class:`ShapeError` on mismatch."""
    p = layer.params
    label = layer.name or layer.kind
    if layer.kind == "dense":
        if len(in_shape) != 1 or in_shape[0] != p["in_features"]:
            raise ShapeError(f"layer {label}: expected input ({p['in_features']},), got {tuple(in_shape)}")
        return (p["out_features"],)
    if layer.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != p["in_channels"]:
            raise ShapeError(
                f"layer {label}: expected input ({p['in_channels']}, H, W), got {tuple(in_shape)}"
            )
        k, s, pad = p["kernel"], p.get("stride", 1), p.get("padding", 0)
        oh, ow = _conv_out(in_shape[1], k, s, pad), _conv_out(in_shape[2], k, s, pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {label}: input {tuple(in_shape)} smaller than kernel {k}")
        return (p["out_channels"], oh, ow)
    if layer.kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ShapeError(f"layer {label}: expected (C, H, W) input, got {tuple(in_shape)}")
        s = p["size"]
        if in_shape[1] < s or in_shape[2] < s:
            raise ShapeError(f"layer {label}: input {tuple(in_shape)} smaller than pool {s}")
        return (in_shape[0], in_shape[1] // s, in_shape[2] // s)
    if layer.kind == "globalavgpool":
        if len(in_shape) != 3:
            raise ShapeError(f"layer {label}: expected (C, H, W) input, got {tuple(in_shape)}")
        return (in_shape[0],)
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    return tuple(in_shape)


def op_count(layer: LayerSpec, input_shape: tuple) -> int:
    """Multiplier operations for one sample through ``layer``."""
    out = output_shape(layer, tuple(input_shape))
    if layer.kind == "dense":
        return layer.params["in_features"] * layer.params["out_features"]
    if layer.kind == "conv2d":
        p = layer.params
        return out[1] * out[2] * p["out_channels"] * p["in_channels"] * p["kernel"] ** 2
    return 0


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, OH, OW, C*k*k) patches, channel-major like the weights."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * k * k)


def _weighted_forward(x: QuantTensor, layer: LayerSpec, m: MultiplierModel):
    if layer.kind == "dense":
        acc = m.dot(layer.weights, x.data)
    else:
        p = layer.params
        cols = im2col(x.data, p["kernel"], p.get("stride", 1), p.get("padding", 0))
        n, oh, ow, kk = cols.shape
        acc = m.dot(layer.weights.reshape(p["out_channels"], kk), cols.reshape(-1, kk))
        acc = acc.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)
    bias = layer.bias.astype(np.int64)
    acc = acc + (bias[None, :, None, None] if layer.kind == "conv2d" else bias[None, :])
    acc_scale = x.scale * layer.weight_scale
    if layer.output_scale is None:
        return AccumTensor(acc, acc_scale)
    return QuantTensor(requantize(acc, acc_scale / layer.output_scale), layer.output_scale)


def layer_forward(x, layer: LayerSpec, m: MultiplierModel):
    """Run one layer on a batch (leading axis) of quantized activations."""
    output_shape(layer, x.shape[1:])
    if layer.weighted:
        if not isinstance(x, QuantTensor):
            raise ShapeError(f"layer {layer.name or layer.kind}: weighted layers need int8 input")
        return _weighted_forward(x, layer, m)
    cls = type(x)
    d = x.data
    if layer.kind == "relu":
        return cls(np.maximum(d, 0), x.scale)
    if layer.kind == "flatten":
        return cls(d.reshape(d.shape[0], -1), x.scale)
    if layer.kind == "maxpool2d":
        s = layer.params["size"]
        n, c, h, w = d.shape
        d = d[:, :, : h // s * s, : w // s * s].reshape(n, c, h // s, s, w // s, s)
        return cls(d.max(axis=(3, 5)), x.scale)
    if layer.kind == "globalavgpool":
        n, c, h, w = d.shape
        total = d.astype(np.int64).sum(axis=(2, 3))
        return cls(round_half_away(total / (h * w)).astype(np.int64), x.scale)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def softmax_confidence(logits) -> tuple[np.ndarray, float | np.ndarray]:
    """Softmax over dequantized logits and the max probability.

    Accepts an :class:`AccumTensor` (or anything with ``dequantize``) or a
    plain real array; the last axis holds classes.
    """
    z = logits.dequantize() if hasattr(logits, "dequantize") else np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty logits")
    # Logits far below the max may overflow to -inf here; exp maps them to 0.
    with np.errstate(over="ignore"):
        z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    conf = p.max(axis=-1)
    if conf.ndim == 0:
        conf = float(conf)
    return p, conf


def quantize_input(x: np.ndarray, scale: float) -> QuantTensor:
    """Quantize real-valued inputs to int8 at the given scale."""
    q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / scale), -128, 127)
    return QuantTensor(q.astype(np.int8), scale)


def reference_layer_forward(x, layer: LayerSpec, m: MultiplierModel):
    """Loop-nest oracle: one ``m.multiply`` call per product, Python ints."""
    if not layer.weighted:
        return layer_forward(x, layer, m)
    p = layer.params
    W = layer.weights.astype(int)
    d = x.data.astype(int)
    n = d.shape[0]
    if layer.kind == "dense":
        acc = np.zeros((n, p["out_features"]), dtype=np.int64)
        for b in range(n):
            for o in range(p["out_features"]):
                s = 0
                for i in range(p["in_features"]):
                    s += m.multiply(int(W[o, i]), int(d[b, i]))
                acc[b, o] = s + int(layer.bias[o])
    else:
        k, st, pad = p["kernel"], p.get("stride", 1), p.get("padding", 0)
        _, oh, ow = output_shape(layer, x.shape[1:])
        H, Wd = d.shape[2], d.shape[3]
        acc = np.zeros((n, p["out_channels"], oh, ow), dtype=np.int64)
        for b in range(n):
            for o in range(p["out_channels"]):
                for yy in range(oh):
                    for xx in range(ow):
                        s = 0
                        for c in range(p["in_channels"]):
                            for ky in range(k):
                                for kx in range(k):
                                    iy, ix = yy * st + ky - pad, xx * st + kx - pad
                                    if 0 <= iy < H and 0 <= ix < Wd:
                                        s += m.multiply(int(W[o, c, ky, kx]), int(d[b, c, iy, ix]))
                        acc[b, o, yy, xx] = s + int(layer.bias[o])
    acc_scale = x.scale * layer.weight_scale
    if layer.output_scale is None:
        return AccumTensor(acc, acc_scale)
    factor = acc_scale / layer.output_scale
    out = np.empty(acc.shape, dtype=np.int8)
    for idx, v in np.ndenumerate(acc):
        t = v * factor
        r = math.floor(abs(t) + 0.5) * (1 if t >= 0 else -1)
        out[idx] = max(-128, min(127, r))
    return QuantTensor(out, layer.output_scale)
