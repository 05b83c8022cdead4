"""Multi-exit quantized model graph, inference sessions and model files.

Layer positions are 0-based indices into ``ModelGraph.backbone``; exits are
0-based too, with exit ``N - 1`` being the deepest.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approx_arith import MultiplierModel
from .bits import force_bits
from .engine import (
    AccumTensor,
    LayerSpec,
    QuantTensor,
    layer_forward,
    op_count,
    output_shape,
    quantize_input,
    softmax_confidence,
)

FORMAT_VERSION = 1
W8_MAGIC = b"EPW8"
_W8_HEADER = struct.Struct("<4sI")


class ModelError(ValueError):
    pass


class ModelFormatError(ModelError):
    pass


@dataclass
class ExitHead:
    after: int
    layers: list[LayerSpec] = field(default_factory=list)


@dataclass
class StuckBits:
    """Bit forcing re-asserted on every write to a layer (hard-stuck faults)."""

    index: np.ndarray
    bit: np.ndarray
    polarity: np.ndarray


@dataclass
class ModelGraph:
    backbone: list[LayerSpec]
    exits: list[ExitHead]
    class_count: int
    input_shape: tuple
    input_scale: float
    name: str = "model"
    seed: int | None = None
    stuck: dict[int, list[StuckBits]] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self):
        if not self.exits:
            raise ModelError("model needs at least one exit")
        after = [e.after for e in self.exits]
        if any(b <= a for a, b in zip(after, after[1:])):
            raise ModelError(f"exit attachment positions must strictly increase, got {after}")
        if after[-1] != len(self.backbone) - 1:
            raise ModelError("final exit must attach after the last backbone layer")
        shapes = self.backbone_shapes()
        for i, e in enumerate(self.exits):
            s = shapes[e.after]
            for layer in e.layers:
                s = output_shape(layer, s)
            if s != (self.class_count,):
                raise ModelError(f"exit {i} produces shape {s}, expected ({self.class_count},)")

    def backbone_shapes(self) -> list[tuple]:
        shapes, s = [], self.input_shape
        for layer in self.backbone:
            s = output_shape(layer, s)
            shapes.append(s)
        return shapes

    @property
    def n_exits(self) -> int:
        return len(self.exits)

    @property
    def weighted_positions(self) -> list[int]:
        return [i for i, layer in enumerate(self.backbone) if layer.weighted]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------ ops

    def layer_ops(self) -> list[int]:
        shapes = [self.input_shape] + self.backbone_shapes()
        return [op_count(layer, shapes[i]) for i, layer in enumerate(self.backbone)]

    def head_ops(self) -> list[int]:
        shapes = self.backbone_shapes()
        out = []
        for e in self.exits:
            s, total = shapes[e.after], 0
            for layer in e.layers:
                total += op_count(layer, s)
                s = output_shape(layer, s)
            out.append(total)
        return out

    def exit_path_ops(self, i: int) -> int:
        """Ops to reach exit ``i`` from scratch, including heads 0..i on the way."""
        lo = self.layer_ops()
        return sum(lo[: self.exits[i].after + 1]) + sum(self.head_ops()[: i + 1])

    def full_ops(self) -> int:
        """Full backbone plus the deepest head only."""
        return sum(self.layer_ops()) + self.head_ops()[-1]


def get_layer_weights(F: ModelGraph, l: int) -> np.ndarray:
    if not 0 <= l < len(F.backbone):
        raise ModelError(f"layer index {l} out of range 0..{len(F.backbone) - 1}")
    layer = F.backbone[l]
    if not layer.weighted:
        raise ModelError(f"layer {l} ({layer.kind}) has no weights")
    return layer.weights


def update_layer(F: ModelGraph, l: int, W) -> ModelGraph:
    """Write weights into layer ``l`` (in place). Hard-stuck bits are re-forced."""
    current = get_layer_weights(F, l)
    W = np.asarray(W)
    if W.size != current.size:
        raise ModelError(f"layer {l}: expected {current.size} weights, got {W.size}")
    new = W.astype(np.int8).reshape(current.shape)
    for s in F.stuck.get(l, []):
        new = force_bits(new, s.index, s.bit, s.polarity)
    F.backbone[l].weights = new
    return F


def fault_points(F: ModelGraph) -> dict[str, int]:
    """Map FP1..FP4 to backbone positions of weighted layers.

    FP4 is the first weighted layer, FP1 the last; FP3 and FP2 sit at
    one and two thirds of the way, rounding ties toward the shallower layer.
    """
    w = F.weighted_positions
    if len(w) < 4:
        raise ModelError(f"fault points need at least 4 weighted layers, model has {len(w)}")
    span = len(w) - 1

    def at(frac):
        return int(np.ceil(span * frac - 0.5))

    return {"FP4": w[0], "FP3": w[at(1 / 3)], "FP2": w[at(2 / 3)], "FP1": w[-1]}


# ------------------------------------------------------------- inference


class InferenceSession:
    """Caches backbone activations for one batch so exits reuse the prefix.

    ``ops`` accumulates per-sample multiplier operations actually executed.
    """

    def __init__(self, F: ModelGraph, x, m: MultiplierModel):
        self.F = F
        self.m = m
        if isinstance(x, QuantTensor):
            self.x = x
        else:
            x = np.asarray(x, dtype=np.float64)
            if x.shape == F.input_shape:
                x = x[None]
            self.x = quantize_input(x, F.input_scale)
        if tuple(self.x.shape[1:]) != F.input_shape:
            raise ModelError(f"input shape {tuple(self.x.shape[1:])} != model input {F.input_shape}")
        self.acts: list = []
        self.ops = 0
        self._layer_ops = F.layer_ops()
        self._head_ops = F.head_ops()

    def invalidate(self, position: int = 0):
        del self.acts[position:]

    def backbone_output(self, position: int):
        while len(self.acts) <= position:
            p = len(self.acts)
            inp = self.x if p == 0 else self.acts[-1]
            self.acts.append(layer_forward(inp, self.F.backbone[p], self.m))
            self.ops += self._layer_ops[p]
        return self.acts[position]

    def exit_logits(self, i: int) -> AccumTensor:
        e = self.F.exits[i]
        t = self.backbone_output(e.after)
        for layer in e.layers:
            t = layer_forward(t, layer, self.m)
        self.ops += self._head_ops[i]
        if not isinstance(t, AccumTensor):
            t = AccumTensor(t.data.astype(np.int64), t.scale)
        return t

    def forward_exit(self, i: int):
        before = self.ops
        logits = self.exit_logits(i)
        probs, conf = softmax_confidence(logits)
        return logits, probs, conf, self.ops - before


def forward_exit(F: ModelGraph, x, i: int, m: MultiplierModel, session: InferenceSession | None = None):
    """Logits, confidence and newly spent ops for exit ``i``.

    Pass the same ``session`` across calls to reuse computed prefixes.
    """
    s = session or InferenceSession(F, x, m)
    logits, _, conf, ops = s.forward_exit(i)
    return logits, conf, ops


def predict_all_exits(F: ModelGraph, X, m: MultiplierModel, batch_size: int = 500):
    """Probabilities for every exit over a dataset: array (N_exits, n, C)."""
    X = np.asarray(X)
    out = np.empty((F.n_exits, len(X), F.class_count))
    for s in range(0, len(X), batch_size):
        sess = InferenceSession(F, X[s : s + batch_size], m)
        for i in range(F.n_exits):
            out[i, s : s + batch_size] = sess.forward_exit(i)[1]
    return out


def predict_exit(F: ModelGraph, X, i: int, m: MultiplierModel, batch_size: int = 500):
    X = np.asarray(X)
    out = np.empty((len(X), F.class_count))
    for s in range(0, len(X), batch_size):
        sess = InferenceSession(F, X[s : s + batch_size], m)
        out[s : s + batch_size] = sess.forward_exit(i)[1]
    return out


# --------------------------------------------------------------- file io

_PARAM_KEYS = {
    "dense": ("in_features", "out_features"),
    "conv2d": ("in_channels", "out_channels", "kernel", "stride", "padding"),
    "maxpool2d": ("size",),
    "relu": (),
    "flatten": (),
    "globalavgpool": (),
}


def _layer_record(layer: LayerSpec, blob: bytearray) -> dict:
    rec = {"kind": layer.kind, "name": layer.name}
    for key in _PARAM_KEYS[layer.kind]:
        rec[key] = layer.params.get(key, 1 if key == "stride" else 0)
    if layer.weighted:
        w = layer.weights.astype("<i1").tobytes()
        rec["weights"] = {"offset": len(blob), "length": len(w), "shape": list(layer.weights.shape)}
        blob += w
        b = layer.bias.astype("<i4").tobytes()
        rec["bias"] = {"offset": len(blob), "length": len(b)}
        blob += b
        rec["weight_scale"] = repr(float(layer.weight_scale))
        rec["output_scale"] = None if layer.output_scale is None else repr(float(layer.output_scale))
    return rec


def save_model(F: ModelGraph, path) -> None:
    """Write ``path`` (.json topology) and the sibling ``.w8`` weight file."""
    path = Path(path).with_suffix(".json")
    blob = bytearray(_W8_HEADER.pack(W8_MAGIC, FORMAT_VERSION))
    doc = {
        "format_version": FORMAT_VERSION,
        "name": F.name,
        "class_count": F.class_count,
        "seed": F.seed,
        "input_shape": list(F.input_shape),
        "input_scale": repr(float(F.input_scale)),
        "layers": [_layer_record(layer, blob) for layer in F.backbone],
        "exits": [{"after": e.after, "layers": [_layer_record(x, blob) for x in e.layers]} for e in F.exits],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    path.with_suffix(".w8").write_bytes(bytes(blob))


def _block(raw: bytes, ref: dict, what: str) -> bytes:
    off, n = int(ref["offset"]), int(ref["length"])
    if off < _W8_HEADER.size or off + n > len(raw):
        raise ModelFormatError(f"{what}: block [{off}, {off + n}) outside weight file of {len(raw)} bytes")
    return raw[off : off + n]


def _layer_from_record(rec: dict, raw: bytes) -> LayerSpec:
    kind = rec["kind"]
    if kind not in _PARAM_KEYS:
        raise ModelFormatError(f"unknown layer kind {kind!r}")
    params = {k: rec[k] for k in _PARAM_KEYS[kind]}
    layer_name = rec.get("name", "")
    if kind not in ("dense", "conv2d"):
        return LayerSpec(kind, params, name=layer_name)
    wref = rec["weights"]
    w = np.frombuffer(_block(raw, wref, f"{layer_name} weights"), dtype="<i1").astype(np.int8)
    b = np.frombuffer(_block(raw, rec["bias"], f"{layer_name} bias"), dtype="<i4").astype(np.int32)
    if w.size != int(np.prod(wref["shape"])):
        raise ModelFormatError(f"{layer_name}: weight block at offset {wref['offset']} has wrong length")
    out_scale = rec.get("output_scale")
    return LayerSpec(
        kind,
        params,
        weights=w.reshape(wref["shape"]),
        weight_scale=float(rec["weight_scale"]),
        bias=b,
        output_scale=None if out_scale is None else float(out_scale),
        name=layer_name,
    )


def load_model(path) -> ModelGraph:
    path = Path(path).with_suffix(".json")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {doc.get('format_version')!r}")
    raw = path.with_suffix(".w8").read_bytes()
    if len(raw) < _W8_HEADER.size:
        raise ModelFormatError(f"weight file truncated at offset {len(raw)}")
    magic, version = _W8_HEADER.unpack_from(raw, 0)
    if magic != W8_MAGIC:
        raise ModelFormatError(f"bad weight file magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"weight file version {version} at offset 4 does not match {FORMAT_VERSION}")
    return ModelGraph(
        backbone=[_layer_from_record(r, raw) for r in doc["layers"]],
        exits=[ExitHead(e["after"], [_layer_from_record(r, raw) for r in e["layers"]]) for e in doc["exits"]],
        class_count=doc["class_count"],
        input_shape=tuple(doc["input_shape"]),
        input_scale=float(doc["input_scale"]),
        name=doc.get("name", "model"),
        seed=doc.get("seed"),
    )


def models_equal(a: ModelGraph, b: ModelGraph) -> bool:
    """Bit-exact comparison of topology, weights, biases and scales."""

    def same(x: LayerSpec, y: LayerSpec):
        if (x.kind, x.params, x.name) != (y.kind, y.params, y.name):
            return False
        if not x.weighted:
            return True
        return (
            np.array_equal(x.weights, y.weights)
            and np.array_equal(x.bias, y.bias)
            and x.weight_scale == y.weight_scale
            and x.output_scale == y.output_scale
        )

    if (a.class_count, a.input_shape, a.input_scale) != (b.class_count, b.input_shape, b.input_scale):
        return False
    if len(a.backbone) != len(b.backbone) or len(a.exits) != len(b.exits):
        return False
    if not all(same(x, y) for x, y in zip(a.backbone, b.backbone)):
        return False
    for ea, eb in zip(a.exits, b.exits):
        if ea.after != eb.after or len(ea.layers) != len(eb.layers):
            return False
        if not all(same(x, y) for x, y in zip(ea.layers, eb.layers)):
            return False
    return True
