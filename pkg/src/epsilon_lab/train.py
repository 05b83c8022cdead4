"""Float training of multi-exit networks and post-training quantization.

An architecture is a plain dict::

    {"name": ..., "input_shape": (C, H, W) or (F,), "class_count": C,
     "backbone": [layer dicts], "exits": [{"after": pos, "head": [layer dicts]}]}

where a layer dict is ``{"kind": "conv2d", "in_channels": 1, ...}``.
Training minimizes the unweighted sum of per-exit cross-entropies with
plain mini-batch SGD.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import LayerSpec, im2col, round_half_away
from .model import ExitHead, ModelGraph

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch


def default_cnn_arch(class_count: int = 10) -> dict:
    """Four weighted layers (two conv, two dense) with an exit after each."""
    return {
        "name": "cnn4",
        "input_shape": (1, 28, 28),
        "class_count": class_count,
        "backbone": [
            {"kind": "conv2d", "in_channels": 1, "out_channels": 8, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "relu"},
            {"kind": "maxpool2d", "size": 2},
            {"kind": "conv2d", "in_channels": 8, "out_channels": 16, "kernel": 3, "stride": 1, "padding": 0},
            {"kind": "relu"},
            {"kind": "maxpool2d", "size": 3},
            {"kind": "flatten"},
            {"kind": "dense", "in_features": 256, "out_features": 64},
            {"kind": "relu"},
            {"kind": "dense", "in_features": 64, "out_features": class_count},
        ],
        "exits": [
            {"after": 2, "head": [{"kind": "maxpool2d", "size": 2}, {"kind": "flatten"},
                                  {"kind": "dense", "in_features": 392, "out_features": class_count}]},
            {"after": 5, "head": [{"kind": "flatten"},
                                  {"kind": "dense", "in_features": 256, "out_features": class_count}]},
            {"after": 8, "head": [{"kind": "dense", "in_features": 64, "out_features": class_count}]},
            {"after": 9, "head": []},
        ],
    }


def mlp_arch(in_features: int, class_count: int, hidden=(16, 16, 16), name: str = "mlp") -> dict:
    """Dense stack with an exit after every hidden block plus the classifier."""
    backbone, exits, width = [], [], in_features
    for h in hidden:
        backbone += [{"kind": "dense", "in_features": width, "out_features": h}, {"kind": "relu"}]
        exits.append({"after": len(backbone) - 1,
                      "head": [{"kind": "dense", "in_features": h, "out_features": class_count}]})
        width = h
    backbone.append({"kind": "dense", "in_features": width, "out_features": class_count})
    exits.append({"after": len(backbone) - 1, "head": []})
    return {"name": name, "input_shape": (in_features,), "class_count": class_count,
            "backbone": backbone, "exits": exits}


# ----------------------------------------------------------- float layers


def _wshape(d: dict) -> tuple:
    if d["kind"] == "dense":
        return (d["out_features"], d["in_features"])
    return (d["out_channels"], d["in_channels"], d["kernel"], d["kernel"])


@dataclass
class FloatModel:
    arch: dict
    backbone: list[dict]
    heads: list[list[dict]]
    history: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, arch: dict, seed: int) -> "FloatModel":
        rng = np.random.default_rng(seed)

        def build(d):
            d = dict(d)
            if d["kind"] in ("dense", "conv2d"):
                shape = _wshape(d)
                fan_in = int(np.prod(shape[1:]))
                d["W"] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=shape)
                d["b"] = np.zeros(shape[0])
            return d

        return cls(arch, [build(d) for d in arch["backbone"]], [[build(d) for d in e["head"]] for e in arch["exits"]])

    def weighted_layers(self) -> list[dict]:
        return [d for d in self.backbone if "W" in d] + [d for h in self.heads for d in h if "W" in d]

    def copy(self) -> "FloatModel":
        return copy.deepcopy(self)


def _forward(d: dict, x: np.ndarray):
    k = d["kind"]
    if k == "dense":
        return x @ d["W"].T + d["b"], x
    if k == "conv2d":
        cols = im2col(x, d["kernel"], d.get("stride", 1), d.get("padding", 0))
        n, oh, ow, kk = cols.shape
        y = cols.reshape(-1, kk) @ d["W"].reshape(d["out_channels"], kk).T + d["b"]
        return y.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2), (x.shape, cols)
    if k == "relu":
        return np.maximum(x, 0), x > 0
    if k == "flatten":
        return x.reshape(len(x), -1), x.shape
    if k == "maxpool2d":
        s = d["size"]
        n, c, h, w = x.shape
        xr = x[:, :, : h // s * s, : w // s * s].reshape(n, c, h // s, s, w // s, s)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        am = xr.argmax(axis=-1)
        return np.take_along_axis(xr, am[..., None], -1)[..., 0], (x.shape, am)
    if k == "globalavgpool":
        return x.mean(axis=(2, 3)), x.shape
    raise ValueError(f"unknown layer kind {k!r}")


def _backward(d: dict, cache, dy: np.ndarray, grads: dict):
    k = d["kind"]
    if k == "dense":
        x = cache
        grads["W"] = dy.T @ x
        grads["b"] = dy.sum(axis=0)
        return dy @ d["W"]
    if k == "conv2d":
        xshape, cols = cache
        n, oh, ow, kk = cols.shape
        o = d["out_channels"]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        grads["W"] = (dy2.T @ cols.reshape(-1, kk)).reshape(d["W"].shape)
        grads["b"] = dy2.sum(axis=0)
        dcols = (dy2 @ d["W"].reshape(o, kk)).reshape(n, oh, ow, d["in_channels"], d["kernel"], d["kernel"])
        s, pad, kern = d.get("stride", 1), d.get("padding", 0), d["kernel"]
        _, c, h, w = xshape
        dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        for ky in range(kern):
            for kx in range(kern):
                dx[:, :, ky : ky + s * oh : s, kx : kx + s * ow : s] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        return dx[:, :, pad : pad + h, pad : pad + w]
    if k == "relu":
        return dy * cache
    if k == "flatten":
        return dy.reshape(cache)
    if k == "maxpool2d":
        (n, c, h, w), am = cache
        s = d["size"]
        g = np.zeros(am.shape + (s * s,))
        np.put_along_axis(g, am[..., None], dy[..., None], -1)
        g = g.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s * s, w // s * s)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : h // s * s, : w // s * s] = g
        return dx
    if k == "globalavgpool":
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).copy()
    raise ValueError(f"unknown layer kind {k!r}")


def _softmax_xent(z: np.ndarray, y: np.ndarray):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1
    return loss, dz / n, logp


def forward_float(fm: FloatModel, X: np.ndarray, keep: bool = False):
    """Per-exit logits, plus caches when ``keep`` is set."""
    caches_b, acts, h = [], [], X
    for d in fm.backbone:
        h, c = _forward(d, h)
        caches_b.append(c if keep else None)
        acts.append(h)
    logits, caches_h = [], []
    for e, head in zip(fm.arch["exits"], fm.heads):
        t, hc = acts[e["after"]], []
        for d in head:
            t, c = _forward(d, t)
            hc.append(c if keep else None)
        logits.append(t)
        caches_h.append(hc)
    return logits, (caches_b, caches_h, acts)


def loss_and_grads(fm: FloatModel, X: np.ndarray, y: np.ndarray):
    """Summed per-exit cross-entropy and gradients keyed by layer id."""
    logits, (caches_b, caches_h, acts) = forward_float(fm, X, keep=True)
    total = 0.0
    grads: dict[int, dict] = {}
    upstream = [None] * len(fm.backbone)
    for e, head, hc, z in zip(fm.arch["exits"], fm.heads, caches_h, logits):
        loss, dz, _ = _softmax_xent(z, y)
        total += loss
        g = dz
        for d, c in zip(reversed(head), reversed(hc)):
            lg = {}
            g = _backward(d, c, g, lg)
            if lg:
                grads[id(d)] = lg
        p = e["after"]
        upstream[p] = g if upstream[p] is None else upstream[p] + g
    g = None
    for p in range(len(fm.backbone) - 1, -1, -1):
        if upstream[p] is not None:
            g = upstream[p] if g is None else g + upstream[p]
        if g is None:
            continue
        lg = {}
        g = _backward(fm.backbone[p], caches_b[p], g, lg)
        if lg:
            grads[id(fm.backbone[p])] = lg
    return total, grads


def exit_accuracy(fm: FloatModel, X: np.ndarray, y: np.ndarray, batch: int = 1000) -> list[float]:
    correct = np.zeros(len(fm.heads))
    for s in range(0, len(X), batch):
        logits, _ = forward_float(fm, X[s : s + batch])
        correct += [np.sum(z.argmax(axis=1) == y[s : s + batch]) for z in logits]
    return list(correct / len(X))


def train_multiexit(arch: dict, train: Dataset, epochs: int, lr: float, seed: int,
                    batch_size: int = 32) -> FloatModel:
    fm = FloatModel.init(arch, seed)
    rng = np.random.default_rng(seed + 1)
    X, y = np.asarray(train.images), np.asarray(train.labels)
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        running, batches = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            # Overflow shows up as a non-finite loss, checked right below.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(fm, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch, loss)
            running += loss
            batches += 1
            if lr:
                for d in fm.weighted_layers():
                    g = grads[id(d)]
                    d["W"] -= lr * g["W"]
                    d["b"] -= lr * g["b"]
        fm.history.append(running / max(batches, 1))
        log.info("epoch %d loss %.4f", epoch, fm.history[-1])
    fm.train_accuracy = exit_accuracy(fm, X, y)
    return fm


def save_float_model(fm: FloatModel, path) -> None:
    """Write the float parameters and architecture to one ``.npz`` file."""
    arrays = {}
    for tag, layers in [("b", fm.backbone)] + [(f"e{i}", h) for i, h in enumerate(fm.heads)]:
        for j, d in enumerate(layers):
            if "W" in d:
                arrays[f"{tag}_{j}_W"] = d["W"]
                arrays[f"{tag}_{j}_b"] = d["b"]
    meta = {"arch": fm.arch, "history": fm.history, "train_accuracy": fm.train_accuracy}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_float_model(path) -> FloatModel:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        fm = FloatModel.init(meta["arch"], seed=0)
        for tag, layers in [("b", fm.backbone)] + [(f"e{i}", h) for i, h in enumerate(fm.heads)]:
            for j, d in enumerate(layers):
                if "W" in d:
                    d["W"] = z[f"{tag}_{j}_W"].astype(np.float64)
                    d["b"] = z[f"{tag}_{j}_b"].astype(np.float64)
    fm.history = meta["history"]
    fm.train_accuracy = meta["train_accuracy"]
    return fm


# ----------------------------------------------------------- quantization


def quantize_weights(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8: scale = max|w| / 127."""
    peak = float(np.max(np.abs(w))) if np.size(w) else 0.0
    if peak == 0.0:
        log.warning("all-zero weight tensor; using scale 1")
        return np.zeros(np.shape(w), dtype=np.int8), 1.0
    scale = peak / 127
    q = np.clip(round_half_away(np.asarray(w) / scale), -127, 127).astype(np.int8)
    return q, scale


def _act_scale(a: np.ndarray, positive_only: bool) -> float:
    peak = float(np.max(a)) if positive_only else float(np.max(np.abs(a)))
    return peak / 127 if peak > 0 else 1.0


def _layer_spec(d: dict, in_scale: float, out_act, next_kind, is_logits: bool):
    params = {k: v for k, v in d.items() if k not in ("kind", "W", "b")}
    if "W" not in d:
        return LayerSpec(d["kind"], params), in_scale
    q, ws = quantize_weights(d["W"])
    bias = np.clip(round_half_away(d["b"] / (in_scale * ws)), -(2**31), 2**31 - 1).astype(np.int32)
    out_scale = None if is_logits else _act_scale(out_act, next_kind == "relu")
    spec = LayerSpec(d["kind"], params, weights=q, weight_scale=ws, bias=bias, output_scale=out_scale)
    return spec, (in_scale * ws if out_scale is None else out_scale)


def quantize(fm: FloatModel, calibration: Dataset, name: str | None = None, seed: int | None = None) -> ModelGraph:
    """Post-training quantization into an int8 :class:`ModelGraph`."""
    X = np.asarray(calibration.images)
    if len(X) == 0:
        raise ValueError("calibration set is empty")
    logits, (_, _, acts) = forward_float(fm, X)
    arch = fm.arch
    in_scale = _act_scale(X, positive_only=False)
    last = len(fm.backbone) - 1
    final_head_empty = not fm.heads[-1]

    backbone, scales, s = [], [], in_scale
    for p, d in enumerate(fm.backbone):
        nxt = fm.backbone[p + 1]["kind"] if p < last else None
        spec, s = _layer_spec(d, s, acts[p], nxt, is_logits=(p == last and final_head_empty))
        spec.name = f"b{p}_{d['kind']}"
        backbone.append(spec)
        scales.append(s)

    exits = []
    for i, (e, head) in enumerate(zip(arch["exits"], fm.heads)):
        s = scales[e["after"]]
        t = acts[e["after"]]
        layers = []
        for j, d in enumerate(head):
            t_out, _ = _forward(d, t)
            nxt = head[j + 1]["kind"] if j + 1 < len(head) else None
            spec, s = _layer_spec(d, s, t_out, nxt, is_logits=(j == len(head) - 1))
            spec.name = f"e{i}_{j}_{d['kind']}"
            layers.append(spec)
            t = t_out
        exits.append(ExitHead(e["after"], layers))
    return ModelGraph(
        backbone=backbone,
        exits=exits,
        class_count=arch["class_count"],
        input_shape=tuple(arch["input_shape"]),
        input_scale=in_scale,
        name=name or arch.get("name", "model"),
        seed=seed,
    )
