"""Statistical-signature fault detection and mitigation for multi-exit models.

Signatures summarize each weighted backbone layer of the fault-free
(golden) model over its stored int8 weights. At inference time the exit
cascade runs first; only when no exit is confident enough are the layers
scanned against their signatures and repaired.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .approx_arith import MultiplierModel
from .engine import round_half_away
from .model import InferenceSession, ModelGraph, get_layer_weights, update_layer

DEFAULT_TYPE_WEIGHTS = {"conv2d": 1.0, "dense": 0.8, "classifier": 0.6}


class SignatureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSignature:
    mu: float
    sigma: float
    q25: float
    q50: float
    q75: float
    rho: tuple[float, ...]
    bins: int
    layer: int | None = None

    @property
    def quartiles(self) -> tuple[float, float, float]:
        return (self.q25, self.q50, self.q75)


@dataclass(frozen=True)
class ImportanceFactors:
    beta_p: float
    gamma_s: float

    @property
    def alpha(self) -> float:
        return self.beta_p * self.gamma_s


@dataclass(frozen=True)
class EpsilonConfig:
    gamma: float = 0.5
    m: float = 3.0
    bins: int = 16
    kappa: float = 1.0
    tie_break: str = "smaller-magnitude"
    nearest_valid: str = "snap-quartile"
    inverse_threshold: bool = False
    type_weights: dict = field(default_factory=lambda: dict(DEFAULT_TYPE_WEIGHTS))

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not self.m > 0:
            raise ValueError("m must be > 0")
        if self.bins < 2:
            raise ValueError("need at least 2 histogram bins")
        if self.nearest_valid not in ("snap-quartile", "clamp-iqr"):
            raise ValueError(f"unknown nearest-valid mode {self.nearest_valid!r}")
        if self.tie_break not in ("smaller-magnitude", "lower"):
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")


# ------------------------------------------------------------- signatures


def sparsity_pattern(W, bins: int) -> np.ndarray:
    """Zero fraction followed by the fraction of weights in each of ``bins``
    equal-width bins over [-128, 128) (zeros excluded from the bins)."""
    w = np.asarray(W, dtype=np.int64).ravel()
    nz = w[w != 0]
    width = 256 / bins
    idx = np.minimum(np.floor((nz + 128) / width).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return np.concatenate([[w.size - nz.size], counts]) / w.size


def compute_signature(W, bins: int = 16, layer: int | None = None) -> LayerSignature:
    w = np.asarray(W, dtype=np.float64).ravel()
    if w.size == 0:
        raise SignatureError("cannot sign an empty weight array")
    q25, q50, q75 = np.quantile(w, [0.25, 0.5, 0.75])
    return LayerSignature(
        mu=float(w.mean()),
        sigma=float(w.std()),
        q25=float(q25),
        q50=float(q50),
        q75=float(q75),
        rho=tuple(float(v) for v in sparsity_pattern(W, bins)),
        bins=bins,
        layer=layer,
    )


def sign_model(F: ModelGraph, bins: int = 16) -> dict[int, LayerSignature]:
    return {p: compute_signature(F.backbone[p].weights, bins, layer=p) for p in F.weighted_positions}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def signature_record(sig: LayerSignature) -> str:
    rho = ", ".join(_fmt(v) for v in sig.rho)
    return (
        f'{{"layer": {json.dumps(sig.layer)}, "mu": {_fmt(sig.mu)}, "sigma": {_fmt(sig.sigma)}, '
        f'"q25": {_fmt(sig.q25)}, "q50": {_fmt(sig.q50)}, "q75": {_fmt(sig.q75)}, '
        f'"bins": {sig.bins}, "rho": [{rho}]}}'
    )


def dumps_signatures(signatures) -> str:
    sigs = signatures.values() if isinstance(signatures, dict) else signatures
    return "[\n" + ",\n".join(signature_record(s) for s in sigs) + "\n]\n"


def save_signatures(signatures, path) -> None:
    Path(path).write_text(dumps_signatures(signatures))


def load_signatures(path) -> dict[int, LayerSignature]:
    out = {}
    for r in json.loads(Path(path).read_text()):
        sig = LayerSignature(r["mu"], r["sigma"], r["q25"], r["q50"], r["q75"], tuple(r["rho"]), r["bins"], r["layer"])
        if len(sig.rho) != sig.bins + 1:
            raise SignatureError(f"layer {sig.layer}: rho has {len(sig.rho)} entries for {sig.bins} bins")
        out[sig.layer] = sig
    return out


# ------------------------------------------------------------- importance


def _is_classifier(F: ModelGraph, l: int) -> bool:
    return l == len(F.backbone) - 1 and not F.exits[-1].layers


def compute_importance(F: ModelGraph, l: int, config: EpsilonConfig | None = None) -> ImportanceFactors:
    """Positional importance falls linearly from 1.0 (first weighted layer)
    to 0.2 (last); structural importance is a per-kind weight scaled down
    by sparsity."""
    config = config or EpsilonConfig()
    w = get_layer_weights(F, l)
    positions = F.weighted_positions
    L, rank = len(positions), positions.index(l)
    beta = 1.0 if L == 1 else 1.0 - 0.8 * rank / (L - 1)
    kind = "classifier" if _is_classifier(F, l) else F.backbone[l].kind
    zero_fraction = np.count_nonzero(w == 0) / w.size
    gamma_s = config.type_weights[kind] * min(max(1.0 - zero_fraction, 0.1), 1.0)
    return ImportanceFactors(beta, gamma_s)


def importance_map(F: ModelGraph, config: EpsilonConfig | None = None) -> dict[int, float]:
    return {p: compute_importance(F, p, config).alpha for p in F.weighted_positions}


def detection_threshold(sig: LayerSignature, alpha: float, m: float, inverse: bool = False) -> float:
    return ((m - alpha) if inverse else (m + alpha)) * sig.sigma


def pattern_distance(W_current, sig_ref: LayerSignature) -> float:
    """Unscaled L1 distance between reference and current sparsity patterns."""
    cur = sparsity_pattern(W_current, sig_ref.bins)
    return float(np.abs(np.asarray(sig_ref.rho) - cur).sum())


def pattern_deviation(W_current, sig_ref: LayerSignature, bins: int, kappa: float = 1.0) -> float:
    if bins != sig_ref.bins:
        raise SignatureError(f"bin count {bins} does not match reference {sig_ref.bins}")
    return kappa * pattern_distance(W_current, sig_ref)


def calibrate_kappa(F: ModelGraph, signatures, alphas, config: EpsilonConfig, margin: float = 2.0) -> float:
    """Pattern-score scale at which one sign-bit flip in the smallest layer
    scores ``margin`` times that layer's threshold.

    A sign flip always moves a weight to another bin, changing the unscaled
    distance by exactly ``2 / n`` for an ``n``-weight layer.
    """
    smallest = min(F.weighted_positions, key=lambda p: (F.backbone[p].weights.size, p))
    n = F.backbone[smallest].weights.size
    T = detection_threshold(signatures[smallest], alphas[smallest], config.m, config.inverse_threshold)
    return max(margin * T * n / 2, 1.0) if T > 0 else 1.0


# ------------------------------------------------------------- mitigation


def _snap_candidates(Q) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(Q, dtype=np.float64)), -128, 127)


def find_nearest_valid(w, Q, mode: str = "snap-quartile", tie_break: str = "smaller-magnitude"):
    """Replacement value(s) for deviating weight(s) ``w`` given quartiles ``Q``."""
    w_arr = np.asarray(w, dtype=np.float64)
    if mode == "clamp-iqr":
        q25, _, q75 = Q
        iqr = q75 - q25
        v = np.clip(w_arr, q25 - 1.5 * iqr, q75 + 1.5 * iqr)
        out = np.clip(round_half_away(v), -128, 127)
    elif mode == "snap-quartile":
        cand = _snap_candidates(Q)
        if tie_break == "smaller-magnitude":
            order = np.lexsort((cand, np.abs(cand)))
        else:
            order = np.argsort(cand, kind="stable")
        cand = cand[order]
        dist = np.abs(w_arr[..., None] - cand)
        out = cand[np.argmin(dist, axis=-1)]
    else:
        raise ValueError(f"unknown nearest-valid mode {mode!r}")
    out = out.astype(np.int64)
    return int(out) if out.ndim == 0 else out


def mitigate_layer(W, sig: LayerSignature, T: float, config: EpsilonConfig | None = None):
    """Replace weights with ``|w - mu| > T``; returns (weights, count)."""
    config = config or EpsilonConfig()
    W = np.asarray(W)
    bad = np.abs(W.astype(np.float64) - sig.mu) > T
    out = W.copy()
    if bad.any():
        out[bad] = find_nearest_valid(W[bad], sig.quartiles, config.nearest_valid, config.tie_break)
    return out, int(bad.sum())


# ---------------------------------------------------------- orchestration


@dataclass
class LayerCheck:
    layer: int
    threshold: float
    distance: float
    score: float
    flagged: bool
    corrections: int = 0


@dataclass
class ScanResult:
    fault_detected: bool
    checks: list[LayerCheck]
    changed: list[int]

    @property
    def corrections(self) -> int:
        return sum(c.corrections for c in self.checks)


@dataclass
class InferenceTrace:
    confidences: list[float] = field(default_factory=list)
    exit_taken: int | None = None
    stage2: bool = False
    checks: list[LayerCheck] = field(default_factory=list)
    corrections: int = 0
    ops: int = 0


def _check_inputs(F: ModelGraph, signatures, alphas):
    missing = [p for p in F.weighted_positions if p not in signatures or p not in alphas]
    if missing:
        raise SignatureError(f"missing signature or importance factor for layers {missing}")


def scan_and_mitigate(F: ModelGraph, signatures, alphas, config: EpsilonConfig) -> ScanResult:
    """Compare every weighted layer to its signature; repair flagged layers in place."""
    _check_inputs(F, signatures, alphas)
    detected, checks, changed = False, [], []
    for p in F.weighted_positions:
        sig = signatures[p]
        W = get_layer_weights(F, p)
        T = detection_threshold(sig, alphas[p], config.m, config.inverse_threshold)
        dist = pattern_distance(W, sig)
        score = config.kappa * dist
        check = LayerCheck(p, T, dist, score, score > T)
        if check.flagged:
            detected = True
            fixed, check.corrections = mitigate_layer(W, sig, T, config)
            update_layer(F, p, fixed)
            if not np.array_equal(get_layer_weights(F, p), W):
                changed.append(p)
        checks.append(check)
    return ScanResult(detected, checks, changed)


def _first_confident(conf: np.ndarray, gamma: float) -> np.ndarray:
    """Per input, index of the first exit with confidence > gamma, else -1."""
    ok = conf > gamma
    first = ok.argmax(axis=0)
    return np.where(ok.any(axis=0), first, -1)


def epsilon_infer(F: ModelGraph, signatures, alphas, config: EpsilonConfig, x, m: MultiplierModel):
    """Classify one input, repairing ``F`` in place if the scan fires.

    Returns ``(prediction, fault_detected, trace)``.
    """
    _check_inputs(F, signatures, alphas)
    session = InferenceSession(F, x, m)
    trace = InferenceTrace()
    probs = None
    for i in range(F.n_exits):
        _, probs, conf, _ = session.forward_exit(i)
        c = float(np.asarray(conf).reshape(-1)[0])
        trace.confidences.append(c)
        if c > config.gamma:
            trace.exit_taken = i
            trace.ops = session.ops
            return int(np.argmax(probs[0])), False, trace
    trace.stage2 = True
    scan = scan_and_mitigate(F, signatures, alphas, config)
    trace.checks = scan.checks
    trace.corrections = scan.corrections
    if scan.changed:
        session.invalidate(min(scan.changed))
        _, probs, _, _ = session.forward_exit(F.n_exits - 1)
    trace.exit_taken = F.n_exits - 1
    trace.ops = session.ops
    return int(np.argmax(probs[0])), scan.fault_detected, trace


@dataclass
class BatchResult:
    predictions: np.ndarray
    fault_detected: np.ndarray
    exit_taken: np.ndarray
    stage2: np.ndarray
    ops: np.ndarray
    corrections: int

    def accuracy(self, labels) -> float:
        return float(np.mean(self.predictions == np.asarray(labels)) * 100)


def _cascade(F: ModelGraph, X, m: MultiplierModel):
    sess = InferenceSession(F, X, m)
    probs = np.stack([sess.forward_exit(i)[1] for i in range(F.n_exits)])
    return probs


def evaluate_epsilon(F: ModelGraph, signatures, alphas, config: EpsilonConfig, X, m: MultiplierModel,
                     batch_size: int = 500) -> BatchResult:
    """Sequential :func:`epsilon_infer` over ``X`` computed in batches.

    Inputs are processed in order against a model that Stage 2 may repair,
    so results match calling :func:`epsilon_infer` input by input on ``F``.
    """
    _check_inputs(F, signatures, alphas)
    X = np.asarray(X)
    n, N = len(X), F.n_exits
    pred = np.zeros(n, dtype=np.int64)
    detected = np.zeros(n, dtype=bool)
    exit_taken = np.zeros(n, dtype=np.int64)
    stage2 = np.zeros(n, dtype=bool)
    ops = np.zeros(n, dtype=np.int64)
    path_ops = [F.exit_path_ops(i) for i in range(N)]
    layer_ops, last_head = F.layer_ops(), F.head_ops()[-1]
    corrections = 0
    stable: bool | None = None  # detection outcome once a scan leaves weights untouched

    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        probs = _cascade(F, X[start:stop], m)
        first = _first_confident(probs.max(axis=2), config.gamma)
        rows = np.arange(stop - start)
        early = first >= 0
        sel = np.where(early, first, N - 1)
        chunk_pred = probs[sel, rows].argmax(axis=1)

        pending = np.flatnonzero(~early)
        if stable is None and pending.size:
            j = int(pending[0])
            done = slice(start, start + j)
            pred[done], exit_taken[done] = chunk_pred[:j], sel[:j]
            ops[done] = np.asarray(path_ops)[sel[:j]]
            scan = scan_and_mitigate(F, signatures, alphas, config)
            corrections += scan.corrections
            k = start + j
            stage2[k], exit_taken[k], detected[k] = True, N - 1, scan.fault_detected
            ops[k] = path_ops[-1]
            if scan.changed:
                ops[k] += sum(layer_ops[min(scan.changed):]) + last_head
                pred[k] = int(_cascade_deepest(F, X[k : k + 1], m)[0].argmax())
                start = k + 1
                continue
            stable = scan.fault_detected
            # Weights untouched: every later scan repeats this outcome.
        sl = slice(start, stop)
        pred[sl], exit_taken[sl] = chunk_pred, sel
        ops[sl] = np.asarray(path_ops)[sel]
        if pending.size:
            stage2[start + pending] = True
            detected[start + pending] = bool(stable)
        start = stop
    return BatchResult(pred, detected, exit_taken, stage2, ops, corrections)


def _cascade_deepest(F: ModelGraph, X, m: MultiplierModel):
    sess = InferenceSession(F, X, m)
    return sess.forward_exit(F.n_exits - 1)[1]


# ------------------------------------------------------------------ bounds


def missed_detection_bound(alpha: float, p: float) -> float:
    """exp(-alpha^2 / (2 p)) for fault rate ``p`` in (0, 1]."""
    if not p > 0:
        raise ValueError(f"fault rate p must be > 0, got {p}")
    return math.exp(-(alpha**2) / (2 * p))


def error_bound(gamma: float, N: int, alpha: float, p: float) -> float:
    """(1 - gamma)^N + exp(-alpha^2 / (2 p)), capped at 1."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    if N < 1:
        raise ValueError(f"need at least one exit, got N={N}")
    return min(1.0, (1 - gamma) ** N + missed_detection_bound(alpha, p))


def with_kappa(config: EpsilonConfig, kappa: float) -> EpsilonConfig:
    return replace(config, kappa=kappa)
