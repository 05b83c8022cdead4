"""Comparison policies: a single-exit vanilla network and a simplified
dual-threshold (confidence + predictive entropy) multi-exit policy.

Neither policy touches the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx_arith import MultiplierModel
from .model import InferenceSession, ModelGraph


@dataclass(frozen=True)
class MendConfig:
    gamma: float = 0.5
    tau: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def entropy(probs: np.ndarray) -> np.ndarray:
    """Predictive entropy in nats along the last axis (0 ln 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def vanilla_infer(F: ModelGraph, x, m: MultiplierModel):
    """Full backbone plus the deepest exit; returns (prediction, ops)."""
    s = InferenceSession(F, x, m)
    _, probs, _, _ = s.forward_exit(F.n_exits - 1)
    return int(np.argmax(probs[0])), s.ops


def mend_like_infer(F: ModelGraph, cfg: MendConfig, x, m: MultiplierModel):
    """Exit at the first head with confidence > gamma and entropy < tau.

    Returns (prediction, flagged, ops); ``flagged`` means no exit qualified
    and the deepest exit's prediction was used.
    """
    s = InferenceSession(F, x, m)
    probs = None
    for i in range(F.n_exits):
        _, probs, conf, _ = s.forward_exit(i)
        p = probs[0]
        if float(p.max()) > cfg.gamma and float(entropy(p)) < cfg.tau:
            return int(np.argmax(p)), False, s.ops
    return int(np.argmax(probs[0])), True, s.ops


@dataclass
class PolicyResult:
    predictions: np.ndarray
    flagged: np.ndarray
    exit_taken: np.ndarray
    ops: np.ndarray

    def accuracy(self, labels) -> float:
        return float(np.mean(self.predictions == np.asarray(labels)) * 100)


def evaluate_vanilla(F: ModelGraph, X, m: MultiplierModel, batch_size: int = 500) -> PolicyResult:
    X = np.asarray(X)
    pred = np.empty(len(X), dtype=np.int64)
    for s in range(0, len(X), batch_size):
        sess = InferenceSession(F, X[s : s + batch_size], m)
        pred[s : s + batch_size] = sess.forward_exit(F.n_exits - 1)[1].argmax(axis=1)
    n = len(X)
    return PolicyResult(pred, np.zeros(n, bool), np.full(n, F.n_exits - 1), np.full(n, F.full_ops()))


def evaluate_mend(F: ModelGraph, cfg: MendConfig, X, m: MultiplierModel, batch_size: int = 500) -> PolicyResult:
    X = np.asarray(X)
    n, N = len(X), F.n_exits
    pred = np.empty(n, dtype=np.int64)
    taken = np.empty(n, dtype=np.int64)
    path_ops = np.array([F.exit_path_ops(i) for i in range(N)])
    for s in range(0, n, batch_size):
        sess = InferenceSession(F, X[s : s + batch_size], m)
        probs = np.stack([sess.forward_exit(i)[1] for i in range(N)])
        ok = (probs.max(axis=2) > cfg.gamma) & (entropy(probs) < cfg.tau)
        first = np.where(ok.any(axis=0), ok.argmax(axis=0), N - 1)
        rows = np.arange(probs.shape[1])
        pred[s : s + batch_size] = probs[first, rows].argmax(axis=1)
        taken[s : s + batch_size] = np.where(ok.any(axis=0), first, -1)
    flagged = taken < 0
    taken = np.where(flagged, N - 1, taken)
    return PolicyResult(pred, flagged, taken, path_ops[taken])
