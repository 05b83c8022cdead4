"""Deterministic stuck-at fault planning and injection into stored weights."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bits import SA0, SA1, force_bits
from .model import ModelGraph, StuckBits, fault_points, get_layer_weights

POLARITIES = {"SA0": SA0, "SA1": SA1}
BIT_DISTRIBUTIONS = ("uniform", "lsb-geometric", "sign")
MODES = ("one-shot", "hard-stuck")
LSB_RATIO = 0.5


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultEntry:
    weight_index: int
    bit_position: int
    polarity: str


@dataclass(frozen=True)
class FaultPlan:
    layer_index: int
    entries: tuple[FaultEntry, ...]
    fault_rate_percent: float
    seed: int
    bit_distribution: str = "uniform"
    mode: str = "one-shot"
    n_total: int = 0
    fault_point: str | None = None

    def arrays(self):
        idx = np.array([e.weight_index for e in self.entries], dtype=np.int64)
        bit = np.array([e.bit_position for e in self.entries], dtype=np.int64)
        pol = np.array([POLARITIES[e.polarity] for e in self.entries], dtype=bool)
        return idx, bit, pol

    def to_json(self) -> str:
        doc = {
            "layer": self.layer_index,
            "fault_point": self.fault_point,
            "seed": self.seed,
            "mode": self.mode,
            "bit_distribution": self.bit_distribution,
            "fault_rate_percent": self.fault_rate_percent,
            "n_total": self.n_total,
            "entries": [[e.weight_index, e.bit_position, e.polarity] for e in self.entries],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FaultPlan":
        doc = json.loads(text)
        return cls(
            layer_index=doc["layer"],
            entries=tuple(FaultEntry(int(i), int(b), p) for i, b, p in doc["entries"]),
            fault_rate_percent=doc["fault_rate_percent"],
            seed=doc["seed"],
            bit_distribution=doc["bit_distribution"],
            mode=doc["mode"],
            n_total=doc["n_total"],
            fault_point=doc.get("fault_point"),
        )

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


def lsb_geometric_probs(ratio: float = LSB_RATIO) -> np.ndarray:
    p = ratio ** np.arange(8)
    return p / p.sum()


def fault_count(fr_percent: float, n_total: int) -> int:
    """Faulty weight count for a rate, rounding half up."""
    return int(np.floor(fr_percent / 100 * n_total + 0.5))


def resolve_layer(F: ModelGraph, fp) -> tuple[int, str | None]:
    if isinstance(fp, str):
        fps = fault_points(F)
        if fp not in fps:
            raise FaultError(f"unknown fault point {fp!r}")
        return fps[fp], fp
    get_layer_weights(F, int(fp))
    return int(fp), None


def make_plan(F: ModelGraph, fp, fr_percent: float, polarity: str = "SA1", bit_distribution: str = "uniform",
              seed: int = 0, mode: str = "one-shot") -> FaultPlan:
    """Pick distinct weights uniformly at random and a stuck bit for each.

    ``fp`` is a fault-point name (``"FP1"``..``"FP4"``) or a backbone position.
    """
    if not 0 < fr_percent <= 100:
        raise FaultError(f"fault rate must be in (0, 100], got {fr_percent}")
    if polarity not in POLARITIES:
        raise FaultError(f"polarity must be SA0 or SA1, got {polarity!r}")
    if bit_distribution not in BIT_DISTRIBUTIONS:
        raise FaultError(f"unknown bit distribution {bit_distribution!r}")
    if mode not in MODES:
        raise FaultError(f"unknown persistence mode {mode!r}")
    layer, fp_name = resolve_layer(F, fp)
    n_total = get_layer_weights(F, layer).size
    count = fault_count(fr_percent, n_total)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_total, size=count, replace=False))
    if bit_distribution == "uniform":
        bits = rng.integers(0, 8, size=count)
    elif bit_distribution == "lsb-geometric":
        bits = rng.choice(8, size=count, p=lsb_geometric_probs())
    else:
        bits = np.full(count, 7)
    entries = tuple(FaultEntry(int(i), int(b), polarity) for i, b in zip(idx, bits))
    return FaultPlan(layer, entries, fr_percent, seed, bit_distribution, mode, n_total, fp_name)


def apply_plan(F: ModelGraph, plan: FaultPlan) -> ModelGraph:
    """Force the planned bits in place and return ``F``.

    In hard-stuck mode the plan is also attached so later writes to the
    layer are re-forced.
    """
    w = get_layer_weights(F, plan.layer_index)
    idx, bit, pol = plan.arrays()
    if idx.size and (idx.min() < 0 or idx.max() >= w.size):
        raise FaultError(f"weight index out of bounds for layer {plan.layer_index} with {w.size} weights")
    F.backbone[plan.layer_index].weights = force_bits(w, idx, bit, pol)
    if plan.mode == "hard-stuck":
        F.stuck.setdefault(plan.layer_index, []).append(StuckBits(idx, bit, pol))
    return F


def fault_rate(plan: FaultPlan, F: ModelGraph) -> float:
    n_total = get_layer_weights(F, plan.layer_index).size
    return len(plan.entries) / n_total * 100
