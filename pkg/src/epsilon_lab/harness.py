"""Experiment grids, sensitivity sweeps and the energy proxy.

Every grid cell copies the golden model, injects its fault plan and
evaluates the test split. The plan's RNG stream depends only on the cell's
fault point, fault rate and seed, so all policies and multipliers in a row
of the grid face identical faults.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .approx_arith import MultiplierModel, resolve_multiplier
from .baselines import MendConfig, evaluate_mend, evaluate_vanilla
from .data import Dataset, gen_synthetic, load_mnist_split
from .epsilon import (
    EpsilonConfig,
    calibrate_kappa,
    evaluate_epsilon,
    importance_map,
    load_signatures,
    sign_model,
)
from .faults import apply_plan, make_plan
from .model import ModelGraph, fault_points, load_model

log = logging.getLogger(__name__)

POLICIES = ("epsilon", "vanilla", "mend")
FP_NAMES = ("FP1", "FP2", "FP3", "FP4")


class HarnessError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = ""
    data: str = "data/mnist"
    n_test: int = 2000
    multipliers: list = field(default_factory=lambda: ["trunc2"])
    policies: list = field(default_factory=lambda: ["epsilon", "vanilla", "mend"])
    polarity: str = "SA1"
    fault_points: list = field(default_factory=lambda: list(FP_NAMES))
    fault_rates: list = field(default_factory=lambda: [10, 30, 50])
    seeds: list = field(default_factory=lambda: [0])
    bit_distribution: str = "uniform"
    mode: str = "one-shot"
    signatures: str | None = None
    epsilon: dict = field(default_factory=dict)
    mend: dict = field(default_factory=dict)
    tune_gamma: list | None = None
    n_validation: int = 2000
    timing: bool = False
    out: str = "results.csv"

    def __post_init__(self):
        for name in ("multipliers", "policies", "fault_points", "fault_rates", "seeds"):
            if not getattr(self, name):
                raise HarnessError(f"grid axis {name} is empty")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise HarnessError(f"unknown policies {bad}")

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        doc = json.loads(Path(path).read_text())
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise HarnessError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def epsilon_config(self) -> EpsilonConfig:
        opts = {k: v for k, v in self.epsilon.items() if k != "kappa"}
        return EpsilonConfig(**opts)

    def mend_config(self) -> MendConfig:
        return MendConfig(**self.mend)


@dataclass
class MetricsRow:
    policy: str
    multiplier: str
    fault_point: str
    fault_rate: float
    seed: str
    accuracy: float
    mean_ops: float
    energy_pj: float
    detections: float
    corrections: float
    exit_hist: str
    wall_ms: float | None = None


ROW_FIELDS = [f.name for f in fields(MetricsRow)]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows, columns=None, timing: bool = False) -> str:
    if columns is None:
        columns = [c for c in ROW_FIELDS if timing or c != "wall_ms"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        d = r if isinstance(r, dict) else asdict(r)
        w.writerow([_fmt(d[c]) for c in columns])
    return buf.getvalue()


def write_csv(text: str, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def cell_seed(seed: int, fp: str, fr: float) -> int:
    ss = np.random.SeedSequence([int(seed), FP_NAMES.index(fp) + 1, int(round(fr * 1000))])
    return int(ss.generate_state(1)[0])


# --------------------------------------------------------------- context


@dataclass
class Context:
    """Everything a grid needs, loaded once."""

    golden: ModelGraph
    test: Dataset
    signatures: dict
    alphas: dict
    eps: EpsilonConfig
    mend: MendConfig
    multipliers: dict

    @classmethod
    def build(cls, cfg: ExperimentConfig, model: ModelGraph | None = None, test: Dataset | None = None):
        golden = model if model is not None else load_model(cfg.model)
        if test is None:
            test = load_dataset(cfg.data, cfg.n_test)
        eps = cfg.epsilon_config()
        if cfg.signatures:
            sigs = load_signatures(cfg.signatures)
        else:
            sigs = sign_model(golden, eps.bins)
        alphas = importance_map(golden, eps)
        kappa = cfg.epsilon.get("kappa", "auto")
        if kappa == "auto":
            kappa = calibrate_kappa(golden, sigs, alphas, eps)
        eps = EpsilonConfig(**{**asdict(eps), "kappa": float(kappa)})
        mults = {}
        for spec in cfg.multipliers:
            mults[spec] = resolve_multiplier(spec)
        return cls(golden, test, sigs, alphas, eps, cfg.mend_config(), mults)


def load_dataset(spec: str, n_test: int, offset: int = 0) -> Dataset:
    """``spec`` is an MNIST directory or ``synthetic:<kind>:<n>:<classes>:<seed>``.

    Items ``offset .. offset + n_test`` of the test file are returned.
    """
    if spec.startswith("synthetic:"):
        _, kind, n, classes, seed = spec.split(":")
        ds = gen_synthetic(kind, int(n), int(classes), int(seed))
    else:
        _, ds = load_mnist_split(spec, n_train=0, n_test=offset + n_test)
    return ds.subset(offset, offset + n_test, "test" if offset == 0 else "validation")


def faulted_copy(golden: ModelGraph, fp: str, fr: float, seed: int, cfg: ExperimentConfig) -> ModelGraph:
    F = golden.copy()
    if fr > 0:
        plan = make_plan(F, fp, fr, cfg.polarity, cfg.bit_distribution, cell_seed(seed, fp, fr), cfg.mode)
        apply_plan(F, plan)
    return F


def evaluate_policy(policy: str, F: ModelGraph, ctx: Context, m: MultiplierModel, eps: EpsilonConfig | None = None,
                    alphas: dict | None = None):
    """Returns (accuracy %, mean ops, detections, corrections, exit counts)."""
    X, y = ctx.test.images, ctx.test.labels
    N = F.n_exits
    if policy == "epsilon":
        r = evaluate_epsilon(F.copy(), ctx.signatures, alphas or ctx.alphas, eps or ctx.eps, X, m)
        det, corr = int(r.fault_detected.sum()), r.corrections
    elif policy == "vanilla":
        r = evaluate_vanilla(F, X, m)
        det, corr = 0, 0
    else:
        r = evaluate_mend(F, ctx.mend, X, m)
        det, corr = int(r.flagged.sum()), 0
    hist = np.bincount(r.exit_taken, minlength=N)
    return r.accuracy(y), float(r.ops.mean()), det, corr, hist


def _hist_str(h) -> str:
    return "|".join(str(int(v)) for v in h)


def average_row(policy: str, rows: list[MetricsRow]) -> MetricsRow:
    hist = np.sum([[int(v) for v in r.exit_hist.split("|")] for r in rows], axis=0)
    walls = [r.wall_ms for r in rows if r.wall_ms is not None]
    return MetricsRow(
        policy=policy,
        multiplier="+".join(dict.fromkeys(r.multiplier for r in rows)),
        fault_point="avg",
        fault_rate=float(np.mean([r.fault_rate for r in rows])),
        seed="avg",
        accuracy=float(np.mean([r.accuracy for r in rows])),
        mean_ops=float(np.mean([r.mean_ops for r in rows])),
        energy_pj=float(np.mean([r.energy_pj for r in rows])),
        detections=float(np.mean([r.detections for r in rows])),
        corrections=float(np.mean([r.corrections for r in rows])),
        exit_hist=_hist_str(hist),
        wall_ms=float(np.mean(walls)) if walls else None,
    )


def grid_rows(cfg: ExperimentConfig, ctx: Context) -> list[MetricsRow]:
    fps = fault_points(ctx.golden)
    for fp in cfg.fault_points:
        if fp not in fps:
            raise HarnessError(f"unknown fault point {fp!r}")
    cells: dict[tuple, MetricsRow] = {}
    for mult_id, m in ctx.multipliers.items():
        for fp in cfg.fault_points:
            for fr in cfg.fault_rates:
                for seed in cfg.seeds:
                    F = faulted_copy(ctx.golden, fp, fr, seed, cfg)
                    for policy in cfg.policies:
                        t0 = time.perf_counter()
                        acc, ops, det, corr, hist = evaluate_policy(policy, F, ctx, m)
                        wall = (time.perf_counter() - t0) * 1000 if cfg.timing else None
                        cells[(policy, mult_id, fp, fr, seed)] = MetricsRow(
                            policy, mult_id, fp, float(fr), str(seed), acc, ops, ops * m.energy_per_op,
                            float(det), float(corr), _hist_str(hist), wall,
                        )
                        log.info("%s %s %s FR=%s seed=%s acc=%.2f", policy, mult_id, fp, fr, seed, acc)
    rows = []
    for policy in cfg.policies:
        mine = [
            cells[(policy, mid, fp, fr, s)]
            for mid in ctx.multipliers
            for fp in cfg.fault_points
            for fr in cfg.fault_rates
            for s in cfg.seeds
        ]
        rows += mine + [average_row(policy, mine)]
    return rows


def run_grid(cfg: ExperimentConfig, model: ModelGraph | None = None, test: Dataset | None = None,
             write: bool = True) -> tuple[str, list[MetricsRow]]:
    ctx = Context.build(cfg, model, test)
    if cfg.tune_gamma:
        g = tune_gamma(cfg, ctx, load_dataset(cfg.data, cfg.n_validation, offset=cfg.n_test), cfg.tune_gamma)
        ctx.eps = EpsilonConfig(**{**asdict(ctx.eps), "gamma": g})
    rows = grid_rows(cfg, ctx)
    text = rows_to_csv(rows, timing=cfg.timing)
    if write:
        write_csv(text, cfg.out)
    return text, rows


def tune_gamma(cfg: ExperimentConfig, ctx: Context, validation: Dataset, candidates, seed_offset: int = 1000) -> float:
    """Confidence threshold with the best mean post-fault accuracy on a
    validation split, over the config's fault grid and multipliers.

    Fault seeds are shifted by ``seed_offset`` so tuning never sees the
    evaluation faults; ties go to the smaller threshold.
    """
    vctx = Context(ctx.golden, validation, ctx.signatures, ctx.alphas, ctx.eps, ctx.mend, ctx.multipliers)
    faulted = [
        faulted_copy(ctx.golden, fp, fr, seed + seed_offset, cfg)
        for fp in cfg.fault_points
        for fr in cfg.fault_rates
        for seed in cfg.seeds[:1]
    ]
    best, best_acc = None, -1.0
    for g in sorted(candidates):
        eps = EpsilonConfig(**{**asdict(ctx.eps), "gamma": float(g)})
        acc = np.mean([
            evaluate_policy("epsilon", F, vctx, m, eps=eps)[0] for m in ctx.multipliers.values() for F in faulted
        ])
        log.info("tune gamma=%.3f validation accuracy %.3f", g, acc)
        if acc > best_acc:
            best, best_acc = float(g), float(acc)
    return best


# ---------------------------------------------------------------- sweeps


def _sweep_cells(cfg: ExperimentConfig, ctx: Context, settings, label: str):
    fp = cfg.fault_points[0]
    fr = cfg.fault_rates[0]
    rows = []
    N = ctx.golden.n_exits
    for mult_id, m in ctx.multipliers.items():
        for value, eps, alphas in settings:
            accs, ops, det, hist = [], [], 0, np.zeros(N, dtype=np.int64)
            for seed in cfg.seeds:
                F = faulted_copy(ctx.golden, fp, fr, seed, cfg)
                a, o, d, _, h = evaluate_policy("epsilon", F, ctx, m, eps=eps, alphas=alphas)
                accs.append(a)
                ops.append(o)
                det += d
                hist += h
            row = {label: float(value), "multiplier": mult_id, "fault_point": fp, "fault_rate": float(fr),
                   "accuracy": float(np.mean(accs)), "mean_ops": float(np.mean(ops)),
                   "energy_pj": float(np.mean(ops)) * m.energy_per_op, "detections": float(det),
                   "mean_exit": float(np.dot(np.arange(1, N + 1), hist) / hist.sum())}
            row.update({f"exit_{i + 1}": int(hist[i]) for i in range(N)})
            rows.append(row)
    return rows


def _sweep_defaults(cfg: ExperimentConfig) -> ExperimentConfig:
    # Sensitivity figures fix one fault scenario: FP1, 10 %, SA1.
    doc = asdict(cfg)
    if cfg.fault_points == list(FP_NAMES):
        doc["fault_points"] = ["FP1"]
    if cfg.fault_rates == [10, 30, 50]:
        doc["fault_rates"] = [10]
    return ExperimentConfig(**doc)


def sweep_gamma(cfg: ExperimentConfig, gammas, model=None, test=None, write: bool = True):
    cfg = _sweep_defaults(cfg)
    ctx = Context.build(cfg, model, test)
    settings = [(g, EpsilonConfig(**{**asdict(ctx.eps), "gamma": float(g)}), ctx.alphas) for g in sorted(gammas)]
    rows = _sweep_cells(cfg, ctx, settings, "gamma")
    text = rows_to_csv(rows, columns=list(rows[0]))
    if write:
        write_csv(text, cfg.out)
    return text, rows


def sweep_alpha(cfg: ExperimentConfig, scale_factors, model=None, test=None, write: bool = True):
    """Scale every importance factor (clamped to [0, 1]); kappa stays at its
    unscaled calibration so only the thresholds move."""
    cfg = _sweep_defaults(cfg)
    ctx = Context.build(cfg, model, test)
    settings = []
    for s in scale_factors:
        alphas = {p: min(max(a * s, 0.0), 1.0) for p, a in ctx.alphas.items()}
        settings.append((s, ctx.eps, alphas))
    rows = _sweep_cells(cfg, ctx, settings, "alpha_scale")
    text = rows_to_csv(rows, columns=list(rows[0]))
    if write:
        write_csv(text, cfg.out)
    return text, rows


# ---------------------------------------------------------------- energy


def energy_proxy(rows) -> list[dict]:
    """Mean energy per policy as a percentage of the most expensive policy."""
    data = [r for r in rows if (r["fault_point"] if isinstance(r, dict) else r.fault_point) != "avg"]
    if not data:
        raise HarnessError("energy proxy needs at least one row")
    by_policy: dict[str, list[float]] = {}
    for r in data:
        d = r if isinstance(r, dict) else asdict(r)
        by_policy.setdefault(d["policy"], []).append(float(d["energy_pj"]))
    means = {p: float(np.mean(v)) for p, v in by_policy.items()}
    peak = max(means.values())
    return [{"policy": p, "mean_energy_pj": e, "relative_percent": 100 * e / peak} for p, e in means.items()]
