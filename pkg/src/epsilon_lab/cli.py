"""Command-line entry point: ``epsilon-lab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .approx_arith import error_profile, resolve_multiplier, save_table
from .data import load_mnist_split
from .epsilon import EpsilonConfig, save_signatures, sign_model
from .faults import apply_plan, make_plan
from .model import load_model, save_model
from .train import default_cnn_arch, load_float_model, mlp_arch, quantize, save_float_model, train_multiexit

log = logging.getLogger("epsilon_lab")


def _csv_list(cast=str):
    def parse(text):
        return [cast(v) for v in text.split(",") if v]

    return parse


def _load_training_data(spec: str, n_train: int):
    if spec.startswith("synthetic:"):
        return harness.load_dataset(spec, n_test=int(spec.split(":")[2]))
    train, _ = load_mnist_split(spec, n_train=n_train, n_test=0)
    return train


def cmd_train(a):
    train = _load_training_data(a.data, a.n_train)
    if a.arch == "cnn":
        arch = default_cnn_arch(train.class_count)
    else:
        arch = mlp_arch(int(np.prod(train.images.shape[1:])), train.class_count)
    fm = train_multiexit(arch, train, epochs=a.epochs, lr=a.lr, seed=a.seed, batch_size=a.batch_size)
    save_float_model(fm, a.out)
    print(json.dumps({"loss": fm.history, "train_accuracy": fm.train_accuracy}))


def cmd_quantize(a):
    fm = load_float_model(a.float_model)
    calib = _load_training_data(a.data, a.n_calibration)
    qm = quantize(fm, calib.subset(0, a.n_calibration), seed=a.seed)
    save_model(qm, a.out)


def cmd_sign(a):
    F = load_model(a.model)
    save_signatures(sign_model(F, a.bins), a.out)


def cmd_inject(a):
    F = load_model(a.model)
    plan = make_plan(F, a.fp[0], a.fr[0], a.polarity, a.bits, a.seed[0], a.mode)
    apply_plan(F, plan)
    save_model(F, a.out)
    plan.save(Path(a.out).with_suffix(".plan.json"))


def _experiment_config(a) -> harness.ExperimentConfig:
    overrides = {
        "model": a.model,
        "data": a.data,
        "multipliers": a.mult,
        "policies": a.policy,
        "fault_points": a.fp,
        "fault_rates": a.fr,
        "polarity": a.polarity,
        "seeds": a.seed,
        "mode": a.mode,
        "out": a.out,
        "bit_distribution": a.bits,
    }
    doc = json.loads(Path(a.config).read_text()) if a.config else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    eps = dict(doc.get("epsilon", {}))
    for key, val in (("gamma", a.gamma), ("m", a.m_offset), ("bins", a.bins)):
        if val is not None:
            eps[key] = val
    doc["epsilon"] = eps
    return harness.ExperimentConfig.from_dict(doc)


def cmd_run(a):
    cfg = _experiment_config(a)
    _, rows = harness.run_grid(cfg)
    for r in rows:
        if r.fault_point == "avg":
            print(f"{r.policy}: avg accuracy {r.accuracy:.2f}%  mean ops {r.mean_ops:.0f}")


def cmd_sweep_gamma(a):
    cfg = _experiment_config(a)
    text, _ = harness.sweep_gamma(cfg, a.values or [0.3, 0.5, 0.7, 0.9])
    sys.stdout.write(text)


def cmd_sweep_alpha(a):
    cfg = _experiment_config(a)
    text, _ = harness.sweep_alpha(cfg, a.values or [0.0, 0.5, 1.0, 1.5, 2.0])
    sys.stdout.write(text)


def cmd_profile_mult(a):
    rows = []
    for spec in a.mult or ["exact", "trunc2", "trunc4"]:
        m = resolve_multiplier(spec)
        p = error_profile(m)
        rows.append({"multiplier": m.id, "energy_per_op": m.energy_per_op, "mean_abs_error": p.mean_abs_error,
                     "max_abs_error": p.max_abs_error, "error_rate": p.error_rate})
        if a.save_tables:
            save_table(m, Path(a.save_tables) / f"{m.id}.axm8")
    text = harness.rows_to_csv(rows, columns=list(rows[0]))
    if a.out:
        harness.write_csv(text, a.out)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epsilon-lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def grid_flags(sp):
        sp.add_argument("--config", help="JSON experiment config; flags override its values")
        sp.add_argument("--model")
        sp.add_argument("--data")
        sp.add_argument("--mult", type=_csv_list())
        sp.add_argument("--policy", type=_csv_list())
        sp.add_argument("--fp", type=_csv_list())
        sp.add_argument("--fr", type=_csv_list(float))
        sp.add_argument("--polarity", choices=["SA0", "SA1"])
        sp.add_argument("--seed", type=_csv_list(int))
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--m-offset", type=float)
        sp.add_argument("--bins", type=int)
        sp.add_argument("--mode", choices=["one-shot", "hard-stuck"])
        sp.add_argument("--bits", choices=["uniform", "lsb-geometric", "sign"])
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train a float multi-exit model")
    sp.add_argument("--data", default="data/mnist", help="MNIST directory or synthetic:<kind>:<n>:<classes>:<seed>")
    sp.add_argument("--arch", choices=["cnn", "mlp"], default="cnn")
    sp.add_argument("--n-train", type=int, default=10000)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="float model (.npz)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("quantize", help="post-training int8 quantization")
    sp.add_argument("float_model")
    sp.add_argument("--data", default="data/mnist")
    sp.add_argument("--n-calibration", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True, help="model path (.json, with sibling .w8)")
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("sign", help="write the signature store of a golden model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bins", type=int, default=EpsilonConfig().bins)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sign)

    sp = sub.add_parser("inject", help="inject a stuck-at fault plan into a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fp", type=_csv_list(), default=["FP1"])
    sp.add_argument("--fr", type=_csv_list(float), default=[10.0])
    sp.add_argument("--polarity", choices=["SA0", "SA1"], default="SA1")
    sp.add_argument("--bits", choices=["uniform", "lsb-geometric", "sign"], default="uniform")
    sp.add_argument("--seed", type=_csv_list(int), default=[0])
    sp.add_argument("--mode", choices=["one-shot", "hard-stuck"], default="one-shot")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_inject)

    sp = sub.add_parser("run", help="run a fault grid and write CSV")
    grid_flags(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep-gamma", help="accuracy versus confidence threshold")
    grid_flags(sp)
    sp.add_argument("--values", type=_csv_list(float))
    sp.set_defaults(func=cmd_sweep_gamma)

    sp = sub.add_parser("sweep-alpha", help="accuracy versus importance-factor scale")
    grid_flags(sp)
    sp.add_argument("--values", type=_csv_list(float))
    sp.set_defaults(func=cmd_sweep_alpha)

    sp = sub.add_parser("profile-mult", help="exhaustive multiplier error profiles")
    sp.add_argument("--mult", type=_csv_list())
    sp.add_argument("--save-tables", help="directory to write LUT files into")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_profile_mult)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
