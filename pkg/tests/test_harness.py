import csv
import io
import json

import numpy as np
import pytest

from epsilon_lab import cli
from epsilon_lab.data import gen_synthetic
from epsilon_lab.epsilon import load_signatures
from epsilon_lab.faults import FaultPlan
from epsilon_lab.harness import (
    Context,
    ExperimentConfig,
    HarnessError,
    cell_seed,
    energy_proxy,
    evaluate_policy,
    faulted_copy,
    load_dataset,
    run_grid,
    sweep_alpha,
    sweep_gamma,
)
from epsilon_lab.model import load_model, models_equal, save_model
from epsilon_lab.train import mlp_arch, quantize, train_multiexit

DATA = "synthetic:blobs:300:3:5"


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    ds = gen_synthetic("blobs", 300, 3, 5)
    fm = train_multiexit(mlp_arch(2, 3, hidden=(12, 12, 12)), ds, epochs=4, lr=0.05, seed=1)
    path = tmp_path_factory.mktemp("model") / "mlp.json"
    save_model(quantize(fm, ds, name="mlp", seed=1), path)
    return str(path)


def cfg(model_path, tmp_path, **kw):
    doc = {"model": model_path, "data": DATA, "n_test": 300, "out": str(tmp_path / "out.csv")}
    doc.update(kw)
    return ExperimentConfig.from_dict(doc)


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestGrid:
    def test_cardinality(self, model_path, tmp_path):
        text, rows = run_grid(cfg(model_path, tmp_path, policies=["epsilon"]))
        assert len(rows) == 13
        assert [r["fault_point"] for r in parse(text)][-1] == "avg"

    def test_rows_per_policy(self, model_path, tmp_path):
        _, rows = run_grid(cfg(model_path, tmp_path, fault_points=["FP1"], fault_rates=[30], seeds=[0, 1]))
        assert [r.policy for r in rows] == ["epsilon"] * 3 + ["vanilla"] * 3 + ["mend"] * 3

    def test_byte_identical_reruns(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path, seeds=[0, 1])
        run_grid(c)
        first = (tmp_path / "out.csv").read_bytes()
        run_grid(c)
        assert (tmp_path / "out.csv").read_bytes() == first

    def test_control_matches_golden(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path, fault_points=["FP1", "FP4"], fault_rates=[0])
        _, rows = run_grid(c, write=False)
        ctx = Context.build(c)
        for r in rows:
            golden_acc = evaluate_policy(r.policy, ctx.golden, ctx, ctx.multipliers["trunc2"])[0]
            assert r.accuracy == pytest.approx(golden_acc, abs=1e-12)

    def test_vanilla_ops_constant(self, model_path, tmp_path):
        _, rows = run_grid(cfg(model_path, tmp_path, policies=["vanilla"]), write=False)
        full = load_model(model_path).full_ops()
        assert {r.mean_ops for r in rows} == {float(full)}

    def test_timing_column_optional(self, model_path, tmp_path):
        text, _ = run_grid(cfg(model_path, tmp_path, fault_points=["FP1"], fault_rates=[10]), write=False)
        assert "wall_ms" not in text.splitlines()[0]
        text, _ = run_grid(cfg(model_path, tmp_path, fault_points=["FP1"], fault_rates=[10], timing=True), write=False)
        assert text.splitlines()[0].endswith("wall_ms")

    def test_gamma_tuning_uses_validation(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path, data="synthetic:blobs:600:3:5", n_test=300, n_validation=300,
                policies=["epsilon"], fault_points=["FP1"], fault_rates=[50], tune_gamma=[0.4, 0.8])
        _, rows = run_grid(c, write=False)
        assert len(rows) == 2

    def test_unknown_fault_point(self, model_path, tmp_path):
        with pytest.raises(HarnessError):
            run_grid(cfg(model_path, tmp_path, fault_points=["FP7"]), write=False)

    def test_config_errors(self, model_path, tmp_path):
        with pytest.raises(HarnessError):
            ExperimentConfig.from_dict({"model": model_path, "colour": "red"})
        with pytest.raises(HarnessError):
            ExperimentConfig.from_dict({"model": model_path, "policies": ["oracle"]})
        with pytest.raises(HarnessError):
            ExperimentConfig.from_dict({"model": model_path, "seeds": []})

    def test_seed_is_paired_across_policies(self):
        assert cell_seed(0, "FP1", 10) == cell_seed(0, "FP1", 10)
        assert len({cell_seed(s, fp, fr) for s in range(3) for fp in ("FP1", "FP2") for fr in (10, 30)}) == 12


class TestSweeps:
    def test_single_gamma(self, model_path, tmp_path):
        _, rows = sweep_gamma(cfg(model_path, tmp_path), [0.5], write=False)
        assert len(rows) == 1 and rows[0]["fault_point"] == "FP1" and rows[0]["fault_rate"] == 10.0

    def test_gamma_sorted_and_deepening(self, model_path, tmp_path):
        _, rows = sweep_gamma(cfg(model_path, tmp_path, seeds=[0, 1]), [0.9, 0.3, 0.7, 0.5], write=False)
        assert [r["gamma"] for r in rows] == [0.3, 0.5, 0.7, 0.9]
        hists = np.array([[r[f"exit_{i}"] for i in range(1, 5)] for r in rows])
        cdf = hists.cumsum(axis=1)
        assert np.all(np.diff(cdf, axis=0) <= 0)

    def test_gamma_sweep_control_deepens(self, model_path, tmp_path):
        _, rows = sweep_gamma(cfg(model_path, tmp_path, fault_rates=[0]), [0.3, 0.6, 0.9], write=False)
        means = [r["mean_exit"] for r in rows]
        assert means == sorted(means)

    def test_alpha_scale_zero(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path, fault_rates=[50])
        _, rows = sweep_alpha(c, [0.0, 1.0], write=False)
        assert [r["alpha_scale"] for r in rows] == [0.0, 1.0]
        ctx = Context.build(c)
        F = faulted_copy(ctx.golden, "FP1", 50, 0, c)
        zero = {p: 0.0 for p in ctx.alphas}
        acc, ops, det, _, _ = evaluate_policy("epsilon", F, ctx, ctx.multipliers["trunc2"], alphas=zero)
        assert (rows[0]["accuracy"], rows[0]["mean_ops"], rows[0]["detections"]) == (acc, ops, float(det))

    def test_alpha_scale_one_is_baseline(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path)
        _, a_rows = sweep_alpha(c, [1.0], write=False)
        _, g_rows = sweep_gamma(c, [ExperimentConfig().epsilon_config().gamma], write=False)
        for key in ("accuracy", "mean_ops", "detections"):
            assert a_rows[0][key] == g_rows[0][key]


class TestEnergy:
    def rows(self, *specs):
        return [{"policy": p, "fault_point": "FP1", "energy_pj": e} for p, e in specs]

    def test_single_row(self):
        assert energy_proxy(self.rows(("a", 7.0)))[0]["relative_percent"] == 100.0

    def test_half_ops(self):
        out = {r["policy"]: r["relative_percent"] for r in energy_proxy(self.rows(("a", 10.0), ("b", 5.0)))}
        assert out == {"a": 100.0, "b": 50.0}

    def test_mixed_multipliers_weighted(self, model_path, tmp_path):
        c = cfg(model_path, tmp_path, policies=["vanilla"], multipliers=["exact", "trunc2"],
                fault_points=["FP1"], fault_rates=[10])
        _, rows = run_grid(c, write=False)
        data = [r for r in rows if r.fault_point != "avg"]
        full = load_model(model_path).full_ops()
        assert [r.energy_pj for r in data] == [full * 1.0, full * 0.5625]
        assert energy_proxy(rows)[0]["mean_energy_pj"] == pytest.approx(full * (1 + 0.5625) / 2)

    def test_empty(self):
        with pytest.raises(HarnessError):
            energy_proxy([])


class TestDataset:
    def test_synthetic_spec(self):
        ds = load_dataset("synthetic:spiral:50:2:0", 20)
        assert len(ds) == 20

    def test_offset_slice(self):
        a = load_dataset("synthetic:blobs:50:2:0", 10, offset=10)
        b = load_dataset("synthetic:blobs:50:2:0", 20)
        np.testing.assert_array_equal(a.images, b.images[10:20])


class TestCli:
    def test_train_quantize_sign_inject_run(self, tmp_path):
        fm = tmp_path / "f.npz"
        qm = tmp_path / "q.json"
        data = "synthetic:blobs:200:3:2"
        assert cli.main(["train", "--data", data, "--arch", "mlp", "--epochs", "2", "--out", str(fm)]) == 0
        assert cli.main(["quantize", str(fm), "--data", data, "--n-calibration", "100", "--out", str(qm)]) == 0
        assert cli.main(["sign", "--model", str(qm), "--out", str(tmp_path / "s.json")]) == 0
        assert len(load_signatures(tmp_path / "s.json")) == 4
        assert cli.main(["inject", "--model", str(qm), "--fp", "FP2", "--fr", "30", "--out",
                         str(tmp_path / "bad.json")]) == 0
        plan = FaultPlan.from_json((tmp_path / "bad.plan.json").read_text())
        assert plan.fault_point == "FP2"
        assert not models_equal(load_model(qm), load_model(tmp_path / "bad.json"))
        out = tmp_path / "grid.csv"
        argv = ["run", "--model", str(qm), "--data", data, "--fp", "FP1,FP4", "--fr", "10,50", "--seed", "0,1",
                "--out", str(out)]
        assert cli.main(argv) == 0
        first = out.read_bytes()
        assert cli.main(argv) == 0
        assert out.read_bytes() == first
        assert len(parse(first.decode())) == 3 * (2 * 2 * 2 + 1)

    def test_config_file_with_overrides(self, model_path, tmp_path, capsys):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"model": model_path, "data": DATA, "n_test": 300, "epsilon": {"gamma": 0.3}}))
        cli.main(["sweep-gamma", "--config", str(conf), "--values", "0.3,0.6", "--out", str(tmp_path / "sg.csv")])
        text = capsys.readouterr().out
        assert len(parse(text)) == 2
        cli.main(["run", "--config", str(conf), "--policy", "vanilla", "--fp", "FP1", "--fr", "10",
                  "--gamma", "0.8", "--out", str(tmp_path / "r.csv")])
        assert len(parse((tmp_path / "r.csv").read_text())) == 2

    def test_profile_mult(self, tmp_path, capsys):
        cli.main(["profile-mult", "--mult", "exact,trunc1", "--save-tables", str(tmp_path)])
        rows = parse(capsys.readouterr().out)
        assert rows[0]["mean_abs_error"] == "0.000000"
        assert (tmp_path / "trunc1.axm8").exists()
        cli.main(["profile-mult", "--mult", str(tmp_path / "trunc1.axm8")])
        again = parse(capsys.readouterr().out)
        assert again[0]["mean_abs_error"] == rows[1]["mean_abs_error"]
