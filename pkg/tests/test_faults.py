import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epsilon_lab.bits import SA0, SA1, force_bits
from epsilon_lab.engine import dense
from epsilon_lab.faults import (
    FaultError,
    FaultPlan,
    apply_plan,
    fault_count,
    fault_rate,
    lsb_geometric_probs,
    make_plan,
)
from epsilon_lab.model import get_layer_weights

from conftest import random_mlp


def force_one(value, bit, polarity):
    return int(force_bits(np.array([value], np.int8), np.array([0]), np.array([bit]), np.array([polarity]))[0])


class TestForceBits:
    def test_sign_bit_sa1(self):
        assert force_one(4, 7, SA1) == -124

    def test_sa0_clears(self):
        assert force_one(4, 2, SA0) == 0

    @pytest.mark.parametrize("bit", range(8))
    def test_zero_sa0_stays_zero(self, bit):
        assert force_one(0, bit, SA0) == 0

    @given(st.integers(-128, 127), st.integers(0, 7), st.sampled_from([SA0, SA1]))
    def test_matches_unsigned_bit_oracle(self, v, bit, pol):
        u = v & 0xFF
        u = (u | (1 << bit)) if pol == SA1 else (u & ~(1 << bit) & 0xFF)
        assert force_one(v, bit, pol) == (u - 256 if u >= 128 else u)

    @given(st.integers(-128, 127), st.integers(0, 7), st.sampled_from([SA0, SA1]))
    def test_idempotent(self, v, bit, pol):
        once = force_one(v, bit, pol)
        assert force_one(once, bit, pol) == once


class TestPlans:
    def test_count_example(self):
        assert fault_count(10, 50) == 5

    def test_plan_size_and_rate(self, mlp_model):
        plan = make_plan(mlp_model, "FP1", 30, seed=4)
        n = get_layer_weights(mlp_model, plan.layer_index).size
        assert len(plan.entries) == fault_count(30, n)
        assert len({e.weight_index for e in plan.entries}) == len(plan.entries)
        assert fault_rate(plan, mlp_model) == pytest.approx(len(plan.entries) / n * 100)

    def test_rate_examples(self, mlp_model):
        layer = mlp_model.weighted_positions[0]
        n = get_layer_weights(mlp_model, layer).size
        empty = FaultPlan(layer, (), 0.0, 0, n_total=n)
        full = make_plan(mlp_model, layer, 100, seed=0)
        assert fault_rate(empty, mlp_model) == 0.0
        assert fault_rate(full, mlp_model) == 100.0

    def test_fifty_weight_layer(self):
        F = random_mlp(0)
        p = F.weighted_positions[1]
        F.backbone[p] = dense(5, 10, np.ones((10, 5), np.int8), bias=np.zeros(10, np.int32), output_scale=1.0)
        F.backbone[p + 2] = dense(10, 6, np.ones((6, 10), np.int8), bias=np.zeros(6, np.int32), output_scale=1.0)
        F.backbone[p - 2] = dense(2, 5, np.ones((5, 2), np.int8), bias=np.zeros(5, np.int32), output_scale=1.0)
        F.exits[0].layers[0] = dense(5, 3, np.ones((3, 5), np.int8), bias=np.zeros(3, np.int32))
        F.exits[1].layers[0] = dense(10, 3, np.ones((3, 10), np.int8), bias=np.zeros(3, np.int32))
        F.validate()
        assert len(make_plan(F, p, 10, seed=1).entries) == 5

    def test_same_seed_same_plan(self, mlp_model):
        a = make_plan(mlp_model, "FP2", 50, bit_distribution="lsb-geometric", seed=9)
        b = make_plan(mlp_model, "FP2", 50, bit_distribution="lsb-geometric", seed=9)
        assert a == b
        assert a != make_plan(mlp_model, "FP2", 50, bit_distribution="lsb-geometric", seed=10)

    def test_json_round_trip(self, tmp_path, mlp_model):
        plan = make_plan(mlp_model, "FP3", 20, "SA0", seed=3, mode="hard-stuck")
        plan.save(tmp_path / "p.json")
        assert FaultPlan.from_json((tmp_path / "p.json").read_text()) == plan

    def test_lsb_geometric_closed_form(self):
        p0 = 1 / (2 * (1 - 2**-8))
        assert lsb_geometric_probs()[0] == pytest.approx(p0, abs=1e-12)
        assert p0 == pytest.approx(0.50196, abs=1e-5)

    def test_lsb_geometric_empirical(self):
        F = random_mlp(0, hidden=(100, 100, 100))
        bits = []
        for seed in range(2):
            plan = make_plan(F, "FP2", 50, bit_distribution="lsb-geometric", seed=seed)
            bits += [e.bit_position for e in plan.entries]
        assert len(bits) == 10000
        assert np.mean(np.array(bits) == 0) == pytest.approx(0.50196, abs=0.02)

    def test_sign_distribution(self, mlp_model):
        plan = make_plan(mlp_model, "FP1", 50, bit_distribution="sign", seed=0)
        assert {e.bit_position for e in plan.entries} == {7}

    @pytest.mark.parametrize(
        "kwargs",
        [{"fp": "FP9", "fr_percent": 10}, {"fp": "FP1", "fr_percent": 0}, {"fp": "FP1", "fr_percent": 120},
         {"fp": "FP1", "fr_percent": 10, "polarity": "SAX"}, {"fp": "FP1", "fr_percent": 10, "mode": "sticky"},
         {"fp": "FP1", "fr_percent": 10, "bit_distribution": "msb"}],
    )
    def test_invalid_arguments(self, mlp_model, kwargs):
        with pytest.raises(FaultError):
            make_plan(mlp_model, **kwargs)


class TestApply:
    def test_only_planned_weights_change(self, mlp_model):
        plan = make_plan(mlp_model, "FP2", 30, "SA1", seed=1)
        before = get_layer_weights(mlp_model, plan.layer_index).copy()
        apply_plan(mlp_model, plan)
        after = get_layer_weights(mlp_model, plan.layer_index)
        changed = set(np.flatnonzero(before.ravel() != after.ravel()))
        assert changed <= {e.weight_index for e in plan.entries}
        for e in plan.entries:
            assert (int(after.ravel()[e.weight_index]) >> e.bit_position) & 1 == 1

    def test_other_layers_untouched(self, mlp_model):
        golden = mlp_model.copy()
        plan = make_plan(mlp_model, "FP4", 50, seed=0)
        apply_plan(mlp_model, plan)
        for p in mlp_model.weighted_positions:
            if p != plan.layer_index:
                np.testing.assert_array_equal(get_layer_weights(mlp_model, p), get_layer_weights(golden, p))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([10, 30, 50]))
    def test_reapplying_is_idempotent(self, seed, fr):
        F = random_mlp(0)
        plan = make_plan(F, "FP1", fr, seed=seed)
        once = get_layer_weights(apply_plan(F, plan), plan.layer_index).copy()
        np.testing.assert_array_equal(get_layer_weights(apply_plan(F, plan), plan.layer_index), once)
