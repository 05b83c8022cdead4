import numpy as np
import pytest

from epsilon_lab.approx_arith import make_exact, make_truncated
from epsilon_lab.engine import dense, layer_forward, quantize_input, simple
from epsilon_lab.faults import apply_plan, make_plan
from epsilon_lab.model import (
    ExitHead,
    InferenceSession,
    ModelError,
    ModelFormatError,
    ModelGraph,
    fault_points,
    forward_exit,
    get_layer_weights,
    load_model,
    models_equal,
    save_model,
    update_layer,
)

from conftest import random_mlp


def three_layer_model(rng=np.random.default_rng(0)):
    def w(o, i):
        return rng.integers(-20, 20, (o, i)).astype(np.int8)

    backbone = [
        dense(4, 5, w(5, 4), bias=np.zeros(5, np.int32), output_scale=0.5),
        simple("relu"),
        dense(5, 3, w(3, 5), bias=np.zeros(3, np.int32)),
    ]
    exits = [ExitHead(1, [dense(5, 3, w(3, 5), bias=np.zeros(3, np.int32))]), ExitHead(2, [])]
    return ModelGraph(backbone, exits, 3, (4,), 1 / 127)


class TestWeightsAccess:
    def test_read_known_weights(self):
        F = three_layer_model()
        update_layer(F, 0, np.arange(20))
        np.testing.assert_array_equal(get_layer_weights(F, 0).ravel(), np.arange(20))

    def test_relu_has_no_weights(self):
        with pytest.raises(ModelError, match="has no weights"):
            get_layer_weights(three_layer_model(), 1)

    def test_update_is_idempotent(self):
        F = three_layer_model()
        W = get_layer_weights(F, 2).copy()
        update_layer(F, 2, W)
        update_layer(F, 2, W)
        np.testing.assert_array_equal(get_layer_weights(F, 2), W)

    def test_wrong_length(self):
        with pytest.raises(ModelError):
            update_layer(three_layer_model(), 0, np.zeros(3))

    def test_hard_stuck_reasserts_after_write(self, mlp_model):
        plan = make_plan(mlp_model, "FP4", 50, "SA1", bit_distribution="sign", seed=2, mode="hard-stuck")
        apply_plan(mlp_model, plan)
        p = plan.layer_index
        update_layer(mlp_model, p, np.zeros_like(get_layer_weights(mlp_model, p)))
        w = get_layer_weights(mlp_model, p).ravel()
        idx = [e.weight_index for e in plan.entries]
        assert np.all(w[idx] == -128)
        assert np.count_nonzero(w) == len(idx)


class TestFaultPoints:
    def test_mlp_mapping(self, mlp_model):
        pos = mlp_model.weighted_positions
        assert fault_points(mlp_model) == {"FP4": pos[0], "FP3": pos[1], "FP2": pos[2], "FP1": pos[3]}

    def test_too_few_layers(self):
        with pytest.raises(ModelError):
            fault_points(three_layer_model())


class TestForwardExit:
    def test_single_exit_matches_sequential(self):
        F = three_layer_model()
        F.exits = [ExitHead(2, [])]
        x = np.random.default_rng(1).uniform(-1, 1, (3, 4))
        m = make_truncated(1)
        t = quantize_input(x, F.input_scale)
        for layer in F.backbone:
            t = layer_forward(t, layer, m)
        logits, _, _ = forward_exit(F, x, 0, m)
        np.testing.assert_array_equal(logits.data, t.data)

    def test_prefix_counted_once(self):
        F = three_layer_model()
        s = InferenceSession(F, np.zeros((1, 4)), make_exact())
        s.forward_exit(0)
        s.forward_exit(1)
        lo, ho = F.layer_ops(), F.head_ops()
        assert s.ops == sum(lo) + ho[0] + ho[1] == 20 + 15 + 15
        assert s.ops == F.exit_path_ops(1)

    def test_uniform_logits(self):
        F = three_layer_model()
        update_layer(F, 2, np.zeros(15))
        _, conf, _ = forward_exit(F, np.ones(4), 1, make_exact())
        assert conf[0] == pytest.approx(1 / 3)

    def test_input_shape_checked(self):
        with pytest.raises(ModelError):
            InferenceSession(three_layer_model(), np.zeros((2, 5)), make_exact())


class TestValidation:
    def test_final_exit_must_follow_last_layer(self):
        F = three_layer_model()
        with pytest.raises(ModelError):
            ModelGraph(F.backbone, F.exits[:1], 3, (4,), 1.0)

    def test_head_width(self):
        F = three_layer_model()
        bad = [ExitHead(1, [dense(5, 2, np.zeros((2, 5), np.int8))]), F.exits[1]]
        with pytest.raises(ModelError):
            ModelGraph(F.backbone, bad, 3, (4,), 1.0)


class TestSerialization:
    def test_round_trip(self, tmp_path, mlp_model):
        save_model(mlp_model, tmp_path / "m.json")
        loaded = load_model(tmp_path / "m.json")
        assert models_equal(mlp_model, loaded)

    def test_loaded_forward_agrees(self, tmp_path, mlp_model):
        save_model(mlp_model, tmp_path / "m.json")
        loaded = load_model(tmp_path / "m.json")
        x = np.random.default_rng(3).uniform(0, 1, (8, 2))
        for i in range(mlp_model.n_exits):
            a, _, _ = forward_exit(mlp_model, x, i, make_truncated(2))
            b, _, _ = forward_exit(loaded, x, i, make_truncated(2))
            np.testing.assert_array_equal(a.data, b.data)

    def test_corrupt_magic(self, tmp_path, mlp_model):
        save_model(mlp_model, tmp_path / "m.json")
        w8 = tmp_path / "m.w8"
        w8.write_bytes(b"JUNK" + w8.read_bytes()[4:])
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(tmp_path / "m.json")

    def test_truncated_weights(self, tmp_path, mlp_model):
        save_model(mlp_model, tmp_path / "m.json")
        w8 = tmp_path / "m.w8"
        w8.write_bytes(w8.read_bytes()[:20])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m.json")

    def test_random_models_round_trip(self, tmp_path):
        for seed in range(5):
            F = random_mlp(seed, hidden=(3 + seed, 4, 5))
            save_model(F, tmp_path / f"r{seed}.json")
            assert models_equal(F, load_model(tmp_path / f"r{seed}.json"))
