import json
import logging
import time
from pathlib import Path

import numpy as np
import pytest

from epsilon_lab.data import gen_synthetic, load_mnist_split
from epsilon_lab.engine import conv2d, dense, simple
from epsilon_lab.model import ExitHead, ModelGraph, load_model, save_model
from epsilon_lab.train import FloatModel, default_cnn_arch, exit_accuracy, mlp_arch, quantize, train_multiexit

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"

# Golden CNN recipe shared by the acceptance suite.
CNN_EPOCHS = 10
CNN_LR = 0.05
CNN_SEED = 0


def random_mlp(seed: int, in_features: int = 2, classes: int = 3, hidden=(6, 6, 6)) -> ModelGraph:
    """Untrained int8 multi-exit MLP (4 weighted backbone layers)."""
    fm = FloatModel.init(mlp_arch(in_features, classes, hidden), seed)
    calib = gen_synthetic("blobs", 64, classes, seed, features=in_features)
    return quantize(fm, calib, seed=seed)


def five_weight_toy() -> ModelGraph:
    """One 1x1 conv with stored weights [-4, -2, 0, 2, 4] and a zero-weight
    2-class head, so every confidence is exactly 0.5."""
    w = np.array([-4, -2, 0, 2, 4], dtype=np.int8).reshape(5, 1, 1, 1)
    backbone = [conv2d(1, 5, 1, w, bias=np.zeros(5, np.int32), output_scale=1.0), simple("flatten")]
    head = [dense(5, 2, np.zeros((2, 5), np.int8), bias=np.zeros(2, np.int32))]
    return ModelGraph(backbone, [ExitHead(1, head)], 2, (1, 1, 1), 1.0, name="toy5")


@pytest.fixture
def mlp_model():
    return random_mlp(0)


@pytest.fixture
def toy5():
    return five_weight_toy()


@pytest.fixture(scope="session")
def mnist_split():
    if not (MNIST_DIR / "t10k-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST files not present under data/mnist")
    return load_mnist_split(MNIST_DIR, n_train=10000, n_test=2000)


@pytest.fixture(scope="session")
def mnist_golden(request, mnist_split):
    """Trained and quantized default CNN, cached across runs.

    Returns (quantized model path, clean float test accuracy per exit,
    seconds the training and quantization took when first built).
    """
    train, test = mnist_split
    cache = Path(request.config.cache.mkdir("epsilon_lab"))
    path = cache / f"cnn4_e{CNN_EPOCHS}_s{CNN_SEED}.json"
    meta_path = cache / f"cnn4_e{CNN_EPOCHS}_s{CNN_SEED}.meta.json"
    if not (path.exists() and meta_path.exists()):
        logging.getLogger("epsilon_lab").info("training golden CNN (cached afterwards)")
        t0 = time.perf_counter()
        fm = train_multiexit(default_cnn_arch(10), train, epochs=CNN_EPOCHS, lr=CNN_LR, seed=CNN_SEED)
        qm = quantize(fm, train.subset(0, 1000), name="cnn4", seed=CNN_SEED)
        save_model(qm, path)
        meta = {"float_test_accuracy": exit_accuracy(fm, test.images, test.labels),
                "build_seconds": time.perf_counter() - t0}
        meta_path.write_text(json.dumps(meta))
    meta = json.loads(meta_path.read_text())
    return path, np.array(meta["float_test_accuracy"]), meta["build_seconds"]


@pytest.fixture(scope="session")
def golden_cnn(mnist_golden):
    return load_model(mnist_golden[0])


# ------------------------------------------------------- acceptance report

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
