from pathlib import Path

import pytest

from robustlab.data import load_mnist_idx, train_test_subsets
from robustlab.models import Model, ModelSpec, TrainConfig, train

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


@pytest.fixture(scope="session")
def mnist():
    return load_mnist_idx(MNIST_DIR / "images-idx3-ubyte.gz", MNIST_DIR / "labels-idx1-ubyte.gz")


@pytest.fixture(scope="session")
def small_mnist(mnist):
    return train_test_subsets(mnist, 400, 200, 11)


@pytest.fixture(scope="session")
def small_convnet(small_mnist):
    """A quickly trained mini-ConvNet; good enough for trend checks."""
    train_set, _ = small_mnist
    m = Model.create(ModelSpec("convnet", [1, 4, 8], input_shape=(1, 28, 28), hidden=32), 0)
    train(m, train_set, TrainConfig(epochs=3, batch_size=32, seed=0))
    return m


# acceptance summary ---------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """``record(n, passed, details)`` stores the summary line of criterion n."""
    def _record(n: int, passed: bool, details: str) -> None:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {details}"
        ACCEPTANCE[n] = line
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
