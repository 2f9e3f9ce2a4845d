import os
from pathlib import Path

import numpy as np
import pytest

from sdc.tensor import GradTape, Tensor

MNIST_DIR = Path(os.environ.get("SDC_MNIST_DIR", "/root/data/mnist"))
OOD_IMAGES = Path(os.environ.get("SDC_OOD_IMAGES", "/root/data/fashion/fashion-images-idx3-ubyte"))
RUNS_DIR = Path(os.environ.get("SDC_RUNS_DIR", Path(__file__).resolve().parents[1] / "acceptance_runs"))

# (criterion, verdict, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {crit:<28} {verdict:<5} {detail}")


def mnist_paths():
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    paths = {k: MNIST_DIR / v for k, v in names.items()}
    if not all(p.exists() for p in paths.values()):
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set SDC_MNIST_DIR)")
    return {k: str(v) for k, v in paths.items()}


def fd_gradient_check(loss_fn, tensors, n_coords=100, h=1e-5, seed=0):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    Returns the worst |analytic - numeric| / max(1, |analytic|) over
    ``n_coords`` random coordinates spread across ``tensors``.
    """
    for t in tensors:
        t.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    sizes = np.array([t.data.size for t in tensors])
    worst = 0.0
    for _ in range(n_coords):
        k = rng.choice(len(tensors), p=sizes / sizes.sum())
        flat = tensors[k].data.reshape(-1)
        j = rng.integers(flat.size)
        old = flat[j]
        flat[j] = old + h
        up = float(loss_fn().data)
        flat[j] = old - h
        down = float(loss_fn().data)
        flat[j] = old
        num = (up - down) / (2 * h)
        a = analytic[k].reshape(-1)[j]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
