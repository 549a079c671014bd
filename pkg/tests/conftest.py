import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mixprec.desk import desk_problem, mlp
from mixprec.tensorcore import DENSE, QUADRATIC, Batch, Layer, ModelGraph


def quadratic_toy(a, w):
    """L = 0.5 * sum(a_i * w_i**2): one dense column fed a constant 1."""
    model = ModelGraph([
        Layer("w", DENSE, weights=np.asarray(w, dtype=np.float32).reshape(-1, 1)),
        Layer("head", QUADRATIC, coef=np.asarray(a, dtype=np.float32)),
    ])
    return model, Batch(np.ones((1, 1), dtype=np.float32), [0])


def random_batch(rng, n, dim, n_classes):
    return Batch(rng.normal(size=(n, dim)).astype(np.float32), rng.integers(0, n_classes, size=n))


@pytest.fixture(scope="session")
def desk():
    return desk_problem(seed=42)


@pytest.fixture
def tanh_mlp():
    model = mlp([4, 6, 5, 3], seed=42, activation="tanh")
    batch = random_batch(np.random.default_rng(7), 8, 4, 3)
    return model, batch


@pytest.fixture(scope="session")
def trained_tanh():
    """Three dense tanh layers (448 weights) fitted to four gaussian clusters."""
    from mixprec.desk import fit, gaussian_clusters

    batch = gaussian_clusters(64, n_classes=4, dim=8, seed=2)
    return fit(mlp([8, 16, 16, 4], seed=2, activation="tanh"), batch), batch


def run_cli(*args):
    from mixprec.cli import main

    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def desk_files(tmp_path_factory, desk):
    from mixprec.modelio import save_calibration, save_model

    root = tmp_path_factory.mktemp("desk")
    model, calib = desk
    save_model(model, root / "model")
    save_calibration(calib, root / "calib")
    return root


@pytest.fixture(scope="session")
def desk_run(desk_files):
    """One full pipeline run on the desk problem; returns (output dir, seconds)."""
    import time

    out = desk_files / "run1"
    start = time.perf_counter()
    rc = run_cli("run", "--model", desk_files / "model", "--calib", desk_files / "calib",
                 "--output-dir", out, "--seed", 42, "--accuracy-targets", "0.99,0.999")
    assert rc == 0
    return out, time.perf_counter() - start


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
