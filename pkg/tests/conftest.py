import os

# runtime criteria are stated single-threaded
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from gfss.fcp import FcpParams
from gfss.pipeline import build_dataset, desk_config, train_model
from gfss.synthgen import WorldSpec, make_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    return make_world(WorldSpec(channels=8, n_base=4, n_novel=4, height=12, width=12, noise_sigma=0.1, seed=3))


@pytest.fixture(scope="session")
def small_model(small_world):
    from gfss.training import TrainConfig
    cfg = TrainConfig(steps=60, lr=0.05, step_scale=1 / 8, batch=2, classes_per_image=1)
    return train_model(small_world, cfg)


@pytest.fixture(scope="session")
def desk_model():
    """The default world trained with the desk-scale budget (shared by slow tests)."""
    cfg = desk_config()
    ds = build_dataset(cfg)
    return cfg, ds, train_model(ds.world, cfg.train)


def random_params(channels, seed=0, dtype=np.float64):
    return FcpParams.init(channels, np.random.default_rng(seed), dtype)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
