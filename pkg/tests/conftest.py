import numpy as np
import pytest

from spadvae.datagen import GenConfig, gen_dataset
from spadvae.trainer import TrainConfig, new_checkpoint
from spadvae.vae import ModelConfig, init_params

# Reduced architecture used wherever the full 64x64 model would be slow.
TINY = ModelConfig(input_height=16, input_width=16, encoder_channels=(2, 3, 4), latent_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_params(rng):
    return init_params(TINY, rng)


@pytest.fixture
def tiny_frames(rng):
    return (rng.random((6, 1, 16, 16)) < 0.1).astype(np.float64)


@pytest.fixture(scope="session")
def tiny_gen():
    return GenConfig(width=16, height=16, dcr_p=0.02)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_gen):
    return gen_dataset(300, 100, tiny_gen, seed=5)


@pytest.fixture(scope="session")
def tiny_ckpt():
    return new_checkpoint(TrainConfig(model=TINY, seed=3))


# -- acceptance summary ----------------------------------------------------------
# Tests marked ``criterion(n, name)`` get one PASS/FAIL line each at the end of
# the run, whatever the verbosity.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    key = mark.args
    if rep.failed:
        _criteria[key] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _criteria.setdefault(key, "PASS")
    elif rep.skipped:
        _criteria.setdefault(key, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, name), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number} {name}: {status}")
