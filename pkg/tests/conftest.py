import time

import numpy as np
import pytest

from mmdrestore import degradation as deg
from mmdrestore.core import make_rng
from mmdrestore.datasets import BlockQuant, make_toy_dataset
from mmdrestore.prior import build_prior, sample_prior_bank

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def prior_nets():
    return build_prior()


@pytest.fixture(scope="session")
def bank(prior_nets):
    return sample_prior_bank(prior_nets[0], 1000, seed=0)


@pytest.fixture(scope="session")
def small_model():
    """Untrained model with perturbed head so outputs vary with inputs."""
    m = deg.make_degradation_model(channels=8, n_blocks=2, n_mix=4, seed=5)
    rng = make_rng(17)
    for k in m.params:
        m.params[k] = m.params[k] + 0.05 * rng.standard_normal(m.params[k].shape)
    return m


@pytest.fixture(scope="session")
def blockquant_trained(prior_nets):
    """The toy Table-1 setup: 2000 blockquant pairs, 1800 train / 200 test."""
    mapping, synthesis = prior_nets
    pairs = make_toy_dataset(BlockQuant(4, 50), 2000, make_rng(1), mapping, synthesis)
    train_pairs, test_pairs = pairs[:1800], pairs[1800:]
    start = time.perf_counter()
    result = deg.train(deg.make_degradation_model(seed=0), train_pairs, deg.TrainConfig(epochs=6))
    elapsed = time.perf_counter() - start
    return result, train_pairs, test_pairs, elapsed


def random_image(rng, h=16, w=16, c=1):
    return np.asarray(rng.integers(0, 256, (h, w, c)), dtype=np.float64) / 255.0
