import sys

import numpy as np
import pytest

from ttabench.model import Model, pretrain, to_rbn
from ttabench.numcore import make_rng
from ttabench.shiftlab import ShiftTransform, derive_target, random_domain, sample_domain

C, D = 4, 8


@pytest.fixture(scope="session")
def domains():
    src = random_domain("src", C, D, separation=0.6, cov_scale=0.05, seed=3)
    tgt = derive_target(src, ShiftTransform.from_magnitude(D, 1.0, angle=0.1, seed=1), 0.0,
                        name="tgt")
    return src, tgt


@pytest.fixture(scope="session")
def source_data(domains):
    src, _ = domains
    return sample_domain(src, 600, make_rng(0, 1)), sample_domain(src, 200, make_rng(0, 2))


@pytest.fixture(scope="session")
def target_data(domains):
    return sample_domain(domains[1], 480, make_rng(0, 3))


def _train(kind, source_data):
    train, val = source_data
    m = Model.init(D, C, width=16, depth=2, norm="batch" if kind == "rbn" else kind, seed=0)
    pretrain(m, train.X, train.y, epochs=8, seed=0, val=(val.X, val.y))
    if kind == "rbn":
        acc = m.source_val_accuracy
        m = to_rbn(m)
        m.theta0 = None
        m.freeze_source()
        m.source_val_accuracy = acc
    return m


@pytest.fixture(scope="session")
def trained(source_data):
    return {k: _train(k, source_data) for k in ("layer", "iabn", "rbn")}


@pytest.fixture
def ln_model(trained):
    return trained["layer"].clone()


def batches(data, size=16):
    return [data.X[i:i + size] for i in range(0, len(data), size)]


def params_equal(a: Model, b: Model, slots=None) -> bool:
    keys = slots if slots is not None else a.params
    return all(a.params[k].tobytes() == b.params[k].tobytes() for k in keys)


@pytest.fixture
def rng():
    return make_rng(1234)


__all__ = ["batches", "params_equal", "np"]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
