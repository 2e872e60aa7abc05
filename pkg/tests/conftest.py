"""Shared trained toy models; training is seeded so every fixture is reproducible."""

import pytest

from pelta.harness import gen_synthetic, train_toy
from pelta.zoo import build_model


@pytest.fixture(scope="session")
def data():
    return gen_synthetic(800, seed=11), gen_synthetic(400, seed=12)


def _trained(name, train, seed=0, steps=200):
    g = build_model(name, seed=seed)
    g.params = train_toy(g, train, steps=steps, lr=0.1, seed=seed).params
    return g


@pytest.fixture(scope="session")
def trained_cnn(data):
    return _trained("resnet_stem_cnn", data[0])


@pytest.fixture(scope="session")
def trained_vit(data):
    return _trained("tiny_vit", data[0])


@pytest.fixture(scope="session")
def trained_ws(data):
    return _trained("ws_cnn", data[0])


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
