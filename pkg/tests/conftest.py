import pytest
import torch

from fpkit.data import mnist_bundle
from fpkit.nnkit import LabeledSet, TrainConfig, build_model, train

torch.set_num_threads(1)

# acceptance criterion lines, echoed in the terminal summary so they survive output capture
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist():
    return mnist_bundle(scenario="ltd", substitute_ratio=0.1, seed=0)


@pytest.fixture(scope="session")
def trained_victim(mnist):
    model = build_model("smallcnn", 0)
    train(model, mnist, TrainConfig(epochs=3, seed=0))
    model.info["role"] = "victim"
    return model


@pytest.fixture
def tiny_set():
    gen = torch.Generator().manual_seed(7)
    x = torch.rand(40, 1, 28, 28, generator=gen)
    y = torch.arange(40) % 10
    return LabeledSet(x, y)
