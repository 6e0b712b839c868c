import numpy as np
import pytest

from attnsink import corpus as C
from attnsink.model import ModelConfig, init_params, train_toy_model
from attnsink.serialization import quantize_params

FIXTURE_SEED = 0
FIXTURE_SCENES = 64
FIXTURE_EPOCHS = 200
FIXTURE_LR = 0.5

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def fixture_scenes():
    return C.generate_corpus(FIXTURE_SEED, FIXTURE_SCENES)


@pytest.fixture(scope="session")
def fixture_data(fixture_scenes):
    return [(C.render_scene(s), s.caption) for s in fixture_scenes]


@pytest.fixture(scope="session")
def untrained_params():
    return init_params(ModelConfig(), FIXTURE_SEED)


@pytest.fixture(scope="session")
def trained_params(untrained_params, fixture_data):
    """The seeded fixture model, trained once per session and stored as float32."""
    trained = train_toy_model(untrained_params, fixture_data, FIXTURE_EPOCHS, FIXTURE_LR,
                              C.prompt_ids())
    out = quantize_params(trained)
    out.loss_history = list(trained.loss_history)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
