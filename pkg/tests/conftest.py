import numpy as np
import pytest

from logomarl.dataset import collect, split
from logomarl.envs import EnvSpec
from logomarl.world_model import WorldModelConfig, train_world_model


@pytest.fixture(scope="session")
def spec():
    return EnvSpec()


@pytest.fixture(scope="session")
def toy_data(spec):
    """500 medium-tier transitions (20 episodes)."""
    return collect(spec, "medium", 20, 0)


@pytest.fixture(scope="session")
def toy_split(toy_data):
    return split(toy_data, 0.2, 0)


@pytest.fixture(scope="session")
def small_wm(spec, toy_split):
    """A small world model trained briefly; enough to produce sensible rollouts."""
    train, val = toy_split
    return train_world_model(train, val, WorldModelConfig(hidden=32, steps=2000, seed=0), spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
