import numpy as np
import pytest

from surrogate_ate.data import Dataset, Observation


def make_dataset(n_lab: int, n_unl: int, d_x: int = 1, d_s: int = 1, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    n = n_lab + n_unl
    r = np.r_[np.ones(n_lab, dtype=int), np.zeros(n_unl, dtype=int)]
    rng.shuffle(r)
    return Dataset(x=rng.uniform(-1, 1, (n, d_x)), t=rng.integers(0, 2, n), s=rng.normal(size=(n, d_s)), r=r,
                   y=rng.normal(size=n_lab))


@pytest.fixture
def small_obs() -> list[Observation]:
    return [
        Observation((0.1,), 1, (0.5,), 1, 2.0),
        Observation((-0.3,), 0, (1.5,), 1, -1.0),
        Observation((0.7,), 1, (0.2,), 1, 0.25),
        Observation((0.0,), 0, (-0.4,), 0, None),
    ]


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
