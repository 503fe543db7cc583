import numpy as np
import pytest

from slumbench.synth import SyntheticWorldSpec, synth_world

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_line("")
        terminalreporter.write_line("=" * 30 + " acceptance criteria " + "=" * 30)
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_world():
    """Two cities x two years, easy signal; shared across pipeline tests."""
    spec = SyntheticWorldSpec(n_cities=2, years=(2021, 2022), height=40, width=40,
                              zero_share=0.8, snr=3.0, drift=0.5, year_jitter=0.3,
                              cluster_radius=4.0, seed=101)
    return synth_world(spec)


@pytest.fixture(scope="session")
def small_corpus(small_world):
    from slumbench.pipeline import build_corpus

    return build_corpus(small_world)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
