import numpy as np
import pytest

from mfvi_bnn.variational import VariationalPosterior


def random_posterior(n, d_x, d_y, seed=0, mean_scale=1.0, rho_range=(-2.0, 0.5)):
    gen = np.random.default_rng(seed)
    return VariationalPosterior(
        gen.normal(0.0, mean_scale, (n, d_y)),
        gen.uniform(*rho_range, (n, d_y)),
        gen.normal(0.0, mean_scale, (n, d_x)),
        gen.uniform(*rho_range, (n, d_x)),
    )


@pytest.fixture
def small_posterior():
    return random_posterior(4, 3, 2, seed=11)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
