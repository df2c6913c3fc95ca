import numpy as np
import pytest

from smrt.hierlasso import tune_bic
from smrt.marginal import fit_marginal
from smrt.quadratic import assemble
from smrt.rng import stream
from smrt.simulation import SimConfig, generate

ACCEPTANCE_LINES: list = []


def small_beta0():
    b = np.zeros((5, 3))
    b[0] = [1.0, 1.0, 0.8]
    b[1, 0] = 0.8
    b[2, 1] = -0.7
    return b


@pytest.fixture(scope="session")
def small_case():
    """A fitted n=300, p=5, M=3 dataset shared by the module tests."""
    config = SimConfig(n=300, p=5, M=3, beta0=small_beta0(), reps=1, B=0)
    dataset = generate(config, stream(11, "data"))
    fits = [fit_marginal(dataset, m) for m in range(dataset.M)]
    system = assemble(fits)
    sparse = tune_bic(system)
    return {"config": config, "dataset": dataset, "fits": fits, "system": system, "sparse": sparse}


@pytest.fixture(scope="session")
def record_acceptance():
    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"criterion {number:>2} {name}: {'PASS' if passed else 'FAIL'}"
        ACCEPTANCE_LINES.append(line + (f"  ({detail})" if detail else ""))

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
