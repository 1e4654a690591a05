import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from resolvent_sc import model, oracle

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_system(dim, seed, scale=0.1, complex_=False):
    """Sorted random energies with a dense Hermitian coupling of size ``scale``."""
    rng = np.random.default_rng(seed)
    a = np.sort(rng.uniform(-1, 1, dim))
    v = rng.standard_normal((dim, dim))
    if complex_:
        v = v + 1j * rng.standard_normal((dim, dim))
    v = scale * (v + v.conj().T) / 2
    v[np.diag_indices(dim)] = 0
    vd = scale * rng.standard_normal(dim)
    return model.CoupledSystem(a, vd, v, f"random({dim},{seed})", seed)


@pytest.fixture(scope="session")
def system50():
    return random_system(50, 11)


@pytest.fixture(scope="session")
def spec50(system50):
    return oracle.diagonalize(system50)


@pytest.fixture(scope="session")
def ensemble200():
    prof = model.gaussian_profile(200, 2.0, 0.5, 0.3, seed=5)
    return model.build_banded_ensemble(200, prof)


@pytest.fixture(scope="session")
def ising10():
    return model.build_ising_chain(10, 1.0, 0.5, 1.05)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES
