import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from distac.distcore import DiracMixture, GaussianMixture

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_gmm(rng, k=None, mu_scale=3.0, var_lo=0.05, var_hi=2.0):
    k = k or int(rng.integers(1, 4))
    return GaussianMixture(rng.dirichlet(np.ones(k)), rng.uniform(-mu_scale, mu_scale, k),
                           rng.uniform(var_lo, var_hi, k))


@st.composite
def gmms(draw, max_k=3):
    k = draw(st.integers(1, max_k))
    raw_w = draw(st.lists(st.floats(0.05, 1.0), min_size=k, max_size=k))
    mu = draw(st.lists(st.floats(-5, 5), min_size=k, max_size=k))
    var = draw(st.lists(st.floats(0.01, 3.0), min_size=k, max_size=k))
    w = np.array(raw_w) / np.sum(raw_w)
    return GaussianMixture(w, mu, var)


@st.composite
def diracs(draw, max_m=8):
    atoms = draw(st.lists(st.floats(-5, 5), min_size=1, max_size=max_m))
    return DiracMixture(atoms)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
