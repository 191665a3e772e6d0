import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gfnoma.simulator import PowerProfile, gen_spreading, simulate_frames

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_frames():
    """A handful of moderate-SNR frames (K=6, Nc=8, M=2, Ns=4)."""
    codes = gen_spreading(6, 8, seed=3)
    return simulate_frames(40, codes, PowerProfile.homogeneous(6), M=2, Ns=4, Pmax=0.5,
                           noise_var=0.05, seed=11)


def orthogonal_codes(K, Nc):
    """Columns of a Sylvester Hadamard matrix (Nc a power of two, K <= Nc)."""
    H = np.array([[1]])
    while H.shape[0] < Nc:
        H = np.block([[H, H], [H, -H]])
    return H[:, :K].astype(np.int8)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
