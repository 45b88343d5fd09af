import numpy as np
import pytest

from discivec.gmm import GmmUbm


def random_ubm(rng, C=4, F=3, var_range=(0.5, 2.0)):
    w = rng.uniform(0.5, 1.5, C)
    return GmmUbm(w / w.sum(), rng.standard_normal((C, F)), rng.uniform(*var_range, (C, F)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sample_tv_stats(ubm, t_true, num_utts, frames, rng):
    """Statistics drawn straight from the total-variability model.

    Counts are multinomial over UBM weights; whitened frames assigned to component c
    are N(Tbar_c phi, I), so the whitened first-order sum is N(N_c Tbar_c phi, N_c I).
    """
    from discivec.gmm import SuffStats

    sd = np.sqrt(ubm.variances)
    tbar = t_true / sd[:, :, None]
    C, F, D = t_true.shape
    out = []
    for _ in range(num_utts):
        n = rng.multinomial(frames, ubm.weights).astype(float)
        phi = rng.standard_normal(D)
        fbar = n[:, None] * (tbar @ phi) + np.sqrt(n)[:, None] * rng.standard_normal((C, F))
        f = fbar * sd + n[:, None] * ubm.means
        out.append(SuffStats(n, f, fbar))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
