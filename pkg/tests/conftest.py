import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pooledweights.data import AnalysisSample, standardize_columns  # noqa: E402


def random_instance(seed, n, p, K, treat_frac=0.3, shift=0.3):
    """Random sample whose treated strata means sit inside the control cloud.

    Every stratum gets at least one treated and two control units.
    """
    rng = np.random.default_rng(seed)
    strata = np.arange(n) % K
    rng.shuffle(strata)
    w = rng.random(n) < treat_frac
    for k in range(K):
        idx = np.flatnonzero(strata == k)
        w[idx[0]] = True
        w[idx[1:3]] = False
    X = rng.normal(size=(n, p))
    X[w] = shift + 0.7 * X[w]
    y = X @ rng.normal(size=p) + strata + 1.5 * w + rng.normal(size=n)
    sample = AnalysisSample.from_arrays(y, w, strata, X)
    feats = standardize_columns(sample.X, sample.covariate_names)
    return sample, feats


@pytest.fixture
def toy_sample():
    """One stratum: controls at phi 0 and 2 with Y 0 and 4, one treated at phi 1 with Y 1."""
    return AnalysisSample.from_arrays(
        y=[1.0, 0.0, 4.0], w=[1, 0, 0], subgroup=["a", "a", "a"], X=np.array([[1.0], [0.0], [2.0]])
    )


@pytest.fixture
def medium_instance():
    return random_instance(11, 400, 4, 4)


# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
