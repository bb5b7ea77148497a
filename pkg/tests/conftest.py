"""Shared fixtures: single-threaded BLAS and small seeded SAR instances."""

import numpy as np
import pytest
import threadpoolctl

from tlmma_sar.estimators import Dataset
from tlmma_sar.spatial import build_grid_weights, row_normalize


@pytest.fixture(scope="session", autouse=True)
def _single_threaded_blas():
    # every matrix in this package is small; multithreaded BLAS only adds
    # synchronization overhead and makes timings flaky
    with threadpoolctl.threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def grid25():
    return row_normalize(build_grid_weights(25, "horizontal"))


def make_sar_dataset(n: int, p: int, seed: int, rho: float = 0.4,
                     noise: float = 1.0, beta=None, W=None, label: str = ""):
    """One SAR draw on the row-normalized horizontal grid."""
    if W is None:
        W = row_normalize(build_grid_weights(n, "horizontal"))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if beta is None:
        beta = rng.standard_normal(p)
    beta = np.asarray(beta, dtype=float)
    eps = noise * rng.standard_normal(n)
    S = np.eye(n) - rho * W.entries
    y = np.linalg.solve(S, X @ beta + eps)
    return Dataset(X=X, y=y, W=W, label=label), beta
