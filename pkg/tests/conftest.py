import numpy as np
import pytest

from matdist.response import builtin


@pytest.fixture(scope="session")
def example1():
    return builtin("example1")


@pytest.fixture(scope="session")
def example2():
    return builtin("example2", r=1.0)


@pytest.fixture(scope="session")
def det_cal():
    return builtin("det_cal")


@pytest.fixture(scope="session")
def identity_cal():
    return builtin("identity_cal")


def random_invertible(rng, det_min=0.1, cond_max=50.0):
    """Random well-conditioned 3x3 gradient (test-side sampler)."""
    while True:
        F = rng.standard_normal((3, 3))
        if abs(np.linalg.det(F)) >= det_min and np.linalg.cond(F) <= cond_max:
            return F


def expm3(A, t=1.0):
    """Matrix exponential by scaling-and-squaring Taylor; 3x3 only."""
    A = t * np.asarray(A, dtype=float)
    norm = np.linalg.norm(A, 2)
    squarings = max(0, int(np.ceil(np.log2(max(norm, 1e-16) / 0.25))))
    B = A / (2.0**squarings)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, 24):
        term = term @ B / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out
