import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def bumpy_patch(rng, n=300, side=10.0, amp=0.3):
    """Gently curved height field; generic enough to avoid k-NN ties."""
    xy = rng.random((n, 2)) * side
    z = amp * np.sin(xy[:, 0]) * np.cos(0.7 * xy[:, 1]) + 0.05 * rng.standard_normal(n)
    return np.column_stack([xy, z])
