import numpy as np
import pytest

from sstraj.core import ComplexImage, Trajectory
from sstraj.phantom import synthetic_csm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_instance(rng, n=8, nc=2, m=16, fov=0.2, dwell=1e-6):
    """Random image, SOS-normalized coils, and trajectory inside the box."""
    img = ComplexImage(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    csm = synthetic_csm(n, nc, seed=int(rng.integers(0, 2**31)))
    k_box = n / (2.0 * fov)
    pts = rng.uniform(-k_box, k_box, size=(m, 2))
    traj = Trajectory(pts, dwell=dwell, fov=fov)
    return img, csm, traj


def cartesian_trajectory(n, fov, dwell=1e-6):
    """Fully-sampled uniform Cartesian trajectory (row-major order)."""
    dk = 1.0 / fov
    ax = (np.arange(n) - n // 2) * dk
    ky, kx = np.meshgrid(ax, ax, indexing="ij")
    pts = np.column_stack((ky.ravel(), kx.ravel()))
    return Trajectory(pts, dwell=dwell, fov=fov)
