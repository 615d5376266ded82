"""Sampling-density compensation weights.

Iterates ``w <- w / (w (*) G)`` with a truncated Gaussian kernel over
pairwise k-space distances, then rescales so a constant image passes
through the weighted adjoint-of-forward composite with its mean intact
(measured against the N^2 DC response of the plain normal operator).
With that scale a fully-sampled uniform Cartesian trajectory gets unit
weights, which keeps regridding amplitudes comparable across
trajectories and makes the degenerate Cartesian pipeline an exact
inverse.

Distances are measured on the periodic Nyquist box so that uniform
sampling yields uniform weights without edge bias.  Weights are a pure
function of the point multiset; order never matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Trajectory, ValidationError
from .encoding import Encoder


class DensityError(ValueError):
    """Raised when weights cannot be normalized (degenerate sampling)."""


@dataclass(frozen=True)
class DcfWeights:
    w: np.ndarray
    iterations_used: int

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        if w.ndim != 1:
            raise ValidationError("shape-mismatch", "weights must be 1-D")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("non-finite-value", "weights must be finite and >= 0")

    @property
    def m(self) -> int:
        return self.w.size


def _kernel_matrix(points: np.ndarray, grid_n: int, fov: float, kernel_sigma: float) -> np.ndarray:
    dk = 1.0 / fov
    width = grid_n * dk  # periodic box period per axis
    sigma = kernel_sigma * dk
    support = 4.0 * sigma
    d2 = np.zeros((points.shape[0], points.shape[0]))
    for axis in range(2):
        d = np.abs(points[:, axis, None] - points[None, :, axis])
        d = np.minimum(d, width - d)
        d2 += d * d
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    g[d2 > support * support] = 0.0
    return g


def pipe_menon(
    k: Trajectory | np.ndarray,
    grid_n: int,
    fov: float | None = None,
    kernel_sigma: float = 0.7,
    iters: int = 20,
    encoder: Encoder | None = None,
) -> DcfWeights:
    """Iterative density compensation for a point multiset.

    Args:
        k: trajectory or raw (m, 2) point array, cycles/meter.
        grid_n: reconstruction grid size (sets the Nyquist box and the
            normalization transform).
        fov: field of view in meters; defaults to the trajectory's.
        kernel_sigma: Gaussian width in grid cells (support 4 sigma).
        iters: number of fixed-point iterations, >= 1.
        encoder: optional prebuilt transform for the same points, reused
            for the normalization step.

    Raises:
        DensityError: degenerate sampling (e.g. all points coincide, or
            no usable DC response to normalize against).
    """
    if isinstance(k, Trajectory):
        points = k.points
        fov = k.fov if fov is None else fov
    else:
        points = np.asarray(k, dtype=np.float64)
        if fov is None:
            raise ValueError("fov is required when passing raw points")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if kernel_sigma <= 0:
        raise ValueError("kernel_sigma must be positive")

    m = points.shape[0]
    if m > 1 and float(np.ptp(points[:, 0])) == 0.0 and float(np.ptp(points[:, 1])) == 0.0:
        raise DensityError("all trajectory points coincide")

    g = _kernel_matrix(points, grid_n, fov, kernel_sigma)
    w = np.ones(m)
    for _ in range(iters):
        w = w / (g @ w)

    if encoder is None:
        encoder = Encoder(points, grid_n, grid_n, fov)
    ones = np.ones((grid_n, grid_n), dtype=np.complex128)
    csm = np.ones((1, grid_n, grid_n), dtype=np.complex128)
    y = encoder.forward(ones, csm)
    u = encoder.adjoint(y, csm, w)
    scale = float(np.mean(u.real)) / (grid_n * grid_n)
    if not np.isfinite(scale) or scale <= 0:
        raise DensityError("sampling has no usable DC response")
    return DcfWeights(w=w / scale, iterations_used=iters)
