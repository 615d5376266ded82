"""Single-shot forward model.

Exact (non-gridded) non-uniform DFT with coil sensitivities, the
relative T2 decay modulation along the readout, additive complex
Gaussian noise, and the analytic derivative of the transform with
respect to the trajectory coordinates.

The transform is evaluated as a dense (m x ny*nx) matrix of phase
terms, built once per trajectory by :class:`Encoder` and shared by the
forward, adjoint and derivative paths.  At desk scale (64x64 images,
m ~ 512) this is fast and keeps the adjoint and gradient tests exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CoilMaps,
    ComplexImage,
    KSpaceSamples,
    ScanConfig,
    Trajectory,
    ValidationError,
    pixel_coords,
)


class Encoder:
    """Dense NUDFT evaluator for a fixed trajectory and image grid.

    Rows of the phase matrix are ``exp(-2j*pi*k_j.r)`` over all centered
    pixel positions r.  Axis 0 of a k-space point pairs with image rows.
    """

    def __init__(self, points: np.ndarray, ny: int, nx: int, fov: float):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ValidationError("shape-mismatch", "points must be (m, 2)")
        self.points = points
        self.ny, self.nx, self.fov = ny, nx, fov
        self.ry = pixel_coords(ny, fov)
        self.rx = pixel_coords(nx, fov)
        ey = np.exp(-2j * np.pi * np.outer(points[:, 0], self.ry))
        ex = np.exp(-2j * np.pi * np.outer(points[:, 1], self.rx))
        # (m, ny*nx), row-major over pixels; the conjugate is kept around
        # because the adjoint and gradient paths hit it every CG iteration
        self.matrix = (ey[:, :, None] * ex[:, None, :]).reshape(points.shape[0], -1)
        self.matrix_conj = self.matrix.conj()
        self.deriv_factor = (
            -2j * np.pi * np.repeat(self.ry, nx),
            -2j * np.pi * np.tile(self.rx, ny),
        )

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def forward(self, x: np.ndarray, csm: np.ndarray) -> np.ndarray:
        """y[c, j] = sum_r csm[c](r) x(r) exp(-2j*pi*k_j.r)."""
        u = (csm * x[None]).reshape(csm.shape[0], -1)
        return u @ self.matrix.T

    def adjoint(
        self, y: np.ndarray, csm: np.ndarray, w: np.ndarray | None = None
    ) -> np.ndarray:
        """x(r) = sum_c conj(csm[c](r)) sum_j w_j y[c, j] exp(+2j*pi*k_j.r)."""
        z = y if w is None else y * w[None, :]
        grids = (z @ self.matrix_conj).reshape(csm.shape)
        return np.einsum("cyx,cyx->yx", csm.conj(), grids)

    def normal(self, x: np.ndarray, csm: np.ndarray, lam: float = 0.0) -> np.ndarray:
        out = self.adjoint(self.forward(x, csm), csm)
        if lam != 0.0:
            out = out + lam * x
        return out

    def phase_gradient(
        self, u: np.ndarray, v: np.ndarray, csm: np.ndarray
    ) -> np.ndarray:
        """Gradient of Re<v, A(k) u> with respect to the trajectory.

        ``u`` is an image, ``v`` a (nc, m) sample-space cotangent.
        Returns (m, 2) real.  This single kernel also serves the adjoint
        direction, since Re<xbar, A^H z> = Re<A xbar, z>.
        """
        cu = (csm * u[None]).reshape(csm.shape[0], -1)
        g = np.empty((self.m, 2))
        for axis in (0, 1):
            w = (cu * self.deriv_factor[axis][None, :]) @ self.matrix.T  # (nc, m)
            g[:, axis] = np.sum((np.conj(v) * w).real, axis=0)
        return g


def _encoder_for(k: Trajectory, csm: CoilMaps) -> Encoder:
    ny, nx = csm.maps.shape[1:]
    return Encoder(k.points, ny, nx, k.fov)


def forward(x: ComplexImage, csm: CoilMaps, k: Trajectory) -> KSpaceSamples:
    """Simulate undersampled k-space measurements of ``x``."""
    if csm.maps.shape[1:] != x.data.shape:
        raise ValidationError("shape-mismatch", "coil maps do not match image")
    enc = _encoder_for(k, csm)
    return KSpaceSamples(enc.forward(x.data, csm.maps))


def adjoint(
    y: KSpaceSamples,
    csm: CoilMaps,
    k: Trajectory,
    w: np.ndarray | None = None,
) -> ComplexImage:
    """Conjugate transform of :func:`forward`, optionally sample-weighted."""
    if y.nc != csm.nc:
        raise ValidationError("shape-mismatch", "coil count mismatch")
    if y.m != k.m:
        raise ValidationError("shape-mismatch", "sample count does not match trajectory")
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (k.m,):
            raise ValidationError("shape-mismatch", "weights must have length m")
        if np.any(w < 0):
            raise ValidationError("shape-mismatch", "weights must be non-negative")
    enc = _encoder_for(k, csm)
    return ComplexImage(enc.adjoint(y.data, csm.maps, w))


def trajectory_vjp(
    x: ComplexImage, csm: CoilMaps, k: Trajectory, cotangent: KSpaceSamples
) -> np.ndarray:
    """Exact gradient of Re<cotangent, forward(x)> with respect to k.

    Returns an (m, 2) real array, one row per trajectory point.
    """
    if csm.maps.shape[1:] != x.data.shape:
        raise ValidationError("shape-mismatch", "coil maps do not match image")
    if cotangent.nc != csm.nc or cotangent.m != k.m:
        raise ValidationError("shape-mismatch", "cotangent shape mismatch")
    enc = _encoder_for(k, csm)
    return enc.phase_gradient(x.data, cotangent.data, csm.maps)


@dataclass(frozen=True)
class ModulationVector:
    """Relative k-space modulation along the readout, values in (0, 1]."""

    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64)
        b.setflags(write=False)
        object.__setattr__(self, "b", b)
        if b.ndim != 1 or b.size < 1:
            raise ValidationError("shape-mismatch", "modulation must be 1-D")
        if np.any(b <= 0) or np.any(b > 1.0 + 1e-15):
            raise ValidationError("non-finite-value", "modulation values must be in (0, 1]")
        if np.any(np.diff(b) > 1e-15):
            raise ValidationError("non-finite-value", "modulation must be non-increasing")

    @property
    def m(self) -> int:
        return self.b.size


def blur_vector(
    k: Trajectory, scan: ScanConfig, include_te_factor: bool = False
) -> ModulationVector:
    """Relative T2 decay along the readout.

    Sample 0 (the k-space center, acquired first) is the reference with
    amplitude 1.  ``include_te_factor`` folds in the constant overall
    scale exp(-te/t2), which cancels in normalized metrics and is off by
    default.
    """
    j = np.arange(k.m, dtype=np.float64)
    t = j * k.dwell * scan.blur_scale
    b = np.exp(-t / scan.t2)
    if include_te_factor:
        b = b * np.exp(-scan.te / scan.t2)
    return ModulationVector(b)


def blur_scale_for_total_decay(
    target_log_decay: float, m: int, dwell: float, t2: float
) -> float:
    """blur_scale such that the last sample decays by exp(-target_log_decay)."""
    if m < 2:
        raise ValueError("need at least two samples")
    return target_log_decay * t2 / ((m - 1) * dwell)


def apply_blur(y: KSpaceSamples, b: ModulationVector) -> KSpaceSamples:
    if b.m != y.m:
        raise ValidationError("shape-mismatch", "modulation length does not match samples")
    return KSpaceSamples(y.data * b.b[None, :])


def add_noise(y: KSpaceSamples, sigma: float, seed: int) -> KSpaceSamples:
    """Add i.i.d. complex Gaussian noise, sigma per real/imag component."""
    if sigma < 0:
        raise ValidationError("shape-mismatch", "sigma must be >= 0")
    if sigma == 0:
        return y
    rng = np.random.default_rng(seed)
    n = rng.standard_normal((2,) + y.data.shape)
    return KSpaceSamples(y.data + sigma * (n[0] + 1j * n[1]))
