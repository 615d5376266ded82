"""Domain types and shared numeric conventions.

Conventions used throughout the package:

* All floating point is double precision (float64 / complex128).
* k-space coordinates are physical, in cycles/meter.  Axis 0 of a
  trajectory point pairs with image axis 0 (rows), axis 1 with columns.
* Image pixel coordinates are centered: along an axis of length n the
  pixel positions are ``(arange(n) - n//2) * (fov / n)`` meters, so the
  DC sample of the non-uniform transform equals the image sum.
* All container types are immutable after construction (their arrays
  are marked read-only) and therefore safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_GAMMA_HZ_PER_T = 42.577e6  # proton gyromagnetic ratio, Hz/T

CSM_NORM_TOL = 1e-6
# Sum-of-squares values at or below this are treated as "outside the coil
# support" and exempt from the normalization check.
CSM_SUPPORT_FLOOR = 1e-3


class ValidationError(ValueError):
    """Invariant violation on a domain type.

    ``code`` is a stable machine-readable identifier:
    ``shape-mismatch``, ``non-finite-value`` or ``csm-not-normalized``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ComplexImage:
    """2-D complex image (ny x nx), dimensionless intensity."""

    data: np.ndarray

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.complex128))
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise ValidationError(
                "shape-mismatch", f"image must be at least 2x2, got {data.shape}"
            )
        if not np.all(np.isfinite(data.view(np.float64))):
            raise ValidationError("non-finite-value", "image contains NaN or Inf")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class CoilMaps:
    """Per-coil complex sensitivities (nc x ny x nx), SOS-normalized."""

    maps: np.ndarray

    def __post_init__(self):
        maps = _freeze(np.asarray(self.maps, dtype=np.complex128))
        object.__setattr__(self, "maps", maps)
        if maps.ndim != 3 or maps.shape[0] < 1:
            raise ValidationError(
                "shape-mismatch", f"coil maps must be (nc, ny, nx), got {maps.shape}"
            )
        if not np.all(np.isfinite(maps.view(np.float64))):
            raise ValidationError("non-finite-value", "coil maps contain NaN or Inf")
        sos = np.sum(np.abs(maps) ** 2, axis=0)
        inside = sos > CSM_SUPPORT_FLOOR
        if inside.any():
            dev = np.abs(sos[inside] - 1.0).max()
            if dev > CSM_NORM_TOL:
                raise ValidationError(
                    "csm-not-normalized",
                    f"sum-of-squares deviates from 1 by {dev:.3e} inside support",
                )

    @property
    def nc(self) -> int:
        return self.maps.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.maps.shape


@dataclass(frozen=True)
class Trajectory:
    """Ordered single-shot k-space path.

    ``points`` is (m, 2) in cycles/meter; index order is acquisition
    time order (sample i is acquired at time ``i * dwell``).
    """

    points: np.ndarray
    dwell: float
    fov: float

    def __post_init__(self):
        pts = _freeze(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValidationError(
                "shape-mismatch", f"trajectory must be (m>=2, 2), got {pts.shape}"
            )
        if not np.all(np.isfinite(pts)):
            raise ValidationError("non-finite-value", "trajectory contains NaN or Inf")
        if not (self.dwell > 0):
            raise ValidationError("shape-mismatch", "dwell must be positive")
        if not (self.fov > 0):
            raise ValidationError("shape-mismatch", "fov must be positive")

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def k_max(self, grid_n: int) -> float:
        """Half-width of the Nyquist box for an n x n reconstruction grid."""
        return grid_n / (2.0 * self.fov)

    def in_nyquist_box(self, grid_n: int) -> bool:
        return bool(np.all(np.abs(self.points) <= self.k_max(grid_n) + 1e-12))

    def clamped(self, grid_n: int) -> "Trajectory":
        km = self.k_max(grid_n)
        return Trajectory(np.clip(self.points, -km, km), self.dwell, self.fov)

    def with_points(self, points: np.ndarray) -> "Trajectory":
        return Trajectory(points, self.dwell, self.fov)


@dataclass(frozen=True)
class KSpaceSamples:
    """Per-coil measurement vectors (nc x m)."""

    data: np.ndarray

    def __post_init__(self):
        data = _freeze(np.asarray(self.data, dtype=np.complex128))
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(
                "shape-mismatch", f"samples must be (nc, m), got {data.shape}"
            )
        if not np.all(np.isfinite(data.view(np.float64))):
            raise ValidationError("non-finite-value", "samples contain NaN or Inf")

    @property
    def nc(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PhysicsLimits:
    """Hardware limits: gyromagnetic ratio, gradient strength, slew rate."""

    gamma: float = DEFAULT_GAMMA_HZ_PER_T  # Hz/T
    g_max: float = 0.040                   # T/m
    s_max: float = 200.0                   # T/m/s

    def __post_init__(self):
        for name in ("gamma", "g_max", "s_max"):
            if not (getattr(self, name) > 0):
                raise ValidationError("shape-mismatch", f"{name} must be positive")

    @property
    def v_max(self) -> float:
        """Maximum trajectory speed, (cycles/m)/s."""
        return self.gamma * self.g_max

    @property
    def a_max(self) -> float:
        """Maximum trajectory acceleration, (cycles/m)/s^2."""
        return self.gamma * self.s_max


@dataclass(frozen=True)
class ScanConfig:
    """Acquisition timing and noise parameters.

    ``blur_scale`` multiplies elapsed readout time in the decay model so
    that short desk-scale readouts can emulate the severity of a long
    full-resolution readout.
    """

    te: float = 0.100          # s
    t2: float = 0.080          # s
    dwell: float = 1e-6        # s
    noise_sigma: float = 0.0   # per real/imag component
    accel: float = 8.0
    blur_scale: float = 1.0

    def __post_init__(self):
        if self.te < 0:
            raise ValidationError("shape-mismatch", "te must be >= 0")
        if not (self.t2 > 0):
            raise ValidationError("shape-mismatch", "t2 must be positive")
        if not (self.dwell > 0):
            raise ValidationError("shape-mismatch", "dwell must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("shape-mismatch", "noise_sigma must be >= 0")
        if not (self.accel > 1):
            raise ValidationError("shape-mismatch", "accel must be > 1")
        if self.blur_scale < 0:
            raise ValidationError("shape-mismatch", "blur_scale must be >= 0")


def validate(image: ComplexImage, csm: CoilMaps) -> None:
    """Validate one dataset element (image + coil maps) as a pair.

    Individual invariants are enforced at construction; this checks the
    cross-type shape contract.  Raises ValidationError with the first
    violated invariant, returns None when everything holds.
    """
    if csm.maps.shape[1:] != image.data.shape:
        raise ValidationError(
            "shape-mismatch",
            f"coil maps {csm.maps.shape} do not match image {image.data.shape}",
        )


def pixel_coords(n: int, fov: float) -> np.ndarray:
    """Centered pixel positions along one axis, in meters."""
    return (np.arange(n) - n // 2) * (fov / n)
