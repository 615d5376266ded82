"""Variable-density point generation and single-shot tour construction.

The initial trajectory is a short open path through a random
center-weighted point set: nearest-neighbor construction starting at
the k-space center, refined by 2-opt.  No feasibility with respect to
gradient limits is guaranteed at this stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Trajectory, ValidationError


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class PointSet:
    """Unordered k-space sample locations (m, 2), cycles/meter."""

    points: np.ndarray
    seed: int

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError("shape-mismatch", "points must be (m, 2)")

    @property
    def m(self) -> int:
        return self.points.shape[0]


def generate_vd_points(
    grid_n: int, fov: float, accel: float, decay: float = 3.0, seed: int = 0
) -> PointSet:
    """Draw a variable-density set of grid-snapped k-space points.

    ``m = round(grid_n**2 / accel)`` distinct cell centers are drawn
    without replacement with probability proportional to
    ``(1 + |k| / k_max) ** -decay``; the origin cell is always included.
    Deterministic for a fixed seed.
    """
    if not accel > 1:
        raise SamplingError("accel must be > 1")
    if not decay > 0:
        raise SamplingError("decay must be > 0")
    m = int(round(grid_n * grid_n / accel))
    if m < 2:
        raise SamplingError(f"accel too large: only {m} samples on a {grid_n}^2 grid")

    dk = 1.0 / fov
    ax = (np.arange(grid_n) - grid_n // 2) * dk
    ky, kx = np.meshgrid(ax, ax, indexing="ij")
    radius = np.hypot(ky, kx).ravel()
    k_max = grid_n / (2.0 * fov)
    prob = (1.0 + radius / k_max) ** (-decay)

    origin = int(np.argmin(radius))  # the k = 0 cell
    prob[origin] = 0.0
    prob = prob / prob.sum()
    rng = np.random.default_rng(seed)
    rest = rng.choice(grid_n * grid_n, size=m - 1, replace=False, p=prob)
    idx = np.concatenate(([origin], rest))
    points = np.column_stack((ky.ravel()[idx], kx.ravel()[idx]))
    return PointSet(points=points, seed=seed)


def center_index(points: np.ndarray) -> int:
    """Index of the point closest to the k-space origin (first on ties)."""
    pts = np.asarray(points, dtype=np.float64)
    return int(np.argmin(np.hypot(pts[:, 0], pts[:, 1])))


def path_length(points: np.ndarray, order: np.ndarray) -> float:
    """Total Euclidean length of the open path visiting ``order``."""
    p = np.asarray(points, dtype=np.float64)[np.asarray(order)]
    return float(np.sum(np.hypot(*(p[1:] - p[:-1]).T)))


def nn_tour(points: PointSet | np.ndarray, start: int) -> np.ndarray:
    """Repeated nearest-unvisited-neighbor ordering from ``start``.

    Ties break toward the lower index.  Returns a permutation of all
    point indices beginning at ``start``.
    """
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, float)
    n = pts.shape[0]
    if n == 0:
        raise SamplingError("empty point set")
    order = np.empty(n, dtype=np.int64)
    order[0] = start
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    current = start
    for i in range(1, n):
        d = np.sum((pts - pts[current]) ** 2, axis=1)
        d[visited] = np.inf
        current = int(np.argmin(d))  # argmin returns the first (lowest) index
        order[i] = current
        visited[current] = True
    return order


def two_opt(
    points: PointSet | np.ndarray, order: np.ndarray, max_passes: int = 1000
) -> np.ndarray:
    """Open-path 2-opt with the first element pinned.

    Each pass evaluates every segment reversal and applies the single
    best improving move (deterministic best-improvement), stopping when
    a full pass finds no improvement or ``max_passes`` is reached.
    """
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, float)
    order = np.array(order, dtype=np.int64)
    n = order.size
    if n < 4:
        return order
    dist = np.sqrt(
        np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    )
    for _ in range(max_passes):
        o = order
        # Reversing o[i..j] replaces edges (i-1, i) and (j, j+1) with
        # (i-1, j) and (i, j+1); for j = n-1 only the first edge changes.
        i = np.arange(1, n - 1)
        j = np.arange(1, n)
        ii, jj = np.meshgrid(i, j, indexing="ij")
        valid = jj > ii
        d_before = dist[o[ii - 1], o[ii]]
        gain = d_before - dist[o[ii - 1], o[jj]]
        inner = jj < n - 1
        jn = np.where(inner, jj + 1, jj)
        gain = gain + np.where(inner, dist[o[jj], o[jn]] - dist[o[ii], o[jn]], 0.0)
        gain[~valid] = -np.inf
        best = np.unravel_index(np.argmax(gain), gain.shape)
        if gain[best] <= 1e-12:
            break
        bi, bj = i[best[0]], j[best[1]]
        order = order.copy()
        order[bi : bj + 1] = order[bi : bj + 1][::-1]
    return order


def build_initial_trajectory(
    points: PointSet, dwell: float, fov: float, max_passes: int = 1000
) -> Trajectory:
    """Order ``points`` into a single-shot path and attach timing.

    The path starts at the origin-closest point and is the 2-opt
    refinement of the nearest-neighbor tour.  The result generally does
    not satisfy gradient or slew limits; feasibility comes later from
    the penalty-based optimizer.
    """
    start = center_index(points.points)
    order = two_opt(points, nn_tour(points, start), max_passes=max_passes)
    return Trajectory(points.points[order], dwell=dwell, fov=fov)
