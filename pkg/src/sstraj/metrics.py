"""Image-quality metrics, task loss, and the trajectory feasibility penalty.

PSNR and SSIM operate on magnitude images.  SSIM uses an 11x11 Gaussian
window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range ``max(|ref|)``,
valid-mode windows (fully inside the image), mean over the valid map;
these values are fixed so metric numbers are bit-for-bit reproducible.

The task loss is mean-per-pixel L1 on magnitudes plus ``1 - SSIM``; the
feasibility penalty is a hinge on per-sample velocity and acceleration
norms against the hardware-derived limits.  Analytic gradients for both
are provided for the trajectory optimizer; the hinge subgradient at a
kink uses the zero branch, so exactly-feasible points are stationary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

from .core import ComplexImage, PhysicsLimits, Trajectory, ValidationError

PSNR_CAP_DB = 300.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    """Penalty weights: beta scales the whole constraint term."""

    beta: float = 1.0
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    per_axis: bool = False

    def __post_init__(self):
        for name in ("beta", "lambda_v", "lambda_a"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError("non-finite-value", f"{name} must be finite and >= 0")


def _magnitude(img: ComplexImage | np.ndarray) -> np.ndarray:
    data = img.data if isinstance(img, ComplexImage) else np.asarray(img)
    return np.abs(data)


def psnr(test: ComplexImage | np.ndarray, ref: ComplexImage | np.ndarray) -> float:
    """20*log10(max|ref| / rmse(|test|, |ref|)), capped at 300 dB."""
    t, r = _magnitude(test), _magnitude(ref)
    if t.shape != r.shape:
        raise ValidationError("shape-mismatch", "image shapes differ")
    peak = float(r.max())
    if peak == 0.0:
        raise ValidationError("non-finite-value", "reference image is identically zero")
    rmse = float(np.sqrt(np.mean((t - r) ** 2)))
    if rmse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * np.log10(peak / rmse))


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()

_KERNEL = _ssim_kernel()


def _ssim_maps(x: np.ndarray, y: np.ndarray, dynamic_range: float):
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    win = lambda a: correlate2d(a, _KERNEL, mode="valid")
    mx, my = win(x), win(y)
    cxx, cyy, cxy = win(x * x), win(y * y), win(x * y)
    sx = cxx - mx * mx
    sy = cyy - my * my
    sxy = cxy - mx * my
    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sx + sy + c2
    return mx, my, sx, sy, sxy, a1, a2, b1, b2


def ssim(test: ComplexImage | np.ndarray, ref: ComplexImage | np.ndarray) -> float:
    """Mean local SSIM between magnitude images."""
    x, y = _magnitude(test), _magnitude(ref)
    if x.shape != y.shape:
        raise ValidationError("shape-mismatch", "image shapes differ")
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError("shape-mismatch", f"image smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    dr = float(y.max())
    if dr == 0.0:
        dr = 1.0
    *_, a1, a2, b1, b2 = _ssim_maps(x, y, dr)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_gradient(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM of magnitude images plus d(SSIM)/dx.

    The dynamic range depends on the reference only, so there is no
    gradient path through it.
    """
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError("shape-mismatch", "image smaller than SSIM window")
    dr = float(y.max())
    if dr == 0.0:
        dr = 1.0
    mx, my, sx, sy, sxy, a1, a2, b1, b2 = _ssim_maps(x, y, dr)
    s = a1 * a2 / (b1 * b2)
    # d mean(S) / d(mu_x, C(x*x), C(x*y)) at each window position; mu_x
    # also enters sigma_x^2 and sigma_xy through the centering terms.
    ds = 1.0 / s.size
    d_mux = ds * (2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * s * (1.0 / b1 - 1.0 / b2))
    d_cxx = ds * (-s / b2)
    d_cxy = ds * (2 * a1 / (b1 * b2))
    scatter = lambda g: convolve2d(g, _KERNEL, mode="full")
    grad = scatter(d_mux) + 2 * x * scatter(d_cxx) + y * scatter(d_cxy)
    return float(np.mean(s)), grad


def task_loss(xhat: ComplexImage | np.ndarray, x: ComplexImage | np.ndarray) -> float:
    """Mean-per-pixel L1 on magnitudes plus (1 - SSIM).

    SSIM is undefined for images smaller than its window; the loss
    degrades to the L1 term alone there (relevant only for tiny
    gradient-check instances).
    """
    t, r = _magnitude(xhat), _magnitude(x)
    if t.shape != r.shape:
        raise ValidationError("shape-mismatch", "image shapes differ")
    l1 = float(np.mean(np.abs(t - r)))
    if min(t.shape) < SSIM_WINDOW:
        return l1
    return l1 + (1.0 - ssim(t, r))


def task_loss_batch(xhats, xs) -> float:
    vals = [task_loss(a, b) for a, b in zip(xhats, xs)]
    return float(np.mean(vals))


def task_loss_with_gradient(
    xhat: np.ndarray, x: np.ndarray
) -> tuple[float, np.ndarray]:
    """Task loss and its cotangent with respect to the complex ``xhat``.

    The magnitude chain rule maps the real gradient g on |xhat| to the
    complex cotangent g * xhat/|xhat| (zero where |xhat| = 0), under the
    convention dL = Re<cot, d xhat>.
    """
    t = np.abs(xhat)
    r = np.abs(x)
    l1 = float(np.mean(np.abs(t - r)))
    g_mag = np.sign(t - r) / t.size
    loss = l1
    if min(t.shape) >= SSIM_WINDOW:
        s, g_ssim = ssim_with_gradient(t, r)
        g_mag = g_mag - g_ssim
        loss = l1 + (1.0 - s)
    mag = np.where(t == 0.0, 1.0, t)
    cot = g_mag * np.where(t == 0.0, 0.0, xhat / mag)
    return loss, cot


def kinematics(k: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """First and second finite differences of the path over dwell time.

    Returns velocities (m-1, 2) and accelerations (m-2, 2), both in
    (cycles/m)/s and (cycles/m)/s^2 respectively.
    """
    if k.m < 3:
        raise ValidationError("shape-mismatch", "need at least 3 samples for kinematics")
    v = np.diff(k.points, axis=0) / k.dwell
    a = np.diff(k.points, n=2, axis=0) / k.dwell**2
    return v, a


def constraint_loss(
    k: Trajectory, limits: PhysicsLimits, weights: LossWeights
) -> float:
    """Hinge penalty on velocity/acceleration norm excesses (Euclidean per
    sample by default, per-axis when ``weights.per_axis``)."""
    v, a = kinematics(k)
    if weights.per_axis:
        vex = np.maximum(0.0, np.abs(v) - limits.v_max)
        aex = np.maximum(0.0, np.abs(a) - limits.a_max)
    else:
        vex = np.maximum(0.0, np.hypot(v[:, 0], v[:, 1]) - limits.v_max)
        aex = np.maximum(0.0, np.hypot(a[:, 0], a[:, 1]) - limits.a_max)
    return float(weights.lambda_v * vex.sum() + weights.lambda_a * aex.sum())


def constraint_loss_with_gradient(
    k: Trajectory, limits: PhysicsLimits, weights: LossWeights
) -> tuple[float, np.ndarray]:
    """Constraint loss and its exact gradient (m, 2) with respect to k.

    At a hinge kink the zero branch is used.
    """
    v, a = kinematics(k)
    grad = np.zeros_like(k.points)
    if weights.per_axis:
        vex = np.abs(v) - limits.v_max
        act = vex > 0
        gv = weights.lambda_v * np.where(act, np.sign(v), 0.0) / k.dwell
        aex = np.abs(a) - limits.a_max
        aact = aex > 0
        ga = weights.lambda_a * np.where(aact, np.sign(a), 0.0) / k.dwell**2
        loss = weights.lambda_v * np.maximum(0.0, vex).sum() + weights.lambda_a * np.maximum(0.0, aex).sum()
    else:
        vn = np.hypot(v[:, 0], v[:, 1])
        act = vn > limits.v_max
        unit_v = np.where((vn > 0)[:, None], v / np.where(vn == 0, 1.0, vn)[:, None], 0.0)
        gv = weights.lambda_v * act[:, None] * unit_v / k.dwell
        an = np.hypot(a[:, 0], a[:, 1])
        aact = an > limits.a_max
        unit_a = np.where((an > 0)[:, None], a / np.where(an == 0, 1.0, an)[:, None], 0.0)
        ga = weights.lambda_a * aact[:, None] * unit_a / k.dwell**2
        loss = (
            weights.lambda_v * np.maximum(0.0, vn - limits.v_max).sum()
            + weights.lambda_a * np.maximum(0.0, an - limits.a_max).sum()
        )
    # v_i = (k[i+1] - k[i]) / dwell
    grad[1:] += gv
    grad[:-1] -= gv
    # a_i = (k[i+2] - 2 k[i+1] + k[i]) / dwell^2
    grad[2:] += ga
    grad[1:-1] -= 2 * ga
    grad[:-2] += ga
    return float(loss), grad


def max_violations(k: Trajectory, limits: PhysicsLimits) -> tuple[float, float]:
    """Worst velocity and acceleration excesses (Euclidean norms), >= 0."""
    v, a = kinematics(k)
    vex = np.maximum(0.0, np.hypot(v[:, 0], v[:, 1]) - limits.v_max)
    aex = np.maximum(0.0, np.hypot(a[:, 0], a[:, 1]) - limits.a_max)
    return float(vex.max()), float(aex.max())


def violation_counts(k: Trajectory, limits: PhysicsLimits) -> tuple[int, int]:
    """Number of velocity / acceleration segments exceeding the limits."""
    v, a = kinematics(k)
    nv = int(np.sum(np.hypot(v[:, 0], v[:, 1]) > limits.v_max))
    na = int(np.sum(np.hypot(a[:, 0], a[:, 1]) > limits.a_max))
    return nv, na


def total_loss(
    xhat: ComplexImage | np.ndarray,
    x: ComplexImage | np.ndarray,
    k: Trajectory,
    limits: PhysicsLimits,
    weights: LossWeights,
) -> float:
    """task_loss + beta * constraint_loss."""
    return task_loss(xhat, x) + weights.beta * constraint_loss(k, limits, weights)
