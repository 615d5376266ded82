"""Three-step reconstruction: regridding, CG-SENSE, post-reconstruction.

Regridding is the density-weighted adjoint.  CG-SENSE runs conjugate
gradients on the regularized normal equations ``(A^H A + lam I) x = rhs``
where ``rhs`` follows one of two conventions selected by a flag:

* ``"dcf_adjoint"`` (default): rhs is the density-compensated adjoint of
  the measurements (the regridding image).
* ``"plain_adjoint"``: rhs is the unweighted adjoint, the textbook
  normal-equations right-hand side.

The post-reconstruction step is a pluggable image-to-image transform.
Built-ins: ``identity`` and ``tikhonov_sharpen`` (a linear spectral
deblur assuming the simulation's modulation is known; intended for
oracle experiments).  A plugin may also be an external executable that
is handed two file paths in the package's binary array format.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CoilMaps, ComplexImage, KSpaceSamples, ScanConfig, Trajectory, ValidationError
from .dcf import DcfWeights
from .encoding import Encoder, blur_vector


class CgBreakdownError(ArithmeticError):
    """Zero-curvature direction encountered during CG."""

    def __init__(self, iteration: int):
        super().__init__(f"CG breakdown at iteration {iteration}: non-positive curvature")
        self.iteration = iteration


class UnknownPluginError(KeyError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction settings shared by the CLI and the optimizer."""

    grid_n: int = 64
    lam: float | None = None   # None -> 1e-3 * power-iteration estimate
    rhs: str = "dcf_adjoint"   # or "plain_adjoint"
    cg_iters: int = 30
    dcf_sigma: float = 0.7
    dcf_iters: int = 20
    plugin: str = "identity"
    plugin_alpha: float = 1e-2

    def __post_init__(self):
        if self.rhs not in ("dcf_adjoint", "plain_adjoint"):
            raise ValidationError("shape-mismatch", f"unknown rhs convention {self.rhs!r}")
        if self.cg_iters < 1:
            raise ValidationError("shape-mismatch", "cg_iters must be >= 1")


def regrid(
    y_b: KSpaceSamples, csm: CoilMaps, k: Trajectory, w: DcfWeights
) -> ComplexImage:
    """Density-compensated adjoint reconstruction."""
    from .encoding import adjoint

    return adjoint(y_b, csm, k, w.w)


def normal_apply(
    x: ComplexImage, csm: CoilMaps, k: Trajectory, lam: float
) -> ComplexImage:
    """Apply the regularized normal operator A^H A + lam I."""
    if lam < 0:
        raise ValidationError("shape-mismatch", "lam must be >= 0")
    ny, nx = x.data.shape
    enc = Encoder(k.points, ny, nx, k.fov)
    return ComplexImage(enc.normal(x.data, csm.maps, lam))


def estimate_normal_scale(
    csm: CoilMaps, k: Trajectory, n_iter: int = 10, seed: int = 0
) -> float:
    """Power-iteration estimate of the spectral norm of A^H A."""
    ny, nx = csm.maps.shape[1:]
    enc = Encoder(k.points, ny, nx, k.fov)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((ny, nx)) + 1j * rng.standard_normal((ny, nx))
    est = 1.0
    for _ in range(n_iter):
        v = enc.normal(v, csm.maps)
        nrm = float(np.linalg.norm(v))
        if nrm == 0.0:
            return 0.0
        est = nrm
        v = v / nrm
    return est


def resolve_lambda(cfg: ReconConfig, csm: CoilMaps, k: Trajectory) -> float:
    if cfg.lam is not None:
        return float(cfg.lam)
    return 1e-3 * estimate_normal_scale(csm, k)


def cg_solve(apply_h, b: np.ndarray, n_iter: int, init: np.ndarray | None = None, callback=None) -> np.ndarray:
    """Conjugate gradients on a Hermitian positive (semi-)definite system."""
    x = np.zeros_like(b) if init is None else np.array(init, dtype=np.complex128)
    r = b - apply_h(x) if init is not None else b.copy()
    p = r.copy()
    rho = float(np.vdot(r, r).real)
    for t in range(n_iter):
        if rho == 0.0:
            break
        q = apply_h(p)
        sigma = float(np.vdot(p, q).real)
        if sigma <= 0.0:
            raise CgBreakdownError(t)
        alpha = rho / sigma
        x = x + alpha * p
        r = r - alpha * q
        rho_new = float(np.vdot(r, r).real)
        if callback is not None:
            callback(t, x, np.sqrt(rho_new))
        p = r + (rho_new / rho) * p
        rho = rho_new
    return x


def cg_sense(
    y_b: KSpaceSamples,
    csm: CoilMaps,
    k: Trajectory,
    lam: float,
    n_iter: int,
    init: ComplexImage | None = None,
    *,
    rhs: str = "dcf_adjoint",
    weights: DcfWeights | np.ndarray | None = None,
    callback=None,
    encoder: Encoder | None = None,
) -> ComplexImage:
    """Iterative SENSE reconstruction.

    Runs exactly ``n_iter`` CG iterations on ``(A^H A + lam I) x = rhs``
    starting from ``init`` (zero by default) and returns the iterate.
    ``weights`` are required for the default ``rhs="dcf_adjoint"``.
    """
    if lam < 0:
        raise ValidationError("shape-mismatch", "lam must be >= 0")
    if n_iter < 1:
        raise ValidationError("shape-mismatch", "n_iter must be >= 1")
    ny, nx = csm.maps.shape[1:]
    enc = encoder if encoder is not None else Encoder(k.points, ny, nx, k.fov)
    maps = csm.maps
    if rhs == "dcf_adjoint":
        if weights is None:
            raise ValidationError("shape-mismatch", "dcf_adjoint rhs requires weights")
        w = weights.w if isinstance(weights, DcfWeights) else np.asarray(weights, float)
        b = enc.adjoint(y_b.data, maps, w)
    elif rhs == "plain_adjoint":
        b = enc.adjoint(y_b.data, maps)
    else:
        raise ValidationError("shape-mismatch", f"unknown rhs convention {rhs!r}")
    apply_h = lambda u: enc.normal(u, maps, lam)
    x = cg_solve(apply_h, b, n_iter, None if init is None else init.data, callback)
    return ComplexImage(x)


# ---------------------------------------------------------------------------
# Post-reconstructors
# ---------------------------------------------------------------------------


class IdentityPlugin:
    """Pass-through post-reconstructor."""

    name = "identity"

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return img

    def vjp(self, cot: np.ndarray) -> np.ndarray:
        return cot


class TikhonovSharpenPlugin:
    """Linear spectral deblur from the known simulation modulation.

    Bins the per-sample modulation onto the Cartesian spectrum (weighted
    by the density compensation), then applies the Tikhonov-regularized
    inverse filter ``(1 + alpha) g / (g^2 + alpha)``, normalized so a
    unit modulation maps to the identity.  Unsampled cells are left
    untouched.  The operator is self-adjoint (real symmetric filter in
    the transform domain).
    """

    name = "tikhonov_sharpen"

    def __init__(
        self,
        k: Trajectory,
        scan: ScanConfig,
        grid_n: int,
        weights: DcfWeights | None = None,
        alpha: float = 1e-2,
    ):
        b = blur_vector(k, scan).b
        w = weights.w if weights is not None else np.ones(k.m)
        cy = np.clip(np.round(k.points[:, 0] * k.fov).astype(int) + grid_n // 2, 0, grid_n - 1)
        cx = np.clip(np.round(k.points[:, 1] * k.fov).astype(int) + grid_n // 2, 0, grid_n - 1)
        num = np.zeros((grid_n, grid_n))
        den = np.zeros((grid_n, grid_n))
        np.add.at(num, (cy, cx), w * b)
        np.add.at(den, (cy, cx), w)
        g = np.where(den > 0, num / np.where(den == 0, 1.0, den), 1.0)
        self.filter = (1.0 + alpha) * g / (g * g + alpha)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        spec = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img)))
        return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spec * self.filter)))

    def vjp(self, cot: np.ndarray) -> np.ndarray:
        return self(cot)


class ExternalExecutablePlugin:
    """Post-reconstructor backed by an external executable.

    The executable is invoked as ``prog input.lsst output.lsst`` with
    both files in the package's binary array container.  No gradient is
    available, so this plugin cannot sit inside the trajectory
    optimization loop.
    """

    name = "external"

    def __init__(self, executable: str | Path):
        self.executable = Path(executable)
        if not self.executable.exists():
            raise UnknownPluginError(f"plugin executable not found: {executable}")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        from .fileio import read_array, write_array

        with tempfile.TemporaryDirectory(prefix="sstraj-plugin-") as tmp:
            fin = Path(tmp) / "in.lsst"
            fout = Path(tmp) / "out.lsst"
            write_array(fin, np.asarray(img, dtype=np.complex128))
            subprocess.run([str(self.executable), str(fin), str(fout)], check=True)
            out = read_array(fout)
        if out.shape != np.shape(img):
            raise ValidationError("shape-mismatch", "plugin returned a different shape")
        return np.asarray(out, dtype=np.complex128)


BUILTIN_PLUGINS = ("identity", "tikhonov_sharpen")


def make_plugin(
    name: str,
    *,
    k: Trajectory | None = None,
    scan: ScanConfig | None = None,
    grid_n: int | None = None,
    weights: DcfWeights | None = None,
    alpha: float = 1e-2,
):
    """Instantiate a post-reconstructor by name.

    ``identity`` needs no context; ``tikhonov_sharpen`` needs the
    trajectory, scan and grid; anything else is treated as a path to an
    external executable.
    """

    if name == "identity":
        return IdentityPlugin()
    if name == "tikhonov_sharpen":
        if k is None or scan is None or grid_n is None:
            raise ValueError("tikhonov_sharpen requires k, scan and grid_n")
        return TikhonovSharpenPlugin(k, scan, grid_n, weights, alpha)
    path = Path(name)
    if path.exists():
        return ExternalExecutablePlugin(path)
    raise UnknownPluginError(f"unknown post-reconstructor {name!r}")


def post_reconstruct(x0: ComplexImage, plugin) -> ComplexImage:
    """Apply a post-reconstructor to the SENSE output."""
    return ComplexImage(plugin(x0.data))
