import os
import stat
import sys

import numpy as np
import pytest

from conftest import cartesian_trajectory, random_instance
from sstraj.core import CoilMaps, ComplexImage, KSpaceSamples, ScanConfig, Trajectory
from sstraj.dcf import pipe_menon
from sstraj.encoding import apply_blur, blur_vector, forward
from sstraj.metrics import psnr
from sstraj.phantom import shepp_logan, synthetic_csm
from sstraj.recon import (
    CgBreakdownError,
    ReconConfig,
    UnknownPluginError,
    cg_sense,
    estimate_normal_scale,
    make_plugin,
    normal_apply,
    post_reconstruct,
    regrid,
)


def nrmse(a, b):
    return np.linalg.norm(np.abs(a) - np.abs(b)) / np.linalg.norm(np.abs(b))


def test_regrid_zero_data(rng):
    img, csm, traj = random_instance(rng)
    w = pipe_menon(traj, grid_n=8)
    y = KSpaceSamples(np.zeros((csm.nc, traj.m), dtype=complex))
    out = regrid(y, csm, traj, w)
    assert np.all(out.data == 0)


def test_regrid_inverts_cartesian_up_to_scale():
    n = 16
    img = shepp_logan(n)
    csm = CoilMaps(np.ones((1, n, n), dtype=complex))
    traj = cartesian_trajectory(n, fov=0.2)
    w = pipe_menon(traj, grid_n=n)
    y = forward(img, csm, traj)
    out = regrid(y, csm, traj, w)
    # oracle: the orthogonal DFT inverts exactly; allow one global scale
    scale = np.vdot(out.data, img.data) / np.vdot(out.data, out.data)
    assert nrmse(scale * out.data, img.data) <= 1e-6


def test_normal_apply_linearity_and_selfadjoint(rng):
    img, csm, traj = random_instance(rng, n=8, m=20)
    zero = ComplexImage(np.zeros((8, 8), dtype=complex))
    assert np.all(normal_apply(zero, csm, traj, 0.5).data == 0)
    u = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    v = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    hu = normal_apply(ComplexImage(u), csm, traj, 0.3).data
    hv = normal_apply(ComplexImage(v), csm, traj, 0.3).data
    lhs = np.vdot(hu, v)
    rhs = np.vdot(u, hv)
    assert abs(lhs - rhs) / (np.linalg.norm(hu) * np.linalg.norm(v)) <= 1e-10


def test_normal_apply_large_lambda_dominates(rng):
    img, csm, traj = random_instance(rng, n=8, m=20)
    lam = 1e6 * estimate_normal_scale(csm, traj)
    out = normal_apply(img, csm, traj, lam).data
    rel = np.abs(out - lam * img.data).max() / np.abs(lam * img.data).max()
    assert rel <= 0.01


def test_cg_exact_solution_init_is_fixed_point():
    n = 16
    img = shepp_logan(n)
    csm = CoilMaps(np.ones((1, n, n), dtype=complex))
    traj = cartesian_trajectory(n, fov=0.2)
    y = forward(img, csm, traj)
    out = cg_sense(y, csm, traj, lam=0.0, n_iter=1, init=img, rhs="plain_adjoint")
    assert nrmse(out.data, img.data) <= 1e-10


@pytest.mark.parametrize("rhs", ["dcf_adjoint", "plain_adjoint"])
def test_cg_inverts_fully_sampled_cartesian(rhs):
    n = 16
    img = shepp_logan(n)
    csm = CoilMaps(np.ones((1, n, n), dtype=complex))
    traj = cartesian_trajectory(n, fov=0.2)
    y = forward(img, csm, traj)
    w = pipe_menon(traj, grid_n=n)
    out = cg_sense(y, csm, traj, lam=0.0, n_iter=20, rhs=rhs, weights=w)
    assert nrmse(out.data, img.data) <= 1e-8


def test_cg_residual_non_increasing(rng):
    img, csm, traj = random_instance(rng, n=16, nc=2, m=96)
    y = forward(img, csm, traj)
    w = pipe_menon(traj, grid_n=16)
    res = []
    cg_sense(
        y, csm, traj, lam=1.0, n_iter=15, weights=w,
        callback=lambda t, x, r: res.append(r),
    )
    assert all(b <= a * (1 + 1e-12) for a, b in zip(res, res[1:]))


def test_cg_linear_in_data(rng):
    img, csm, traj = random_instance(rng, n=8, m=24)
    y = forward(img, csm, traj)
    w = pipe_menon(traj, grid_n=8)
    out1 = cg_sense(y, csm, traj, lam=0.5, n_iter=5, weights=w).data
    y2 = KSpaceSamples(2.0 * y.data)
    out2 = cg_sense(y2, csm, traj, lam=0.5, n_iter=5, weights=w).data
    assert np.allclose(out2, 2.0 * out1, rtol=1e-10)


def test_cg_breakdown_reports_iteration():
    # inconsistent singular system: once the residual is all null-space,
    # the search direction has zero curvature
    from sstraj.recon import cg_solve

    apply_h = lambda u: np.array([u[0], 0.0 + 0.0j])
    b = np.array([1.0 + 0.0j, 1.0 + 0.0j])
    with pytest.raises(CgBreakdownError) as e:
        cg_solve(apply_h, b, n_iter=10)
    assert e.value.iteration == 1


def test_blurred_cg_worse_than_unblurred():
    # readout decay modulation must degrade the iterative reconstruction
    n = 32
    img = shepp_logan(n)
    csm = synthetic_csm(n, 4, seed=2)
    rng = np.random.default_rng(7)
    k_box = n / (2 * 0.2)
    pts = rng.uniform(-k_box, k_box, size=(n * n // 8, 2))
    pts[0] = 0.0
    traj = Trajectory(pts, dwell=1e-6, fov=0.2)
    scan = ScanConfig(blur_scale=1.0)
    b = blur_vector(traj, ScanConfig(t2=0.08, blur_scale=420.0))
    w = pipe_menon(traj, grid_n=n)
    y = forward(img, csm, traj)
    y_b = apply_blur(y, b)
    clean = cg_sense(y, csm, traj, lam=1e-3 * n * n, n_iter=15, weights=w)
    blurred = cg_sense(y_b, csm, traj, lam=1e-3 * n * n, n_iter=15, weights=w)
    assert psnr(blurred, img) < psnr(clean, img)


def test_identity_plugin():
    x0 = ComplexImage(np.arange(16).reshape(4, 4).astype(complex))
    out = post_reconstruct(x0, make_plugin("identity"))
    assert np.array_equal(out.data, x0.data)


def test_unknown_plugin_name():
    with pytest.raises(UnknownPluginError):
        make_plugin("no-such-plugin")


def test_tikhonov_sharpen_noop_without_blur():
    n = 16
    traj = cartesian_trajectory(n, fov=0.2)
    scan = ScanConfig(blur_scale=0.0)  # no decay
    plugin = make_plugin("tikhonov_sharpen", k=traj, scan=scan, grid_n=n)
    rng = np.random.default_rng(3)
    x0 = ComplexImage(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    out = post_reconstruct(x0, plugin)
    assert np.abs(out.data - x0.data).max() <= 1e-10


def test_tikhonov_sharpen_improves_blurred_recon():
    n = 32
    img = shepp_logan(n)
    csm = synthetic_csm(n, 4, seed=4)
    traj = cartesian_trajectory(n, fov=0.2)
    scan = ScanConfig(t2=0.08, blur_scale=100.0)
    y_b = apply_blur(forward(img, csm, traj), blur_vector(traj, scan))
    w = pipe_menon(traj, grid_n=n)
    x0 = cg_sense(y_b, csm, traj, lam=0.0, n_iter=20, weights=w)
    plugin = make_plugin("tikhonov_sharpen", k=traj, scan=scan, grid_n=n, weights=w)
    xhat = post_reconstruct(x0, plugin)
    assert psnr(xhat, img) >= psnr(x0, img)


def test_external_executable_plugin(tmp_path):
    script = tmp_path / "scale_plugin.py"
    script.write_text(
        "#!%s\n"
        "import sys\n"
        "from sstraj.fileio import read_array, write_array\n"
        "arr = read_array(sys.argv[1])\n"
        "write_array(sys.argv[2], 2.0 * arr)\n" % sys.executable
    )
    script.chmod(script.stat().st_mode | stat.S_IXUSR)
    plugin = make_plugin(str(script))
    x0 = ComplexImage((np.arange(16) + 1j).reshape(4, 4))
    out = post_reconstruct(x0, plugin)
    assert np.allclose(out.data, 2.0 * x0.data)


def test_regrid_is_exactly_weighted_adjoint(rng):
    from sstraj.encoding import adjoint as enc_adjoint

    img, csm, traj = random_instance(rng, m=14)
    w = pipe_menon(traj, grid_n=8)
    y = forward(img, csm, traj)
    a = regrid(y, csm, traj, w).data
    b = enc_adjoint(y, csm, traj, w.w).data
    assert np.array_equal(a, b)
