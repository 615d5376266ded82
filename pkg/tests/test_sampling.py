import itertools

import numpy as np
import pytest

from sstraj.metrics import constraint_loss, LossWeights
from sstraj.core import PhysicsLimits
from sstraj.sampling import (
    PointSet,
    SamplingError,
    build_initial_trajectory,
    center_index,
    generate_vd_points,
    nn_tour,
    path_length,
    two_opt,
)


def brute_force_open_path(points, start):
    """Enumerate all open paths from `start`; return the optimal length."""
    n = len(points)
    best = np.inf
    rest = [i for i in range(n) if i != start]
    for perm in itertools.permutations(rest):
        order = [start, *perm]
        best = min(best, path_length(points, np.array(order)))
    return best


def test_vd_point_count_and_origin():
    ps = generate_vd_points(64, 0.22, accel=8.0, decay=3.0, seed=0)
    assert ps.m == 512  # 64^2 / 8
    radii = np.hypot(ps.points[:, 0], ps.points[:, 1])
    assert radii.min() < 1.0 / 0.22  # origin cell present
    # no duplicates
    assert len(np.unique(ps.points, axis=0)) == ps.m
    # inside the Nyquist box
    assert np.all(np.abs(ps.points) <= 64 / (2 * 0.22) + 1e-9)


def test_vd_deterministic():
    a = generate_vd_points(32, 0.2, 8.0, 3.0, seed=42)
    b = generate_vd_points(32, 0.2, 8.0, 3.0, seed=42)
    assert np.array_equal(a.points, b.points)
    c = generate_vd_points(32, 0.2, 8.0, 3.0, seed=43)
    assert not np.array_equal(a.points, c.points)


def test_vd_decay_concentrates_samples():
    # Monte-Carlo oracle: higher decay must shrink the mean radius
    mean_r = {}
    for decay in (0.5, 6.0):
        radii = []
        for seed in range(100):
            ps = generate_vd_points(64, 0.22, 8.0, decay, seed)
            radii.append(np.hypot(ps.points[:, 0], ps.points[:, 1]).mean())
        mean_r[decay] = np.mean(radii)
    assert mean_r[6.0] < mean_r[0.5]


def test_vd_accel_too_large():
    with pytest.raises(SamplingError, match="accel too large"):
        generate_vd_points(64, 0.22, accel=4096.0, decay=3.0, seed=0)


def test_nn_tour_single_point():
    order = nn_tour(np.array([[1.0, 2.0]]), 0)
    assert list(order) == [0]


def test_nn_tour_collinear():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
    assert list(nn_tour(pts, 0)) == [0, 1, 2, 3]


def test_nn_tour_square_is_optimal():
    # brute force over all permutations confirms the NN result here
    side = 1.0
    pts = np.array([[0, 0], [0, side], [side, side], [side, 0]], dtype=float)
    order = nn_tour(pts, 0)
    assert path_length(pts, order) == pytest.approx(3 * side)
    assert path_length(pts, order) == pytest.approx(brute_force_open_path(pts, 0))


def test_tour_is_permutation(rng):
    pts = rng.standard_normal((20, 2))
    order = nn_tour(pts, center_index(pts))
    assert sorted(order) == list(range(20))
    refined = two_opt(pts, order)
    assert sorted(refined) == list(range(20))


def test_two_opt_never_longer(rng):
    for _ in range(20):
        pts = rng.standard_normal((12, 2))
        order = nn_tour(pts, center_index(pts))
        refined = two_opt(pts, order)
        assert path_length(pts, refined) <= path_length(pts, order) + 1e-12
        assert refined[0] == order[0]


def test_two_opt_optimal_path_unchanged():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0], [0.0, 4.0]])
    order = np.arange(5)
    assert np.array_equal(two_opt(pts, order), order)


def test_two_opt_within_1_2x_of_brute_force():
    # acceptance-grade oracle at small scale: 50 random 8-point instances
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-1, 1, size=(8, 2))
        start = center_index(pts)
        got = path_length(pts, two_opt(pts, nn_tour(pts, start)))
        opt = brute_force_open_path(pts, start)
        worst = max(worst, got / opt)
    assert worst <= 1.2


def test_build_initial_trajectory_contract():
    ps = generate_vd_points(16, 0.2, accel=4.0, decay=3.0, seed=3)
    traj = build_initial_trajectory(ps, dwell=1e-6, fov=0.2)
    # same multiset of points
    assert np.array_equal(
        np.sort(traj.points.copy(), axis=0), np.sort(ps.points.copy(), axis=0)
    )
    # center-first
    start = center_index(ps.points)
    assert np.array_equal(traj.points[0], ps.points[start])
    assert traj.dwell == 1e-6


def test_initial_trajectory_is_infeasible_at_desk_scale():
    # the tour jumps cells faster than hardware limits allow
    ps = generate_vd_points(64, 0.22, accel=8.0, decay=3.0, seed=0)
    traj = build_initial_trajectory(ps, dwell=1e-6, fov=0.22, max_passes=50)
    loss = constraint_loss(traj, PhysicsLimits(), LossWeights())
    assert loss > 0
