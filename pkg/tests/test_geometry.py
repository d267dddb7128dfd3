import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundmix.errors import (
    DegenerateInput,
    IntersectionBehindCamera,
    NonPositiveDepth,
    RayParallelToPlane,
    ZeroCenter,
)
from groundmix.geometry import (
    Box3D,
    CameraIntrinsics,
    GroundPlane,
    allocentric_to_egocentric,
    box_corners,
    egocentric_to_allocentric,
    gram_schmidt_rotation,
    is_rotation,
    project,
    project_box_to_2d,
    single_angle_to_so3,
    unproject_to_plane,
)
from oracles import random_rotation, rodrigues

K100 = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)


def test_intrinsics_matrix_and_validation():
    K = CameraIntrinsics(700.0, 710.0, 320.0, 240.0)
    M = K.K
    assert M[2, 2] == 1.0
    assert np.all(np.tril(M, -1) == 0)
    assert CameraIntrinsics.from_matrix(M) == K
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0)


# -- project ----------------------------------------------------------------


def test_project_on_axis_hits_principal_point():
    assert project(K100, (0, 0, 5)) == (0.0, 0.0)


def test_project_hand_arithmetic():
    K = CameraIntrinsics(100.0, 100.0, 50.0, 50.0)
    assert project(K, (1, 2, 10)) == pytest.approx((60.0, 70.0), abs=1e-12)


def test_project_on_axis_high_resolution_camera():
    K = CameraIntrinsics(707.05, 707.05, 960.0, 540.0)
    assert project(K, (0, 0, 11.0)) == (960.0, 540.0)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_project_rejects_non_positive_depth(z):
    with pytest.raises(NonPositiveDepth):
        project(K100, (1, 1, z))


# -- unproject_to_plane -----------------------------------------------------


def test_unproject_axis_parallel_ray():
    with pytest.raises(RayParallelToPlane):
        unproject_to_plane(K100, (0.0, 0.0), GroundPlane((0, 1, 0), 1.0))


def test_unproject_frontal_plane():
    assert unproject_to_plane(K100, (0.0, 0.0), GroundPlane((0, 0, 1), 10.0)) == (0.0, 0.0, 10.0)


def test_unproject_ground_plane_hand_arithmetic():
    p = unproject_to_plane(K100, (0.0, 30.0), GroundPlane((0, 1, 0), 1.5))
    assert p == pytest.approx((0.0, 1.5, 5.0), abs=1e-12)


def test_unproject_behind_camera():
    # pixel above the horizon of a ground plane below the camera
    with pytest.raises(IntersectionBehindCamera):
        unproject_to_plane(K100, (0.0, -30.0), GroundPlane((0, 1, 0), 1.5))


@settings(max_examples=300, deadline=None)
@given(
    u=st.floats(-500, 500),
    v=st.floats(1, 500),
    tilt=st.floats(-0.6, 0.6),
    d=st.floats(0.5, 20),
)
def test_project_unproject_round_trip(u, v, tilt, d):
    K = CameraIntrinsics(400.0, 420.0, 10.0, -5.0)
    plane = GroundPlane((math.sin(tilt), math.cos(tilt), 0.0), d)
    try:
        p = unproject_to_plane(K, (u, v), plane)
    except (RayParallelToPlane, IntersectionBehindCamera):
        return
    assert abs(plane.signed_distance(p)) < 1e-9 * max(1.0, abs(d))
    uu, vv = project(K, p)
    assert abs(uu - u) < 1e-6 and abs(vv - v) < 1e-6


# -- Gram-Schmidt -----------------------------------------------------------


def test_gram_schmidt_identity_and_scale_invariance():
    np.testing.assert_array_equal(gram_schmidt_rotation([1, 0, 0, 0, 1, 0]), np.eye(3))
    np.testing.assert_array_equal(gram_schmidt_rotation([2, 0, 0, 0, 3, 0]), np.eye(3))


def test_gram_schmidt_worked_example():
    # b1 = (0,1,0); (1,1,0) minus its b1 component is (1,0,0); b3 = b1 x b2
    expected = np.array([[0, 1, 0], [1, 0, 0], [0, 0, -1]], dtype=float)
    R = gram_schmidt_rotation([0, 1, 0, 1, 1, 0])
    np.testing.assert_allclose(R, expected, atol=1e-15)
    assert is_rotation(R)


@pytest.mark.parametrize("v", [[0, 0, 0, 0, 1, 0], [1, 2, 3, 2, 4, 6], [1e-12, 0, 0, 0, 1, 0]])
def test_gram_schmidt_degenerate(v):
    with pytest.raises(DegenerateInput):
        gram_schmidt_rotation(v)


def test_gram_schmidt_random_inputs_are_rotations():
    rng = np.random.default_rng(0)
    for v in rng.normal(size=(10_000, 6)):
        R = gram_schmidt_rotation(v)
        assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-9
        assert abs(np.linalg.det(R) - 1) <= 1e-9
        np.testing.assert_allclose(R[:, 2], np.cross(R[:, 0], R[:, 1]), atol=1e-12)


def test_gram_schmidt_idempotent_on_rotations():
    rng = np.random.default_rng(1)
    for _ in range(500):
        R = random_rotation(rng)
        v = np.concatenate([R[:, 0], R[:, 1]])
        np.testing.assert_allclose(gram_schmidt_rotation(v), R, atol=1e-12)


# -- allocentric ------------------------------------------------------------


def test_allocentric_on_axis_is_identity():
    np.testing.assert_array_equal(egocentric_to_allocentric(np.eye(3), (0, 0, 10)), np.eye(3))
    np.testing.assert_array_equal(allocentric_to_egocentric(np.eye(3), (0, 0, 10)), np.eye(3))


def test_allocentric_off_axis_example():
    # the ray (1,0,1)/sqrt2 is brought onto e_z by -45 degrees about +y
    expected = rodrigues((0, 1, 0), -math.pi / 4)
    A = egocentric_to_allocentric(np.eye(3), (10, 0, 10))
    np.testing.assert_allclose(A, expected, atol=1e-12)
    np.testing.assert_allclose(A @ np.array([1, 0, 1]) / math.sqrt(2), [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(allocentric_to_egocentric(A, (10, 0, 10)), np.eye(3), atol=1e-12)


def test_allocentric_backward_ray_still_rotation():
    A = egocentric_to_allocentric(np.eye(3), (0, 0, -3))
    assert is_rotation(A)
    np.testing.assert_allclose(A @ np.array([0, 0, -1.0]), [0, 0, 1], atol=1e-12)


def test_allocentric_zero_center():
    with pytest.raises(ZeroCenter):
        egocentric_to_allocentric(np.eye(3), (0, 0, 0))


def test_allocentric_round_trip_random():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        R = random_rotation(rng)
        c = rng.normal(size=3) * rng.uniform(0.1, 50)
        back = allocentric_to_egocentric(egocentric_to_allocentric(R, c), c)
        assert np.max(np.abs(back - R)) <= 1e-9


# -- single angle -----------------------------------------------------------


def test_single_angle_flat_plane():
    R = single_angle_to_so3(0.0, (0, 0, 1))
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)


def test_single_angle_z_column_is_normal_for_any_yaw():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        cols = []
        for yaw in rng.uniform(-math.pi, math.pi, size=4):
            R = single_angle_to_so3(yaw, n)
            assert is_rotation(R)
            cols.append(R[:, 2])
        for c in cols:
            np.testing.assert_allclose(c, n, atol=1e-12)


def test_single_angle_yaw_periodic():
    n = np.array([0.1, -0.9, 0.3])
    n /= np.linalg.norm(n)
    np.testing.assert_allclose(single_angle_to_so3(math.pi, n), single_angle_to_so3(-math.pi, n), atol=1e-9)


# -- corners and 2D boxes ---------------------------------------------------


def test_unit_cube_corners():
    c = box_corners(Box3D((0, 0, 0), (1, 1, 1), np.eye(3)))
    assert {tuple(p) for p in c} == {(sx, sy, sz) for sx in (-.5, .5) for sy in (-.5, .5) for sz in (-.5, .5)}
    # documented order: lexicographic over the sign pattern
    assert tuple(c[0]) == (-0.5, -0.5, -0.5) and tuple(c[1]) == (-0.5, -0.5, 0.5)
    assert tuple(c[4]) == (0.5, -0.5, -0.5) and tuple(c[7]) == (0.5, 0.5, 0.5)


def test_corners_dims_and_offset():
    c = box_corners(Box3D((1, 1, 1), (2, 4, 6), np.eye(3)))
    assert set(c[:, 0]) == {0.0, 2.0}
    assert set(c[:, 1]) == {-1.0, 3.0}
    assert set(c[:, 2]) == {-2.0, 4.0}


def test_corners_quarter_turn_about_y_swaps_extents():
    R = rodrigues((0, 1, 0), math.pi / 2)
    c = box_corners(Box3D((0, 0, 0), (2, 4, 6), R))
    np.testing.assert_allclose(sorted(set(np.round(c[:, 0], 12))), [-3, 3])
    np.testing.assert_allclose(sorted(set(np.round(c[:, 2], 12))), [-1, 1])
    np.testing.assert_allclose(sorted(set(np.round(c[:, 1], 12))), [-2, 2])


def test_box_behind_camera_has_no_2d_box():
    K = CameraIntrinsics(100, 100, 50, 50)
    assert project_box_to_2d(Box3D((0, 0, -5), (1, 1, 1), np.eye(3)), K, (100, 100)) is None


def test_on_axis_cube_centered_on_principal_point():
    K = CameraIntrinsics(100, 100, 50, 40)
    b = project_box_to_2d(Box3D((0, 0, 5), (1, 1, 1), np.eye(3)), K, (100, 80))
    assert (b.x1 + b.x2) / 2 == pytest.approx(50, abs=1e-12)
    assert (b.y1 + b.y2) / 2 == pytest.approx(40, abs=1e-12)


def test_cube_half_outside_right_edge():
    K = CameraIntrinsics(100, 100, 50, 50)
    box = Box3D((2.5, 0, 5), (1, 1, 1), np.eye(3))
    uv = [project(K, p) for p in box_corners(box)]
    raw_x1 = min(u for u, _ in uv)
    raw_x2 = max(u for u, _ in uv)
    assert raw_x2 > 100 > raw_x1
    b = project_box_to_2d(box, K, (100, 100))
    assert b.x2 == 100.0
    assert b.x1 == pytest.approx(raw_x1, abs=1e-12)


def test_2d_box_contains_projected_corners():
    rng = np.random.default_rng(4)
    K = CameraIntrinsics(300, 300, 160, 120)
    for _ in range(500):
        box = Box3D(rng.uniform([-5, -3, -2], [5, 3, 30]), rng.uniform(0.3, 4, size=3), random_rotation(rng))
        b = project_box_to_2d(box, K, (320, 240))
        corners = box_corners(box)
        front = corners[corners[:, 2] > 0]
        if b is None:
            continue
        for p in front:
            u, v = project(K, p)
            u, v = min(max(u, 0), 320), min(max(v, 0), 240)
            assert b.x1 - 1e-9 <= u <= b.x2 + 1e-9
            assert b.y1 - 1e-9 <= v <= b.y2 + 1e-9
        assert 0 <= b.x1 < b.x2 <= 320 and 0 <= b.y1 < b.y2 <= 240
