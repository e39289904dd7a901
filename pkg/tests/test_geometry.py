import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numba import njit

from drksplat import _jit
from drksplat.errors import BehindCamera, DegenerateQuaternion, GrazingRay
from drksplat.geometry import (Camera, Ray, focal_from_fov, intersect_and_uv, pixel_ray,
                               project_point, project_points, quat_to_rotation, sh_basis, sh_eval)


def random_rotation(rng):
    return quat_to_rotation(rng.normal(size=4))


def random_camera(rng, w=64, h=48):
    R = random_rotation(rng)
    return Camera(rng.uniform(30, 90), rng.uniform(30, 90), w / 2 + rng.normal(), h / 2 + rng.normal(),
                  w, h, R, rng.normal(size=3))


def test_quaternion_examples():
    np.testing.assert_allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3), atol=1e-15)
    Rz = quat_to_rotation([math.sqrt(0.5), 0, 0, math.sqrt(0.5)])
    np.testing.assert_allclose(Rz @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    with pytest.raises(DegenerateQuaternion):
        quat_to_rotation([0, 0, 0, 1e-14])


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3))
def test_quaternion_double_cover_and_orthonormal(q):
    R = quat_to_rotation(q)
    np.testing.assert_allclose(R, quat_to_rotation(-np.asarray(q)), atol=1e-14)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1) < 1e-12


def test_pixel_ray_examples():
    cam = Camera(100, 100, 50, 40, 100, 80)
    r = pixel_ray(cam, 50, 40)
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(r.origin, 0, atol=1e-15)
    r = pixel_ray(cam, 150, 40)
    assert abs(math.atan2(r.direction[0], r.direction[2]) - math.pi / 4) < 1e-12
    assert abs(np.linalg.norm(r.direction) - 1) < 1e-15


def test_pixel_ray_origin_is_camera_centre(rng):
    cam = random_camera(rng)
    r = pixel_ray(cam, 3.5, 7.5)
    np.testing.assert_allclose(cam.rotation @ r.origin + cam.translation, 0, atol=1e-12)


def test_intersection_examples():
    R = random_rotation(np.random.default_rng(0))
    mu = np.array([0.3, -1.0, 2.0])
    hit = intersect_and_uv(Ray(mu - R[:, 2], R[:, 2]), mu, R)
    assert abs(hit.r_t - 1) < 1e-12 and abs(hit.u) < 1e-12 and abs(hit.v) < 1e-12
    with pytest.raises(GrazingRay):
        intersect_and_uv(Ray(mu - R[:, 2], R[:, 0]), mu, R)
    with pytest.raises(BehindCamera):
        intersect_and_uv(Ray(mu - R[:, 2], -R[:, 2]), mu, R)


def test_intersection_residuals(rng):
    for _ in range(10 ** 4 // 10):
        R = random_rotation(rng)
        mu = rng.normal(size=3)
        o = rng.normal(size=3) * 3
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if abs(d @ R[:, 2]) < 1e-3:
            continue
        try:
            hit = intersect_and_uv(Ray(o, d), mu, R)
        except BehindCamera:
            continue
        i = o + hit.r_t * d
        assert abs((i - mu) @ R[:, 2]) < 1e-9
        np.testing.assert_allclose(mu + hit.u * R[:, 0] + hit.v * R[:, 1], i, atol=1e-9)
        assert abs(np.linalg.norm(i - o) - hit.r_t) < 1e-9


@given(st.integers(0, 2 ** 31))
def test_on_plane_round_trip(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    mu = rng.normal(size=3)
    u, v = rng.normal(size=2)
    p = mu + u * R[:, 0] + v * R[:, 1]
    side = 1 if rng.random() < 0.5 else -1
    o = p + side * (0.5 + rng.random()) * R[:, 2] + rng.normal(size=3) * 0.5
    d = (p - o) / np.linalg.norm(p - o)
    if abs(d @ R[:, 2]) < 1e-3:
        return
    hit = intersect_and_uv(Ray(o, d), mu, R)
    assert abs(hit.u - u) < 1e-7 and abs(hit.v - v) < 1e-7


def test_projection_examples():
    cam = Camera(100, 100, 50, 50, 100, 100)
    assert project_point(cam, [0, 0, 3.0]) == (50, 50, 3.0)
    assert project_point(cam, [1, 0, 1])[0] == 150
    with pytest.raises(BehindCamera):
        project_point(cam, [0, 0, 0])
    with pytest.raises(BehindCamera):
        project_point(cam, [0, 0, -1])


def test_project_inverts_pixel_ray(rng):
    cam = random_camera(rng)
    for px, py in rng.uniform(0, 48, (50, 2)):
        r = pixel_ray(cam, px, py)
        got = project_point(cam, r.origin + 2.0 * r.direction)
        assert abs(got[0] - px) < 1e-6 and abs(got[1] - py) < 1e-6
    pts = rng.normal(size=(20, 3)) + cam.center + 4 * cam.rotation[2]
    pix, z = project_points(cam, pts)
    for p, q, d in zip(pts, pix, z):
        x, y, dd = project_point(cam, p)
        assert abs(x - q[0]) < 1e-9 and abs(y - q[1]) < 1e-9 and abs(dd - d) < 1e-12


def test_focal_from_fov():
    assert abs(focal_from_fov(800, 2 * math.atan(0.5)) - 800) < 1e-9


def test_look_at_points_camera_at_target():
    cam = Camera.look_at([3, 1, -2], [0, 0, 0], [0, -1, 0], 50, 50, 64, 64)
    x, y, _ = project_point(cam, [0, 0, 0])
    assert abs(x - 32) < 1e-9 and abs(y - 32) < 1e-9


# ---------------------------------------------------------------------------
# spherical harmonics


def test_sh_dc_offset():
    np.testing.assert_allclose(sh_eval(np.zeros((1, 3)), [0, 0, 1], 0), 0.5)
    assert abs(_jit.SH_C0 - 0.2820948) < 1e-7
    assert abs(_jit.SH_C0 - 0.5 / math.sqrt(math.pi)) < 1e-15


def test_sh_clamps_at_zero():
    sh = np.zeros((1, 3))
    sh[0] = -10
    assert np.all(sh_eval(sh, [0, 0, 1], 0) == 0)


def test_sh_degree_one_is_odd(rng):
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        b1, b2 = sh_basis(d, 1), sh_basis(-d, 1)
        assert b1[0] == b2[0]
        np.testing.assert_array_equal(b1[1:], -b2[1:])


def test_sh_published_constants():
    # real SH table used by common splatting code, for one fixed direction
    x, y, z = 0.48, -0.6, 0.64
    C1 = 0.4886025119029199
    C2 = [1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396]
    want = [0.28209479177387814, -C1 * y, C1 * z, -C1 * x,
            C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * z * z - x * x - y * y),
            C2[3] * x * z, C2[4] * (x * x - y * y)]
    np.testing.assert_allclose(sh_basis([x, y, z], 2), want, rtol=1e-14)


@njit(cache=True)
def _gram(dirs, degree):
    n = (degree + 1) ** 2
    G = np.zeros((n, n))
    b = np.zeros(16)
    for i in range(dirs.shape[0]):
        _jit.sh_basis(dirs[i, 0], dirs[i, 1], dirs[i, 2], degree, b)
        for p in range(n):
            for q in range(n):
                G[p, q] += b[p] * b[q]
    return G * (4 * np.pi / dirs.shape[0])


def test_sh_orthonormal_monte_carlo():
    rng = np.random.default_rng(7)
    d = rng.normal(size=(10 ** 6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    G = _gram(d, 3)
    # Monte-Carlo standard error ~ sqrt(var / N) ~ 5e-3 for these products
    np.testing.assert_allclose(G, np.eye(16), atol=2e-2)
