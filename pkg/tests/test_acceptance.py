"""End-to-end acceptance checks, one marker per criterion. The terminal
summary prints a PASS/FAIL line for each criterion number."""
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from drksplat.geometry import quat_to_rotation
from drksplat.grad import finite_diff_check
from drksplat.kernel import (THREE_SIGMA_LEVEL, DrkPrimitive, activate, alpha, angle_activation,
                             calibrated_radii, eval_kernel, gaussian_special_case, sharpen,
                             sharpen_inverse)
from drksplat.mesh2drk import convert, load_mesh
from drksplat.optimize import GAUSSIAN_FROZEN, gaussian_baseline, train
from drksplat.raster import bin_primitives, render
from drksplat.synthetic import (flat_shapes_target, front_camera, gradcheck_scene, image_fit_config,
                                planar_init, random_scene)

from conftest import random_primitive
from test_cli import table
from test_grad import alpha_fd_errors
from test_mesh2drk import CUBE, jittered_polygon, silhouette_iou
from test_raster import _assert_conservative, _sliver

TEASER_STEPS = 600
DENSITY_STEPS = 120
DENSITY_EVERY = 30


# ---------------------------------------------------------------------------
# 1. Gaussian reduction


@pytest.mark.criterion(1)
def test_gaussian_reduction():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10):
        su, sv = rng.uniform(0.2, 2.0, 2)
        R = quat_to_rotation(rng.normal(size=4))
        mu = rng.normal(size=3)
        prim = gaussian_special_case(su, sv, mu=mu, R=R)
        # closed form in world coordinates: covariance R diag(su^2, sv^2) R^T on the plane
        inv_cov = np.linalg.pinv(R[:, :2] @ np.diag([su * su, sv * sv]) @ R[:, :2].T)
        eye = mu + 4.0 * R[:, 2] + rng.normal(size=3) * 0.5
        span = 3 * max(su, sv)
        uu, vv = np.meshgrid(np.linspace(-span, span, 64), np.linspace(-span, span, 64))
        pts = mu + uu[..., None] * R[:, 0] + vv[..., None] * R[:, 1]
        # recover (u, v) by casting rays from the eye through each point
        d = (pts - eye) / np.linalg.norm(pts - eye, axis=-1, keepdims=True)
        t = ((mu - eye) @ R[:, 2]) / (d @ R[:, 2])
        hit = eye + t[..., None] * d - mu
        hu, hv = hit @ R[:, 0], hit @ R[:, 1]
        dp = pts - mu
        want = np.exp(-0.5 * np.einsum("...i,ij,...j->...", dp, inv_cov, dp))
        got = np.array([eval_kernel(a, b, prim) for a, b in zip(hu.ravel(), hv.ravel())])
        worst = max(worst, np.abs(got - want.ravel()).max())
    assert worst < 1e-6
    assert time.perf_counter() - t0 < 1.0


# ---------------------------------------------------------------------------
# 2. sharpening


@pytest.mark.criterion(2)
def test_sharpening_suite():
    for tau in np.linspace(-0.1, 0.99, 20):
        for b in ((1 + tau) / 4, (3 - tau) / 4):
            assert abs(sharpen(np.nextafter(b, -1.0), tau) - sharpen(b, tau)) < 1e-12
        g = np.linspace(0, 1, 4001)
        y = np.array([sharpen(x, tau) for x in g])
        assert np.all(np.diff(y) >= 0)
        assert sharpen(0.0, tau) == 0.0
        assert abs(sharpen(0.5, tau) - 0.5) < 1e-12
        assert abs(sharpen(1.0, tau) - 1.0) < 1e-12
        assert max(abs(sharpen_inverse(sharpen(x, tau), tau) - x) for x in g) < 1e-12


# ---------------------------------------------------------------------------
# 3. calibration


@pytest.mark.criterion(3)
def test_calibration_three_sigma_radius():
    prim = DrkPrimitive(np.zeros(3), np.eye(3), np.linspace(0.5, 2.0, 8),
                        angle_activation(np.zeros(8)), 0.4, 0.0, 1.0)
    np.testing.assert_allclose(calibrated_radii(prim), 3 * prim.s, rtol=1e-15)


@pytest.mark.criterion(3)
def test_calibration_level_at_radius():
    rng = np.random.default_rng(3)
    for _ in range(50):
        prim = random_primitive(rng, o=float(rng.uniform(0.2, 1.0)))
        sc = calibrated_radii(prim)
        for k in range(prim.K):
            u, v = sc[k] * math.cos(prim.theta[k]), sc[k] * math.sin(prim.theta[k])
            got = alpha(u, v, prim)
            assert got == pytest.approx(THREE_SIGMA_LEVEL, rel=1e-6), (k, got, THREE_SIGMA_LEVEL)


# ---------------------------------------------------------------------------
# 4. gradients


@pytest.mark.criterion(4)
def test_gradient_correctness():
    t0 = time.perf_counter()
    worst, checked = alpha_fd_errors(np.random.default_rng(4), 1000)
    assert checked > 5000
    assert worst < 1e-3
    raw, cam = gradcheck_scene(4, n=3, size=8)
    rep = finite_diff_check(raw, cam, seed=4)
    assert max(v for k, v in rep.items() if k not in ("checked", "masked")) < 1e-2
    assert time.perf_counter() - t0 < 30


# ---------------------------------------------------------------------------
# 5. culling


@pytest.mark.criterion(5)
def test_culling_conservative_on_1000_primitives():
    from drksplat.geometry import Camera

    rng = np.random.default_rng(5)
    cam = Camera(60, 60, 40, 30, 80, 60)
    prims = activate(random_scene(rng, n=1000, depth=(0.5, 6.0), spread=1.5, scale=(0.02, 1.5),
                                  opacity=(0.01, 0.99), tilt=3.0))
    _assert_conservative(prims, cam, bin_primitives(prims, cam))


@pytest.mark.criterion(5)
def test_sliver_retains_fewer_tiles_than_its_box():
    b = bin_primitives(_sliver(), front_camera(128))
    tiles = b.tiles_of(0)
    ty, tx = np.divmod(tiles, b.tiles_x)
    assert len(tiles) < (tx.max() - tx.min() + 1) * (ty.max() - ty.min() + 1)


# ---------------------------------------------------------------------------
# 6. sorting


@pytest.mark.criterion(6)
def test_cache_sort_is_exact_with_shallow_overlap():
    cam = front_camera(48)
    for seed in range(30):
        rng = np.random.default_rng(seed)
        prims = activate(random_scene(rng, n=8, tilt=2.0))
        a = render(prims, cam, sort="cache", record=True)
        assert a.record.count.max() <= 8
        b = render(prims, cam, sort="exact")
        for name in ("color", "depth", "normal", "alpha"):
            assert np.array_equal(getattr(a, name), getattr(b, name))


@pytest.mark.criterion(6)
def test_presort_ordering_over_20_scenes():
    from drksplat.cli import sorting_table

    tab = sorting_table(20, 60, 64)
    taus = [tab[m][1] for m in ("nearest+cache", "center+cache", "cache-only", "none")]
    assert taus[0] >= taus[1] >= taus[2] >= taus[3], taus


# ---------------------------------------------------------------------------
# 7. teaser fitting


@pytest.mark.criterion(7)
def test_teaser_drk_beats_gaussians():
    t0 = time.perf_counter()
    tgt, cam = flat_shapes_target(128), front_camera(128)
    raw = planar_init(30, np.random.default_rng(0), target=tgt, cam=cam)
    _, drk = train([(tgt, cam)], raw, image_fit_config(TEASER_STEPS, seed=0))
    _, gs = train([(tgt, cam)], gaussian_baseline(raw),
                  image_fit_config(TEASER_STEPS, seed=0, frozen=GAUSSIAN_FROZEN,
                                   tie_opposite_scales=True))
    print(f"teaser PSNR: DRK {drk.final_psnr:.2f} dB, Gaussian {gs.final_psnr:.2f} dB")
    assert drk.final_psnr >= gs.final_psnr + 2.0
    assert time.perf_counter() - t0 < 600


# ---------------------------------------------------------------------------
# 8. mesh conversion


@pytest.mark.criterion(8)
def test_mesh_conversion(tmp_path):
    (tmp_path / "cube.obj").write_text(CUBE)
    assert len(convert(load_mesh(tmp_path / "cube.obj"))) == 6
    sq = np.array([[-0.3, -0.3], [0.3, -0.3], [0.3, 0.3], [-0.3, 0.3]])
    assert silhouette_iou(sq)[0] >= 0.98
    assert min(silhouette_iou(jittered_polygon(s))[0] for s in range(20)) >= 0.98


@pytest.mark.criterion(8)
def test_ten_thousand_faces_under_a_second():
    from test_mesh2drk import test_ten_thousand_faces_convert_quickly
    test_ten_thousand_faces_convert_quickly()


# ---------------------------------------------------------------------------
# 9. density presets


@pytest.mark.criterion(9)
@pytest.mark.parametrize("seed", range(3))
def test_density_presets_order_primitive_counts(seed):
    tgt, cam = flat_shapes_target(128), front_camera(128)
    raw = planar_init(30, np.random.default_rng(seed), target=tgt, cam=cam)
    counts = {}
    for preset in ("default", "s1", "s2"):
        cfg = image_fit_config(DENSITY_STEPS, seed, preset, densify=True,
                               densify_start_step=DENSITY_EVERY, densify_interval=DENSITY_EVERY,
                               densify_stop_step=DENSITY_STEPS - 1)
        counts[preset] = len(train([(tgt, cam)], raw, cfg)[0])
    print(f"seed {seed}: {counts}")
    assert counts["s2"] <= counts["s1"] <= counts["default"], counts


# ---------------------------------------------------------------------------
# 10. determinism across thread counts


def _cli(args, threads, cwd):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    res = subprocess.run([sys.executable, "-m", "drksplat", *map(str, args)], cwd=cwd, env=env,
                         capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    return res.stdout


@pytest.mark.criterion(10)
def test_thread_count_does_not_change_outputs(tmp_path):
    from drksplat import io

    io.write_image(tmp_path / "target.png", flat_shapes_target(48))
    outputs = []
    for threads in (1, 2):
        d = tmp_path / f"t{threads}"
        d.mkdir()
        _cli(["fit", tmp_path / "target.png", d / "s.drk", "--steps", 40, "--primitives", 20,
              "--densify-from", 10, "--densify-every", 10, "--seed", 7], threads, d)
        out = _cli(["render", d / "s.drk", d / "img", "--image", tmp_path / "target.png",
                    "--depth", "--normal"], threads, d)
        files = {p.name: p.read_bytes() for p in [d / "s.drk", *sorted((d / "img").iterdir())]}
        outputs.append((files, table(out)["mean"]))
    assert outputs[0][0].keys() == outputs[1][0].keys()
    for name in outputs[0][0]:
        assert outputs[0][0][name] == outputs[1][0][name], name
    assert outputs[0][1] == outputs[1][1]
