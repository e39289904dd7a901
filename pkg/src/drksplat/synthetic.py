"""Synthetic targets and random scenes used by tests, demos and the CLI."""
from __future__ import annotations

import numpy as np

from .geometry import Camera, rgb_to_sh_dc
from .kernel import RawDrkParams, logit, tau_deactivation
from .optimize import DENSITY_PRESETS, TrainConfig, colour_from_targets, init_random

NO_DENSIFY = 10 ** 9


def flat_shapes_target(size: int = 128) -> np.ndarray:
    """Rectangle, triangle and ellipse with hard edges on white."""
    img = np.ones((size, size, 3))
    c = (np.arange(size) + 0.5) / size
    X, Y = np.meshgrid(c, c)
    rect = (X > 0.08) & (X < 0.45) & (Y > 0.1) & (Y < 0.42)
    img[rect] = (0.85, 0.15, 0.15)
    # triangle (0.55,0.1) (0.92,0.2) (0.62,0.5)
    a, b, cc = np.array([0.55, 0.1]), np.array([0.92, 0.2]), np.array([0.62, 0.5])

    def side(p, q):
        return (q[0] - p[0]) * (Y - p[1]) - (q[1] - p[1]) * (X - p[0])
    s1, s2, s3 = side(a, b), side(b, cc), side(cc, a)
    tri = ((s1 >= 0) & (s2 >= 0) & (s3 >= 0)) | ((s1 <= 0) & (s2 <= 0) & (s3 <= 0))
    img[tri] = (0.15, 0.6, 0.2)
    ell = ((X - 0.5) / 0.3) ** 2 + ((Y - 0.75) / 0.15) ** 2 <= 1.0
    img[ell] = (0.15, 0.25, 0.85)
    return img


def front_camera(size: int = 128, focal: float | None = None) -> Camera:
    """Camera at the origin looking down +z; the plane z=1 fills [-0.5, 0.5]^2."""
    f = float(size) if focal is None else focal
    return Camera(f, f, size / 2, size / 2, size, size)


def planar_init(n, rng, K=8, opacity=0.5, depth=1.0, half=0.45, jitter=1e-3, target=None,
                cam=None):
    """Primitives scattered on the plane z=depth facing the camera."""
    raw = init_random(n, (-half, -half, depth - jitter), (half, half, depth + jitter), rng,
                      K=K, sh_degree=0, opacity=opacity, knn=3)
    if target is not None:
        raw = colour_from_targets(raw, [(target, cam)])
    return raw


def random_scene(rng, n=40, K=8, depth=(2.0, 6.0), spread=1.0, scale=(0.15, 0.6),
                 opacity=(0.3, 0.95), sh_degree=0, tilt=1.0):
    """Random raw primitives in front of :func:`front_camera`."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] * 0.4
    q = np.concatenate([np.ones((n, 1)), tilt * rng.normal(size=(n, 3)) * 0.5], axis=1)
    nc = (sh_degree + 1) ** 2
    sh = np.zeros((n, nc, 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, (n, 3)))
    return RawDrkParams(
        center=np.column_stack([xy, z]),
        quat=q,
        scale=np.log(rng.uniform(*scale, (n, K))),
        angle=rng.normal(size=(n, K)),
        eta=rng.normal(size=n),
        tau=rng.normal(size=n) + float(tau_deactivation(0.0)),
        opacity=logit(rng.uniform(*opacity, n)),
        sh=sh)


def image_fit_config(steps: int, seed: int = 0, density: str = "default", densify: bool = False,
                     **kw) -> TrainConfig:
    """Schedule for fitting a single frontal image with planar primitives.

    Positions move in image-plane units, so the learning rates are larger
    than the multi-view defaults and the extent is pinned to 1.
    """
    g, o = DENSITY_PRESETS[density]
    base = dict(steps=steps, seed=seed, densify_grad_threshold=g, prune_opacity_threshold=o,
                background=(1.0, 1.0, 1.0), max_sh_degree=0, scene_extent=1.0,
                lr_position=3e-3, lr_position_final=3e-4, lr_drk=1e-2, lr_drk_final=1e-4,
                lr_sh=1e-2, lr_rotation=1e-2, lr_opacity=5e-2, log_interval=50)
    if not densify:
        base["densify_start_step"] = NO_DENSIFY
    base.update(kw)
    return TrainConfig(**base)


def gradcheck_scene(seed: int, n: int = 3, size: int = 8):
    """A few visible, overlapping primitives in front of a tiny camera."""
    rng = np.random.default_rng(seed)
    raw = random_scene(rng, n=n, depth=(2.0, 4.0), spread=0.5, scale=(0.3, 0.8),
                       opacity=(0.4, 0.9))
    return raw, front_camera(size)


def sorting_scene(seed: int, n: int = 60, size: int = 64):
    """Tilted, interpenetrating primitives where depth order varies per pixel."""
    rng = np.random.default_rng(seed)
    raw = random_scene(rng, n=n, depth=(3.0, 5.0), spread=0.8, scale=(0.2, 0.7),
                       opacity=(0.2, 0.6), tilt=2.0)
    return raw, front_camera(size)
