"""Pinhole camera, pixel rays, ray-plane intersection and SH colour."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _jit
from .errors import BehindCamera, GrazingRay
from .kernel import quat_to_rotation_batch

DEFAULT_GRAZING_EPS = 1e-6


@dataclass
class Camera:
    """Pinhole camera looking down +z in camera space (x right, y down)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> cam
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation not orthonormal (err {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> np.ndarray:
        return self.rotation.T

    @staticmethod
    def look_at(eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        Rwc = np.stack([right, down, fwd])
        return Camera(fx, fy, width / 2 if cx is None else cx, height / 2 if cy is None else cy,
                      width, height, Rwc, -Rwc @ eye)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class Intersection:
    r_t: float
    u: float
    v: float


def quat_to_rotation(q) -> np.ndarray:
    return quat_to_rotation_batch(np.asarray(q, dtype=np.float64)[None])[0]


def pixel_ray(cam: Camera, px: float, py: float) -> Ray:
    """Ray through image point (px, py); pixel (i, j) has centre (i+0.5, j+0.5)."""
    d = np.empty(3)
    _jit.pixel_dir(float(px), float(py), cam.fx, cam.fy, cam.cx, cam.cy, cam.cam_to_world, d)
    return Ray(cam.center, d)


def intersect_and_uv(ray: Ray, mu, R, grazing_eps: float = DEFAULT_GRAZING_EPS) -> Intersection:
    R = np.asarray(R, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    n = R[:, 2]
    denom = float(ray.direction @ n)
    if abs(denom) < grazing_eps:
        raise GrazingRay(f"|r_d . R_z| = {abs(denom):.3g}")
    rt = float((mu - ray.origin) @ n) / denom
    if rt <= 0:
        raise BehindCamera(f"plane hit at r_t = {rt:.3g}")
    d = ray.origin + rt * ray.direction - mu
    return Intersection(rt, float(d @ R[:, 0]), float(d @ R[:, 1]))


def project_point(cam: Camera, world) -> tuple[float, float, float]:
    pc = cam.rotation @ np.asarray(world, dtype=np.float64) + cam.translation
    if pc[2] <= 0:
        raise BehindCamera(f"point depth {pc[2]:.3g} <= 0")
    return (cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, float(pc[2]))


def project_points(cam: Camera, world):
    """Vectorised projection; returns (pix (N,2), depth (N,)) without checks."""
    pc = np.asarray(world, dtype=np.float64) @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)
    return pix, z


def sh_basis(direction, degree: int) -> np.ndarray:
    out = np.zeros(16)
    d = np.asarray(direction, dtype=np.float64)
    _jit.sh_basis(d[0], d[1], d[2], int(degree), out)
    return out[:(degree + 1) ** 2]


def sh_eval(sh, direction, degree: int) -> np.ndarray:
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    sh = np.asarray(sh, dtype=np.float64)
    nc = (degree + 1) ** 2
    if sh.shape[0] < nc:
        raise ValueError(f"need {nc} SH coefficients for degree {degree}")
    basis = sh_basis(direction, degree)
    return np.maximum(basis @ sh[:nc] + 0.5, 0.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / _jit.SH_C0


def focal_from_fov(size: int, fov: float) -> float:
    return size / (2.0 * math.tan(fov / 2.0))
