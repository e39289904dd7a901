"""Training-free conversion of polygon meshes to kernels.

Each convex planar face becomes one kernel centred at the vertex centroid
with straight (pure L1) edges and maximal sharpness. Faces with fewer than
K corners are padded with extra endpoints on their edges.
"""
from __future__ import annotations

import math
import warnings
from itertools import combinations
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateFace, EmptyMesh, ParseError, TooManyVertices
from .geometry import rgb_to_sh_dc
from .kernel import (RAW_CLIP, DrkPrimitive, RawDrkParams, angle_activation, angle_deactivation,
                     quat_to_rotation_batch, rotation_to_quat_batch, sigmoid, tau_activation)
from ._jit import SH_C0

TWO_PI = 2.0 * math.pi
PLANAR_TOL = 1e-5
# g = 0.5 on the face boundary, where Psi flips from ~0 to ~1
HALF_LEVEL_RADIUS = math.sqrt(2.0 * math.log(2.0))
FACE_RAW = RAW_CLIP  # drives eta -> 1, tau -> 0.99, o -> 1
DEFAULT_COLOR = (0.8, 0.8, 0.8)


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: list
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = [np.asarray(f, dtype=np.int64) for f in self.faces]
        if len(self.colors) != len(self.faces):
            self.colors = np.tile(DEFAULT_COLOR, (len(self.faces), 1))
        self.colors = np.asarray(self.colors, dtype=np.float64)


# --------------------------------------------------------------------------
# OBJ loading


def _newell(pts):
    nxt = np.roll(pts, -1, axis=0)
    return np.array([
        np.sum((pts[:, 1] - nxt[:, 1]) * (pts[:, 2] + nxt[:, 2])),
        np.sum((pts[:, 2] - nxt[:, 2]) * (pts[:, 0] + nxt[:, 0])),
        np.sum((pts[:, 0] - nxt[:, 0]) * (pts[:, 1] + nxt[:, 1])),
    ])


def face_is_planar_convex(pts) -> tuple[bool, bool]:
    """(planar, convex) for a polygon given by its ordered vertices."""
    pts = np.asarray(pts, dtype=np.float64)
    n = _newell(pts)
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        return False, False
    n /= nn
    c = pts.mean(axis=0)
    planar = np.abs((pts - c) @ n).max() <= PLANAR_TOL
    e = np.roll(pts, -1, axis=0) - pts
    turn = np.cross(e, np.roll(e, -1, axis=0)) @ n
    convex = bool(np.all(turn > -1e-12))
    return bool(planar), convex


def _read_mtl(path: Path) -> dict:
    colors = {}
    current = None
    try:
        lines = path.read_text().splitlines()
    except OSError:
        warnings.warn(f"material library {path} not readable; using default colours")
        return colors
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "newmtl":
            current = " ".join(parts[1:])
        elif parts[0] == "Kd" and current is not None:
            try:
                colors[current] = tuple(float(x) for x in parts[1:4])
            except ValueError as exc:
                raise ParseError(f"bad Kd colour: {line.strip()}", path, lineno) from exc
    return colors


def load_mesh(path) -> Mesh:
    """Read positions, polygon faces and optional diffuse material colours."""
    path = Path(path)
    text = path.read_text()
    verts, faces, colors = [], [], []
    materials: dict = {}
    color = DEFAULT_COLOR
    warned_vt = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(x) for x in rest[:3]])
            elif tag == "f":
                if len(rest) < 3:
                    raise ValueError("face needs at least three vertices")
                idx = []
                for tok in rest:
                    i = int(tok.split("/")[0])
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise ValueError(f"vertex index {tok} out of range")
                    idx.append(i)
                faces.append(idx)
                colors.append(color)
            elif tag == "vt":
                if not warned_vt:
                    warnings.warn(f"{path}: texture coordinates are ignored")
                    warned_vt = True
            elif tag == "mtllib":
                materials.update(_read_mtl(path.parent / " ".join(rest)))
            elif tag == "usemtl":
                color = materials.get(" ".join(rest), DEFAULT_COLOR)
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from exc
    if not verts or not faces:
        raise EmptyMesh(f"{path}: no faces")
    V = np.asarray(verts)
    out_faces, out_colors = [], []
    for f, c in zip(faces, colors):
        planar, convex = face_is_planar_convex(V[f])
        if len(f) > 3 and not (planar and convex):
            warnings.warn(f"{path}: {'non-planar' if not planar else 'concave'} face "
                          f"with {len(f)} vertices fan-triangulated")
            for k in range(1, len(f) - 1):
                out_faces.append([f[0], f[k], f[k + 1]])
                out_colors.append(c)
        else:
            out_faces.append(f)
            out_colors.append(c)
    return Mesh(V, out_faces, np.asarray(out_colors, dtype=np.float64))


# --------------------------------------------------------------------------
# conversion


def _frames(polys):
    """Centroids, rotation frames and in-plane 2D vertex coordinates for a
    batch of polygons with equal vertex count, shape (F, n, 3)."""
    mu = polys.mean(axis=1)
    nxt = np.roll(polys, -1, axis=1)
    a, b = polys, nxt
    normal = np.stack([
        np.sum((a[..., 1] - b[..., 1]) * (a[..., 2] + b[..., 2]), axis=1),
        np.sum((a[..., 2] - b[..., 2]) * (a[..., 0] + b[..., 0]), axis=1),
        np.sum((a[..., 0] - b[..., 0]) * (a[..., 1] + b[..., 1]), axis=1),
    ], axis=1)
    area2 = np.linalg.norm(normal, axis=1)
    bad = area2 < 1e-12
    nz = normal / np.where(bad, 1.0, area2)[:, None]
    rx = polys[:, 0] - mu
    rx -= np.sum(rx * nz, axis=1, keepdims=True) * nz
    rxn = np.linalg.norm(rx, axis=1)
    bad |= rxn < 1e-12
    rx /= np.where(rxn < 1e-12, 1.0, rxn)[:, None]
    ry = np.cross(nz, rx)
    R = np.stack([rx, ry, nz], axis=2)
    d = polys - mu[:, None]
    uv = np.stack([np.sum(d * rx[:, None], axis=2), np.sum(d * ry[:, None], axis=2)], axis=2)
    return mu, R, uv, bad


def _boundary_angles(uv, K):
    """Target endpoint angles, padded to K per face.

    Extra endpoints subdivide the angular gaps between corners; each new one
    goes to the gap whose current piece is widest, and pieces are spaced
    evenly within a gap.
    """
    ang = np.arctan2(uv[..., 1], uv[..., 0])
    ang = np.where(ang <= 0, ang + TWO_PI, ang)
    ang[:, 0] = TWO_PI  # first vertex defines the x axis
    ang = np.sort(ang, axis=1)
    F, n = ang.shape
    prev = np.concatenate([np.zeros((F, 1)), ang[:, :-1]], axis=1)
    gaps = ang - prev
    pieces = np.ones((F, n), dtype=np.int64)
    rows = np.arange(F)
    for _ in range(K - n):
        k = np.argmax(gaps / pieces, axis=1)
        pieces[rows, k] += 1
    m = np.arange(K)
    frac = (m[None, None, :] + 1) / pieces[..., None]
    valid = m[None, None, :] < pieces[..., None]
    theta = prev[..., None] + gaps[..., None] * frac
    theta = np.where(frac == 1.0, ang[..., None], theta)
    return theta[valid].reshape(F, K)


def _ray_polygon(uv, theta):
    """Distance from the origin to the polygon boundary along each angle."""
    a = uv[:, None, :, :]
    e = np.roll(uv, -1, axis=1)[:, None, :, :] - a
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)[:, :, None, :]
    den = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a[..., 0] * e[..., 1] - a[..., 1] * e[..., 0]) / den
        lam = (a[..., 0] * d[..., 1] - a[..., 1] * d[..., 0]) / den
    ok = (np.abs(den) > 1e-300) & (t > 0) & (lam >= -1e-9) & (lam <= 1 + 1e-9)
    return np.where(ok, t, np.inf).min(axis=2)


def _chebyshev_centres(uv):
    """Centre of the largest inscribed circle of convex CCW polygons (F, n, 2),
    found by enumerating triples of edge lines."""
    F, n, _ = uv.shape
    e = np.roll(uv, -1, axis=1) - uv
    nrm = np.stack([e[..., 1], -e[..., 0]], axis=-1)  # outward for CCW
    nrm /= np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-300)
    off = np.sum(nrm * uv, axis=-1)  # inside: nrm.p + r <= off
    best_r = np.full(F, -np.inf)
    best_p = np.zeros((F, 2))
    for i, j, k in combinations(range(n), 3):
        A = np.stack([np.concatenate([nrm[:, q], np.ones((F, 1))], axis=1) for q in (i, j, k)], axis=1)
        rhs = off[:, [i, j, k]]
        det = np.linalg.det(A)
        okd = np.abs(det) > 1e-14
        sol = np.zeros((F, 3))
        if okd.any():
            sol[okd] = np.linalg.solve(A[okd], rhs[okd][..., None])[..., 0]
        feas = okd & np.all(np.einsum("fnd,fd->fn", nrm, sol[:, :2]) + sol[:, 2:3]
                            <= off + 1e-12, axis=1) & (sol[:, 2] > best_r)
        best_r[feas] = sol[feas, 2]
        best_p[feas] = sol[feas, :2]
    return best_p


def _convert_frames(mu, R, uv, bad, K):
    target = _boundary_angles(uv, K)
    gaps = np.diff(target, axis=1, prepend=0.0)
    bad = bad | (gaps.max(axis=1) >= math.pi)
    target = np.where(bad[:, None], TWO_PI * np.arange(1, K + 1) / K, target)
    angle_raw, exact = angle_deactivation(target)
    theta = angle_activation(angle_raw)
    radius = _ray_polygon(uv, theta)
    bad |= ~np.all(np.isfinite(radius), axis=1) | (np.nan_to_num(radius, posinf=0).min(axis=1) < 1e-12)
    radius = np.where(bad[:, None], 1.0, radius)
    return [mu, R, radius / HALF_LEVEL_RADIUS, theta, angle_raw, exact, bad]


def _convert_group(polys, K):
    """Returns (mu, R, s, theta, angle_raw, exact, bad) for equal-size faces.

    The centre is the vertex centroid unless the corner angles seen from it
    are too uneven to represent, in which case the inscribed-circle centre
    is tried instead.
    """
    mu, R, uv, bad = _frames(polys)
    out = _convert_frames(mu, R, uv, bad, K)
    retry = ~out[5] & ~out[6]
    if retry.any():
        sub = np.flatnonzero(retry)
        # Newell normal makes every face counter-clockwise in its frame
        c2 = _chebyshev_centres(uv[sub])
        mu2 = mu[sub] + c2[:, :1] * R[sub, :, 0] + c2[:, 1:] * R[sub, :, 1]
        m2, R2, uv2, bad2 = _frames_about(polys[sub], mu2, R[sub, :, 2])
        alt = _convert_frames(m2, R2, uv2, bad2 | bad[sub], K)
        # keep whichever centre loses less area
        area_a = _kernel_area(out[2][sub], out[3][sub])
        area_b = _kernel_area(alt[2], alt[3])
        use = (~alt[6]) & (alt[5] | (area_b > area_a))
        for arr, new in zip(out, alt):
            arr[sub[use]] = new[use]
    if polys.shape[1] > 3:
        for f in np.flatnonzero(~out[5] & ~out[6]):
            alt = _simplified(polys[f], K)
            if alt is not None and _kernel_area(alt[2], alt[3])[0] > \
                    _kernel_area(out[2][f:f + 1], out[3][f:f + 1])[0]:
                for arr, new in zip(out, alt):
                    arr[f] = new[0]
    return tuple(out)


def _simplified(poly, K):
    """Drop the corners with the smallest ear area until the remaining
    polygon's angles are representable; None if that never happens."""
    pts = poly.copy()
    while len(pts) > 3:
        prev, nxt = np.roll(pts, 1, axis=0), np.roll(pts, -1, axis=0)
        ear = 0.5 * np.linalg.norm(np.cross(pts - prev, nxt - pts), axis=1)
        pts = np.delete(pts, int(np.argmin(ear)), axis=0)
        out = list(_convert_group(pts[None], K))
        if out[6][0]:
            return None
        if out[5][0]:
            return out
    return None


def _kernel_area(s, theta):
    """Area enclosed by the boundary points s_k * HALF_LEVEL_RADIUS."""
    r = s * HALF_LEVEL_RADIUS
    prev_t = np.concatenate([theta[:, -1:] - TWO_PI, theta[:, :-1]], axis=1)
    prev_r = np.roll(r, 1, axis=1)
    return 0.5 * np.sum(r * prev_r * np.sin(theta - prev_t), axis=1)


def _frames_about(polys, mu, nz):
    rx = polys[:, 0] - mu
    rx -= np.sum(rx * nz, axis=1, keepdims=True) * nz
    rxn = np.linalg.norm(rx, axis=1)
    bad = rxn < 1e-12
    rx /= np.where(bad, 1.0, rxn)[:, None]
    ry = np.cross(nz, rx)
    R = np.stack([rx, ry, nz], axis=2)
    d = polys - mu[:, None]
    uv = np.stack([np.sum(d * rx[:, None], axis=2), np.sum(d * ry[:, None], axis=2)], axis=2)
    return mu, R, uv, bad


def face_to_drk(vertices, color=DEFAULT_COLOR, K: int = 8) -> DrkPrimitive:
    pts = np.asarray(vertices, dtype=np.float64)
    if len(pts) > K:
        raise TooManyVertices(f"face has {len(pts)} vertices, K = {K}")
    if len(pts) < 3:
        raise DegenerateFace("face needs at least three vertices")
    mu, R, s, theta, _, exact, bad = _convert_group(pts[None], K)
    if bad[0]:
        raise DegenerateFace("face has zero area or does not surround its centroid")
    if not exact[0]:
        warnings.warn("face corners are too uneven for the angle parametrisation; "
                      "some corners are cut")
    sh = rgb_to_sh_dc(np.asarray(color, dtype=np.float64))[None]
    return DrkPrimitive(mu[0], R[0], s[0], theta[0], float(sigmoid(FACE_RAW)),
                        float(tau_activation(FACE_RAW)), float(sigmoid(FACE_RAW)), sh)


def convert(mesh: Mesh, K: int = 8) -> RawDrkParams:
    """One kernel per face (raw parameters, degree-0 SH). Degenerate or
    oversized faces are skipped with a warning."""
    F = len(mesh.faces)
    if F == 0:
        return RawDrkParams.empty(K, 0)
    counts = np.array([len(f) for f in mesh.faces])
    too_many = counts > K
    if too_many.any():
        warnings.warn(f"skipping {int(too_many.sum())} face(s) with more than {K} vertices")
    mu = np.zeros((F, 3))
    R = np.tile(np.eye(3), (F, 1, 1))
    s = np.ones((F, K))
    angle = np.zeros((F, K))
    exact = np.ones(F, dtype=bool)
    ok = ~too_many
    for n in np.unique(counts[ok]):
        sel = np.flatnonzero(counts == n)
        idx = np.array([mesh.faces[i] for i in sel])
        m, r, sk, _, raw_angle, ex, bad = _convert_group(mesh.vertices[idx], K)
        mu[sel], R[sel], s[sel], angle[sel], exact[sel] = m, r, sk, raw_angle, ex
        ok[sel[bad]] = False
    n_bad = int((~ok).sum() - too_many.sum())
    if n_bad:
        warnings.warn(f"skipping {n_bad} degenerate face(s)")
    if not exact[ok].all():
        warnings.warn(f"{int((~exact[ok]).sum())} face(s) have corners too uneven for the "
                      "angle parametrisation; some corners are cut")
    angle = angle[ok]
    n = int(ok.sum())
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = (np.clip(mesh.colors[ok], 0, 1) - 0.5) / SH_C0
    full = np.full(n, FACE_RAW)
    return RawDrkParams(center=mu[ok], quat=rotation_to_quat_batch(R[ok]) if n else np.zeros((0, 4)),
                        scale=np.log(s[ok]), angle=angle, eta=full, tau=full.copy(),
                        opacity=full.copy(), sh=sh)


def shade_lambert(raw: RawDrkParams, light_dir, ambient: float = 0.3) -> RawDrkParams:
    """Bake Lambertian shading into the DC colour using each face normal.

    ``light_dir`` is the direction the light travels (from the light toward
    the scene). Faces whose normal points away from the light get ambient only.
    """
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    out = raw.copy()
    if len(raw) == 0:
        return out
    n = quat_to_rotation_batch(raw.quat)[:, :, 2]
    lam = np.maximum(0.0, -(n @ l))
    f = ambient + (1.0 - ambient) * lam
    rgb = np.clip(raw.sh[:, 0] * SH_C0 + 0.5, 0, 1)
    out.sh[:, 0] = (np.clip(rgb * f[:, None], 0, 1) - 0.5) / SH_C0
    return out


def polygon_mask(points_2d, width, height):
    """Pixel-centre inside test for a convex polygon in pixel coordinates."""
    pts = np.asarray(points_2d, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    inside_pos = np.ones((height, width), dtype=bool)
    inside_neg = np.ones((height, width), dtype=bool)
    for a, b in zip(pts, np.roll(pts, -1, axis=0)):
        c = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside_pos &= c >= 0
        inside_neg &= c <= 0
    return inside_pos | inside_neg

