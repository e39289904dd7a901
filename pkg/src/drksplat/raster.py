"""Tile-based forward renderer.

Primitives are binned to 16x16 tiles by a conservative culling polygon,
presorted per tile, and every pixel streams its tile's candidates through a
length-8 insertion cache before front-to-back alpha compositing.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import _jit
from .geometry import Camera, project_points
from .kernel import KernelConfig, PrimitiveSet

TILE = 16
CACHE_CAPACITY = 8
T_MIN = 1e-4
NEAR_Z = 1e-9
SECTOR_SPLITS = 4
LEVEL_3SIGMA = math.exp(-9.0)

SORT_EXACT, SORT_NONE, SORT_CACHE = 0, 1, 2
_SORT_MODES = {"exact": SORT_EXACT, "none": SORT_NONE, "cache": SORT_CACHE}
PRESORTS = ("nearest", "center", "none")


# --------------------------------------------------------------------------
# reference cache (scalar, mirrors the jitted loop)


@dataclass
class SortCache:
    capacity: int = CACHE_CAPACITY

    def __post_init__(self):
        self.entries: list[tuple[float, int, int]] = []  # (r_t, arrival, id)
        self._arrivals = 0

    def __len__(self):
        return len(self.entries)


FINISHED = "finished"


def cache_step(cache: SortCache, incoming):
    """Advance the cache by one candidate (``(r_t, id)``) or an end marker
    (``None``). Returns a popped id, ``None`` when nothing is popped, or
    :data:`FINISHED` once the cache has drained."""
    if incoming is None:
        if not cache.entries:
            return FINISHED
        return cache.entries.pop(0)[2]
    rt, pid = incoming
    # ties keep arrival order
    bisect.insort(cache.entries, (float(rt), cache._arrivals, pid))
    cache._arrivals += 1
    if len(cache.entries) > cache.capacity:
        return cache.entries.pop(0)[2]
    return None


def cache_sort_order(stream, capacity=CACHE_CAPACITY):
    """Order in which a stream of (r_t, id) pairs leaves the cache."""
    cache = SortCache(capacity)
    out = []
    for item in stream:
        popped = cache_step(cache, item)
        if popped is not None:
            out.append(popped)
    while (popped := cache_step(cache, None)) != FINISHED:
        out.append(popped)
    return out


# --------------------------------------------------------------------------
# binning


@dataclass
class TileBinning:
    tile_size: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (n_tiles + 1,) CSR row pointers
    prim_ids: np.ndarray  # (n_entries,)
    keys: np.ndarray  # (n_entries,) presort key, ascending within a tile
    presort: str

    @property
    def n_tiles(self):
        return self.tiles_x * self.tiles_y

    @property
    def n_entries(self):
        return int(self.offsets[-1])

    def tile_prims(self, t):
        return self.prim_ids[self.offsets[t]:self.offsets[t + 1]]

    def tiles_of(self, j):
        counts = np.diff(self.offsets)
        tile_of_entry = np.repeat(np.arange(self.n_tiles), counts)
        return np.unique(tile_of_entry[self.prim_ids == j])


@njit(cache=True)
def _hull(px, py, n, hx, hy):
    """Monotone-chain convex hull; returns vertex count (counter-clockwise)."""
    order = np.argsort(px[:n] + 0.0)
    # stable secondary sort on y for equal x
    for i in range(1, n):
        k = order[i]
        m = i
        while m > 0 and (px[order[m - 1]] > px[k] or
                         (px[order[m - 1]] == px[k] and py[order[m - 1]] > py[k])):
            order[m] = order[m - 1]
            m -= 1
        order[m] = k
    m = 0
    for i in range(n):
        k = order[i]
        while m >= 2 and ((hx[m - 1] - hx[m - 2]) * (py[k] - hy[m - 2])
                          - (hy[m - 1] - hy[m - 2]) * (px[k] - hx[m - 2])) <= 0.0:
            m -= 1
        hx[m] = px[k]
        hy[m] = py[k]
        m += 1
    lower = m + 1
    for i in range(n - 2, -1, -1):
        k = order[i]
        while m >= lower and ((hx[m - 1] - hx[m - 2]) * (py[k] - hy[m - 2])
                              - (hy[m - 1] - hy[m - 2]) * (px[k] - hx[m - 2])) <= 0.0:
            m -= 1
        hx[m] = px[k]
        hy[m] = py[k]
        m += 1
    return max(m - 1, 1)


@njit(cache=True)
def _support_points(s, theta, eta, rho, nsub, px, py):
    """Points whose convex hull encloses {g >= exp(-rho^2/2)} in the plane."""
    K = s.shape[0]
    n = 0
    px[n] = 0.0
    py[n] = 0.0
    n += 1
    for k in range(K):
        lo = K - 1 if k == 0 else k - 1
        tlo = theta[K - 1] - _jit.TWO_PI if k == 0 else theta[k - 1]
        thi = theta[k]
        slo = s[lo]
        shi = s[k]
        elx = slo * math.cos(tlo)
        ely = slo * math.sin(tlo)
        ehx = shi * math.cos(thi)
        ehy = shi * math.sin(thi)
        det = elx * ehy - ehx * ely
        if abs(det) < _jit.DET_EPS:
            return -1
        gap = thi - tlo
        delta = gap / nsub
        for i in range(nsub):
            pa = tlo + i * delta
            pb = pa + delta
            m1min = 1e300
            invmin = 1e300
            for pe in (pa, pb):
                c = math.cos(pe)
                sn = math.sin(pe)
                a = (ehy * c - ehx * sn) / det
                b = (-ely * c + elx * sn) / det
                m1 = abs(a) + abs(b)
                cd = math.cos((pe - tlo) * math.pi / gap)
                inv = (1.0 + cd) / (2.0 * slo * slo) + (1.0 - cd) / (2.0 * shi * shi)
                m1min = min(m1min, m1)
                invmin = min(invmin, inv)
            Rr = rho / math.sqrt(eta * m1min * m1min + (1.0 - eta) * invmin)
            px[n] = Rr * math.cos(pa)
            py[n] = Rr * math.sin(pa)
            n += 1
            Rm = Rr / math.cos(0.5 * delta)
            pm = pa + 0.5 * delta
            px[n] = Rm * math.cos(pm)
            py[n] = Rm * math.sin(pm)
            n += 1
    return n


@njit(cache=True)
def _screen_polygon(j, mu, R, s, theta, eta, tau, o, level, nsub, Rwc, tcam,
                    fx, fy, cx, cy, bx, by, hx, hy, cz, qx, qy):
    """Projected, near-clipped culling polygon of primitive j (count in return)."""
    y = level / o[j]
    if y > 1.0:
        return 0
    gstar = _jit.psi_inv(y, tau[j])
    if gstar <= 0.0:
        return 0
    rho = math.sqrt(max(-2.0 * math.log(gstar), 0.0))
    n = _support_points(s[j], theta[j], eta[j], rho, nsub, bx, by)
    if n < 0:
        return 0
    m = _hull(bx, by, n, hx, hy)
    # tangent plane -> camera space
    for i in range(m):
        for r in range(3):
            w = mu[j, r] + hx[i] * R[j, r, 0] + hy[i] * R[j, r, 1]
            bx[i * 3 + r] = w  # scratch reuse: world point
    for i in range(m):
        for r in range(3):
            cz[i * 3 + r] = (Rwc[r, 0] * bx[i * 3] + Rwc[r, 1] * bx[i * 3 + 1]
                             + Rwc[r, 2] * bx[i * 3 + 2] + tcam[r])
    # clip against z >= NEAR_Z
    k = 0
    for i in range(m):
        a = i
        b = (i + 1) % m
        za = cz[a * 3 + 2]
        zb = cz[b * 3 + 2]
        ina = za >= NEAR_Z
        inb = zb >= NEAR_Z
        if ina:
            qx[k] = fx * cz[a * 3] / za + cx
            qy[k] = fy * cz[a * 3 + 1] / za + cy
            k += 1
        if ina != inb and m > 1:
            t = (NEAR_Z - za) / (zb - za)
            X = cz[a * 3] + t * (cz[b * 3] - cz[a * 3])
            Y = cz[a * 3 + 1] + t * (cz[b * 3 + 1] - cz[a * 3 + 1])
            qx[k] = fx * X / NEAR_Z + cx
            qy[k] = fy * Y / NEAR_Z + cy
            k += 1
    return k


@njit(cache=True)
def _poly_hits_rect(qx, qy, n, x0, y0, x1, y1):
    """Separating-axis test: convex polygon vs axis-aligned rectangle."""
    if n == 0:
        return False
    mnx = qx[0]
    mxx = qx[0]
    mny = qy[0]
    mxy = qy[0]
    for i in range(1, n):
        mnx = min(mnx, qx[i])
        mxx = max(mxx, qx[i])
        mny = min(mny, qy[i])
        mxy = max(mxy, qy[i])
    if mxx < x0 or mnx > x1 or mxy < y0 or mny > y1:
        return False
    for i in range(n):
        k = (i + 1) % n
        ax = -(qy[k] - qy[i])
        ay = qx[k] - qx[i]
        if ax == 0.0 and ay == 0.0:
            continue
        pmin = 1e300
        pmax = -1e300
        for m in range(n):
            p = ax * qx[m] + ay * qy[m]
            pmin = min(pmin, p)
            pmax = max(pmax, p)
        rmin = 1e300
        rmax = -1e300
        for cxr in (x0, x1):
            for cyr in (y0, y1):
                p = ax * cxr + ay * cyr
                rmin = min(rmin, p)
                rmax = max(rmax, p)
        if pmax < rmin or rmax < pmin:
            return False
    return True


@njit(cache=True)
def _disk_hits_rect(px, py, r, x0, y0, x1, y1):
    dx = max(x0 - px, 0.0, px - x1)
    dy = max(y0 - py, 0.0, py - y1)
    return dx * dx + dy * dy <= r * r


@njit(cache=True)
def _tile_range(lo, hi, ntiles, ts):
    a = int(math.floor(max(min(lo, 1e9), -1e9) / ts))
    b = int(math.floor(max(min(hi, 1e9), -1e9) / ts))
    return max(a, 0), min(b, ntiles - 1)


@njit(parallel=True, cache=True)
def _bin_pass(count_only, offsets, out_tiles, mu, R, s, theta, eta, tau, o, pc,
              level, alpha_min, s_l, nsub, Rwc, tcam, fx, fy, cx, cy, W, H, ts):
    N = mu.shape[0]
    K = s.shape[1]
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    npts = 2 * K * nsub + 4
    counts = np.zeros(N, dtype=np.int64)
    for j in prange(N):
        if o[j] < alpha_min:
            continue
        bx = np.empty(3 * npts)
        by = np.empty(npts)
        hx = np.empty(npts + 1)
        hy = np.empty(npts + 1)
        cz = np.empty(3 * npts)
        qx = np.empty(2 * npts)
        qy = np.empty(2 * npts)
        n = _screen_polygon(j, mu, R, s, theta, eta, tau, o, level, nsub, Rwc, tcam,
                            fx, fy, cx, cy, bx, by, hx, hy, cz, qx, qy)
        # low-pass floor support: o*exp(-d^2/(2 cos^2 s_l^2)) >= alpha_min
        has_disk = not math.isnan(pc[j, 0])
        rdisk = s_l * math.sqrt(2.0 * math.log(o[j] / alpha_min)) if has_disk else 0.0
        if n == 0 and not has_disk:
            continue
        lox = 1e300
        hix = -1e300
        loy = 1e300
        hiy = -1e300
        for i in range(n):
            lox = min(lox, qx[i])
            hix = max(hix, qx[i])
            loy = min(loy, qy[i])
            hiy = max(hiy, qy[i])
        if has_disk:
            lox = min(lox, pc[j, 0] - rdisk)
            hix = max(hix, pc[j, 0] + rdisk)
            loy = min(loy, pc[j, 1] - rdisk)
            hiy = max(hiy, pc[j, 1] + rdisk)
        if hix < 0.0 or hiy < 0.0 or lox > W or loy > H:
            continue
        tx0, tx1 = _tile_range(lox, hix, tiles_x, ts)
        ty0, ty1 = _tile_range(loy, hiy, tiles_y, ts)
        c = 0
        for ty in range(ty0, ty1 + 1):
            y0 = ty * ts
            y1 = min((ty + 1) * ts, H)
            for tx in range(tx0, tx1 + 1):
                x0 = tx * ts
                x1 = min((tx + 1) * ts, W)
                hit = _poly_hits_rect(qx, qy, n, x0, y0, x1, y1)
                if not hit and has_disk:
                    hit = _disk_hits_rect(pc[j, 0], pc[j, 1], rdisk, x0, y0, x1, y1)
                if hit:
                    if not count_only:
                        out_tiles[offsets[j] + c] = ty * tiles_x + tx
                    c += 1
        counts[j] = c
    return counts


@njit(parallel=True, cache=True)
def _nearest_keys(tiles, prims, mu, R, ro, fx, fy, cx, cy, c2w, W, H, ts, geps):
    n = tiles.shape[0]
    tiles_x = (W + ts - 1) // ts
    keys = np.empty(n)
    for e in prange(n):
        t = tiles[e]
        j = prims[e]
        x0 = (t % tiles_x) * ts
        y0 = (t // tiles_x) * ts
        x1 = min(x0 + ts, W)
        y1 = min(y0 + ts, H)
        rd = np.empty(3)
        best = 1e300
        for q in range(5):
            if q == 4:
                qx = 0.5 * (x0 + x1)
                qy = 0.5 * (y0 + y1)
            else:
                qx = x0 if q % 2 == 0 else x1
                qy = y0 if q < 2 else y1
            _jit.pixel_dir(qx, qy, fx, fy, cx, cy, c2w, rd)
            rt, u, v, den = _jit.hit_geometry(j, ro, rd, mu, R)
            if abs(den) >= geps and rt > 0.0 and rt < best:
                best = rt
        if best == 1e300:
            dx = mu[j, 0] - ro[0]
            dy = mu[j, 1] - ro[1]
            dz = mu[j, 2] - ro[2]
            best = math.sqrt(dx * dx + dy * dy + dz * dz)
        keys[e] = best
    return keys


@njit(parallel=True, cache=True)
def _support_radii(s, theta, eta, tau, o, level, alpha_min, s_l, nsub):
    """Squared tangent-plane radius beyond which o*Psi(g) < level, and the
    squared screen radius beyond which the low-pass floor is < alpha_min."""
    N, K = s.shape
    out = np.full((N, 2), -1.0)
    for j in prange(N):
        if o[j] < alpha_min:
            continue
        y = level / o[j]
        gstar = _jit.psi_inv(min(y, 1.0), tau[j])
        rho = math.sqrt(max(-2.0 * math.log(max(gstar, 1e-300)), 0.0))
        px = np.empty(2 * K * nsub + 1)
        py = np.empty(2 * K * nsub + 1)
        n = _support_points(s[j], theta[j], eta[j], rho, nsub, px, py)
        r2 = 0.0
        for i in range(max(n, 0)):
            r2 = max(r2, px[i] * px[i] + py[i] * py[i])
        out[j, 0] = r2 * (1.0 + 1e-9)
        out[j, 1] = 2.0 * s_l * s_l * math.log(o[j] / alpha_min) * (1.0 + 1e-9)
    return out


@njit(cache=True)
def _surely_invisible(j, ro, rd, pxc, pyc, mu, R, pc, radii):
    """True when primitive j cannot reach alpha_min on this ray."""
    if radii[j, 0] < 0.0:
        return True
    dx0 = pxc - pc[j, 0]
    dy0 = pyc - pc[j, 1]
    if dx0 * dx0 + dy0 * dy0 <= radii[j, 1]:
        return False
    nx = R[j, 0, 2]
    ny = R[j, 1, 2]
    nz = R[j, 2, 2]
    denom = rd[0] * nx + rd[1] * ny + rd[2] * nz
    if denom == 0.0:
        return True
    mx = mu[j, 0] - ro[0]
    my = mu[j, 1] - ro[1]
    mz = mu[j, 2] - ro[2]
    rt = (mx * nx + my * ny + mz * nz) / denom
    dx = rt * rd[0] - mx
    dy = rt * rd[1] - my
    dz = rt * rd[2] - mz
    # in-plane offset: |d|^2 = u^2 + v^2 since d is orthogonal to the normal
    return dx * dx + dy * dy + dz * dz > radii[j, 0]


def support_radii(prims: PrimitiveSet, cfg: KernelConfig) -> np.ndarray:
    if len(prims) == 0:
        return np.zeros((0, 2))
    return _support_radii(prims.s, prims.theta, prims.eta, prims.tau, prims.o,
                          culling_level(cfg), cfg.alpha_min, cfg.s_l, SECTOR_SPLITS)


def projected_centers(prims: PrimitiveSet, cam: Camera) -> np.ndarray:
    """Pixel coordinates of each centre; NaN rows for centres behind the camera."""
    pix, z = project_points(cam, prims.mu)
    pix = pix.copy()
    pix[~(z > 0)] = np.nan
    return pix


def culling_level(cfg: KernelConfig) -> float:
    return min(LEVEL_3SIGMA, cfg.alpha_min)


def bin_primitives(prims: PrimitiveSet, cam: Camera, cfg: KernelConfig | None = None,
                   presort: str = "nearest", tile_size: int = TILE) -> TileBinning:
    cfg = cfg or KernelConfig(K=prims.K if len(prims) else 8)
    if presort not in PRESORTS:
        raise ValueError(f"unknown presort '{presort}'")
    W, H = cam.width, cam.height
    tiles_x = -(-W // tile_size)
    tiles_y = -(-H // tile_size)
    n_tiles = tiles_x * tiles_y
    if len(prims) == 0:
        return TileBinning(tile_size, tiles_x, tiles_y, np.zeros(n_tiles + 1, dtype=np.int64),
                           np.zeros(0, dtype=np.int64), np.zeros(0), presort)
    pc = projected_centers(prims, cam)
    args = (prims.mu, prims.R, prims.s, prims.theta, prims.eta, prims.tau, prims.o, pc,
            culling_level(cfg), cfg.alpha_min, cfg.s_l, SECTOR_SPLITS, cam.rotation,
            cam.translation, cam.fx, cam.fy, cam.cx, cam.cy, W, H, tile_size)
    dummy = np.zeros(1, dtype=np.int64)
    counts = _bin_pass(True, dummy, dummy, *args)
    starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    tiles = np.empty(int(starts[-1]), dtype=np.int64)
    _bin_pass(False, starts, tiles, *args)
    prim_of = np.repeat(np.arange(len(prims), dtype=np.int64), counts)

    if presort == "nearest":
        keys = _nearest_keys(tiles, prim_of, prims.mu, prims.R, cam.center, cam.fx, cam.fy,
                             cam.cx, cam.cy, cam.cam_to_world, W, H, tile_size, cfg.grazing_eps)
    elif presort == "center":
        zc = prims.mu @ cam.rotation[2] + cam.translation[2]
        keys = zc[prim_of]
    else:
        keys = prim_of.astype(np.float64)
    order = np.lexsort((prim_of, keys, tiles))
    tiles, prim_of, keys = tiles[order], prim_of[order], keys[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tiles + 1, 1)
    return TileBinning(tile_size, tiles_x, tiles_y, np.cumsum(offsets), prim_of, keys, presort)


# --------------------------------------------------------------------------
# compositing


@njit(cache=True)
def _blend(j, at, rt, denom, R, sh, deg, basis, rgb, acc):
    _jit.sh_color(sh[j], basis, deg, rgb)
    w = acc[0] * at
    acc[1] += w * rgb[0]
    acc[2] += w * rgb[1]
    acc[3] += w * rgb[2]
    acc[4] += w * rt
    sg = 1.0 if denom >= 0.0 else -1.0
    acc[5] -= w * sg * R[j, 0, 2]
    acc[6] -= w * sg * R[j, 1, 2]
    acc[7] -= w * sg * R[j, 2, 2]
    acc[0] *= 1.0 - at


@njit(cache=True)
def _emit(e, at, rt, code, rec_entry, rec_at, rec_rt, rec_code, base, nrec, record):
    if record:
        rec_entry[base + nrec] = e
        rec_at[base + nrec] = at
        rec_rt[base + nrec] = rt
        rec_code[base + nrec] = code
    return nrec + 1


@njit(parallel=True, cache=True)
def _render_tiles(tile_order, tiles_x, W, H, ts, offs, prim_of,
                  mu, R, s, theta, eta, tau, o, pc, radii, sh, deg,
                  fx, fy, cx, cy, c2w, ro, bg, s_l, geps, amin, t_min, mode,
                  color, depth, normal, trans,
                  record, rec_off, rec_n, rec_entry, rec_at, rec_rt, rec_code):
    cap = 8
    for ti in prange(tile_order.shape[0]):
        t = tile_order[ti]
        tx = t % tiles_x
        ty = t // tiles_x
        e0 = offs[t]
        e1 = offs[t + 1]
        n = e1 - e0
        rd = np.empty(3)
        basis = np.zeros(16)
        rgb = np.empty(3)
        acc = np.empty(8)
        b_rt = np.empty(max(n, cap + 1))
        b_at = np.empty(max(n, cap + 1))
        b_den = np.empty(max(n, cap + 1))
        b_e = np.empty(max(n, cap + 1), dtype=np.int64)
        b_code = np.empty(max(n, cap + 1), dtype=np.int64)
        for py in range(ty * ts, min((ty + 1) * ts, H)):
            for px in range(tx * ts, min((tx + 1) * ts, W)):
                pix = py * W + px
                pxc = px + 0.5
                pyc = py + 0.5
                _jit.pixel_dir(pxc, pyc, fx, fy, cx, cy, c2w, rd)
                _jit.sh_basis(rd[0], rd[1], rd[2], deg, basis)
                acc[:] = 0.0
                acc[0] = 1.0
                base = rec_off[pix] if record else 0
                nrec = 0
                size = 0
                done = False
                for e in range(e0, e1):
                    j = prim_of[e]
                    if _surely_invisible(j, ro, rd, pxc, pyc, mu, R, pc, radii):
                        continue
                    ok, rt, at, den, code = _jit.hit_forward(
                        j, ro, rd, pxc, pyc, mu, R, s, theta, eta, tau, o, pc, s_l, geps)
                    if not ok or at < amin:
                        continue
                    if mode == 1:
                        _blend(j, at, rt, den, R, sh, deg, basis, rgb, acc)
                        nrec = _emit(e, at, rt, code, rec_entry, rec_at, rec_rt, rec_code,
                                     base, nrec, record)
                        if acc[0] < t_min:
                            done = True
                            break
                        continue
                    # insertion after equal keys keeps arrival order
                    m = size
                    while m > 0 and b_rt[m - 1] > rt:
                        b_rt[m] = b_rt[m - 1]
                        b_at[m] = b_at[m - 1]
                        b_den[m] = b_den[m - 1]
                        b_e[m] = b_e[m - 1]
                        b_code[m] = b_code[m - 1]
                        m -= 1
                    b_rt[m] = rt
                    b_at[m] = at
                    b_den[m] = den
                    b_e[m] = e
                    b_code[m] = code
                    size += 1
                    if mode == 2 and size > cap:
                        ep = b_e[0]
                        _blend(prim_of[ep], b_at[0], b_rt[0], b_den[0], R, sh, deg, basis, rgb, acc)
                        nrec = _emit(ep, b_at[0], b_rt[0], b_code[0], rec_entry, rec_at, rec_rt,
                                     rec_code, base, nrec, record)
                        for q in range(size - 1):
                            b_rt[q] = b_rt[q + 1]
                            b_at[q] = b_at[q + 1]
                            b_den[q] = b_den[q + 1]
                            b_e[q] = b_e[q + 1]
                            b_code[q] = b_code[q + 1]
                        size -= 1
                        if acc[0] < t_min:
                            done = True
                            break
                if not done:
                    for q in range(size):
                        ep = b_e[q]
                        _blend(prim_of[ep], b_at[q], b_rt[q], b_den[q], R, sh, deg, basis, rgb, acc)
                        nrec = _emit(ep, b_at[q], b_rt[q], b_code[q], rec_entry, rec_at, rec_rt,
                                     rec_code, base, nrec, record)
                        if acc[0] < t_min:
                            break
                T = acc[0]
                color[py, px, 0] = acc[1] + T * bg[0]
                color[py, px, 1] = acc[2] + T * bg[1]
                color[py, px, 2] = acc[3] + T * bg[2]
                depth[py, px] = acc[4]
                normal[py, px, 0] = acc[5]
                normal[py, px, 1] = acc[6]
                normal[py, px, 2] = acc[7]
                trans[py, px] = T
                if record:
                    rec_n[pix] = nrec


@dataclass
class RenderRecord:
    """Per-pixel blend order captured during the forward pass."""

    binning: TileBinning
    pc: np.ndarray
    offsets: np.ndarray  # (H*W,) slab start per pixel
    count: np.ndarray  # (H*W,) number of composited entries
    entry: np.ndarray  # binning entry index per composited hit
    alpha: np.ndarray
    r_t: np.ndarray
    code: np.ndarray
    sh_degree: int
    t_min: float

    def slab_index(self):
        """Flat indices of every recorded hit, pixel-major."""
        total = int(self.count.sum())
        starts = np.repeat(self.offsets, self.count)
        first = np.repeat(np.cumsum(self.count) - self.count, self.count)
        return starts + np.arange(total) - first

    def pixel(self, px, py, width):
        pix = py * width + px
        a = self.offsets[pix]
        b = a + self.count[pix]
        ent = self.entry[a:b]
        return self.binning.prim_ids[ent], self.alpha[a:b], self.r_t[a:b]


@dataclass
class FrameBuffers:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    alpha: np.ndarray
    background: np.ndarray
    transmittance: np.ndarray | None = None
    record: RenderRecord | None = None


def _pixel_slabs(binning: TileBinning, W, H):
    ts = binning.tile_size
    counts = np.diff(binning.offsets).reshape(binning.tiles_y, binning.tiles_x)
    per_pix = np.repeat(np.repeat(counts, ts, axis=0), ts, axis=1)[:H, :W].ravel()
    offsets = np.zeros(H * W, dtype=np.int64)
    np.cumsum(per_pix[:-1], out=offsets[1:])
    return offsets, int(per_pix.sum())


def render(prims: PrimitiveSet, cam: Camera, cfg: KernelConfig | None = None, *,
           background=(0.0, 0.0, 0.0), sh_degree: int | None = None, sort: str = "cache",
           presort: str = "nearest", record: bool = False, tile_order=None,
           binning: TileBinning | None = None, t_min: float = T_MIN) -> FrameBuffers:
    """Render ``prims`` through ``cam``.

    ``sort`` selects the per-pixel ordering: ``"cache"`` (length-8 insertion
    cache), ``"exact"`` (full per-pixel sort by r_t) or ``"none"`` (tile
    presort order). ``record=True`` keeps the blend order for the backward
    pass.
    """
    cfg = cfg or KernelConfig(K=prims.K if len(prims) else 8)
    W, H = cam.width, cam.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if binning is None:
        binning = bin_primitives(prims, cam, cfg, presort=presort)
    if sh_degree is None:
        sh_degree = int(round(math.sqrt(prims.sh.shape[1]))) - 1 if len(prims) else 0
    if len(prims) and (sh_degree + 1) ** 2 > prims.sh.shape[1]:
        raise ValueError("sh_degree exceeds stored coefficients")
    pc = projected_centers(prims, cam) if len(prims) else np.zeros((0, 2))
    if tile_order is None:
        tile_order = np.arange(binning.n_tiles, dtype=np.int64)
    tile_order = np.asarray(tile_order, dtype=np.int64)
    if sorted(tile_order.tolist()) != list(range(binning.n_tiles)):
        raise ValueError("tile_order must be a permutation of the tile indices")

    color = np.empty((H, W, 3))
    depth = np.empty((H, W))
    normal = np.empty((H, W, 3))
    trans = np.empty((H, W))
    if record:
        rec_off, total = _pixel_slabs(binning, W, H)
        rec_n = np.zeros(H * W, dtype=np.int64)
        rec_entry = np.empty(total, dtype=np.int64)
        rec_at = np.empty(total)
        rec_rt = np.empty(total)
        rec_code = np.empty(total, dtype=np.int64)
    else:
        rec_off = rec_n = rec_entry = rec_code = np.zeros(1, dtype=np.int64)
        rec_at = rec_rt = np.zeros(1)

    if len(prims):
        mu, R, s, th = prims.mu, prims.R, prims.s, prims.theta
        eta, tau, o, sh = prims.eta, prims.tau, prims.o, prims.sh
    else:
        mu, R, s, th = np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 8)), np.zeros((0, 8))
        eta = tau = o = np.zeros(0)
        sh = np.zeros((0, 1, 3))
    radii = support_radii(prims, cfg) if len(prims) else np.zeros((0, 2))
    _render_tiles(tile_order, binning.tiles_x, W, H, binning.tile_size, binning.offsets,
                  binning.prim_ids, mu, R, s, th, eta, tau, o, pc, radii, sh, sh_degree,
                  cam.fx, cam.fy, cam.cx, cam.cy, cam.cam_to_world, cam.center, bg,
                  cfg.s_l, cfg.grazing_eps, cfg.alpha_min, t_min, _SORT_MODES[sort],
                  color, depth, normal, trans,
                  record, rec_off, rec_n, rec_entry, rec_at, rec_rt, rec_code)
    rec = None
    if record:
        rec = RenderRecord(binning, pc, rec_off, rec_n, rec_entry, rec_at, rec_rt, rec_code,
                           sh_degree, t_min)
    return FrameBuffers(color, depth, normal, 1.0 - trans, bg, trans, rec)


# --------------------------------------------------------------------------
# sorting evaluation

SORT_EVAL_MODES = {
    "nearest+cache": ("nearest", "cache"),
    "center+cache": ("center", "cache"),
    "cache-only": ("none", "cache"),
    "none": ("none", "none"),
}


@njit(cache=True)
def _sequence_scores(offsets, counts, rt):
    """Per-pixel (sorted?, kendall tau-b, mean abs error) over pixels with >= 2 hits."""
    P = counts.shape[0]
    out = np.full((P, 3), np.nan)
    for p in range(P):
        m = counts[p]
        if m < 2:
            continue
        seq = rt[offsets[p]:offsets[p] + m]
        srt = np.sort(seq)
        ok = 1.0
        mae = 0.0
        for i in range(m):
            if seq[i] != srt[i]:
                ok = 0.0
            mae += abs(seq[i] - srt[i])
        conc = 0.0
        disc = 0.0
        ties = 0.0
        for i in range(m):
            for k in range(i + 1, m):
                d = seq[k] - seq[i]
                if d > 0:
                    conc += 1
                elif d < 0:
                    disc += 1
                else:
                    ties += 1
        n0 = m * (m - 1) / 2.0
        tau = 1.0 if n0 == ties else (conc - disc) / math.sqrt(n0 * (n0 - ties))
        out[p, 0] = ok
        out[p, 1] = tau
        out[p, 2] = mae / m
    return out


def sequence_scores(frame: FrameBuffers) -> np.ndarray:
    rec = frame.record
    return _sequence_scores(rec.offsets, rec.count, rec.r_t)


def eval_sorting(prims: PrimitiveSet, cam: Camera, mode: str, cfg: KernelConfig | None = None):
    """(accuracy, mean Kendall tau, mean MAE of r_t) of the blend order.

    Early termination is disabled so every visible hit is scored.
    """
    if mode not in SORT_EVAL_MODES:
        raise ValueError(f"unknown sorting mode '{mode}'")
    presort, sort = SORT_EVAL_MODES[mode]
    frame = render(prims, cam, cfg, presort=presort, sort=sort, record=True, t_min=0.0)
    sc = sequence_scores(frame)
    sc = sc[~np.isnan(sc[:, 0])]
    if len(sc) == 0:
        return 1.0, 1.0, 0.0
    return float(sc[:, 0].mean()), float(sc[:, 1].mean()), float(sc[:, 2].mean())
