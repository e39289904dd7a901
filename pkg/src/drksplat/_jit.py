"""Jitted scalar math shared by the rasterizer, the backward pass and the
public scalar API.

Everything in here works on plain floats and numpy arrays so numba can
compile it; the Python-facing wrappers live in :mod:`drksplat.kernel` and
:mod:`drksplat.geometry`.
"""
import math
import warnings

import numpy as np
from numba import njit

# an old system TBB is detected and skipped; numba falls back to OpenMP
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

TWO_PI = 2.0 * math.pi
EXP_FLOOR = -30.0
ALPHA_MAX = 0.999
DET_EPS = 1e-12
R2_FLOOR = 1e-24

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

# status codes returned by kernel_eval
OK = 0
DEGENERATE = 2


@njit(cache=True)
def polar_angle(u, v):
    """atan2 folded onto (0, 2pi]."""
    th = math.atan2(v, u)
    if th <= 0.0:
        th += TWO_PI
    return th


@njit(cache=True)
def bracket(th, theta):
    # theta[-1] == 2pi, so the search always terminates
    K = theta.shape[0]
    hi = K - 1
    for k in range(K):
        if th <= theta[k]:
            hi = k
            break
    if hi == 0:
        return K - 1, 0, theta[K - 1] - TWO_PI, theta[0]
    return hi - 1, hi, theta[hi - 1], theta[hi]


@njit(cache=True)
def kernel_eval(u, v, s, theta, eta):
    """Returns (g, hi, exp_clamped, status)."""
    r2sq = u * u + v * v
    if r2sq == 0.0:
        return 1.0, -1, False, OK
    th = polar_angle(u, v)
    lo, hi, tlo, thi = bracket(th, theta)
    dth = (th - tlo) * math.pi / (thi - tlo)
    c = math.cos(dth)
    slo = s[lo]
    shi = s[hi]
    inv = (1.0 + c) / (2.0 * slo * slo) + (1.0 - c) / (2.0 * shi * shi)
    elx = slo * math.cos(tlo)
    ely = slo * math.sin(tlo)
    ehx = shi * math.cos(thi)
    ehy = shi * math.sin(thi)
    det = elx * ehy - ehx * ely
    if abs(det) < DET_EPS:
        return 0.0, hi, False, DEGENERATE
    a = (ehy * u - ehx * v) / det
    b = (-ely * u + elx * v) / det
    r1 = abs(a) + abs(b)
    E = -0.5 * (eta * r1 * r1 + (1.0 - eta) * r2sq * inv)
    if E < EXP_FLOOR:
        return math.exp(EXP_FLOOR), hi, True, OK
    return math.exp(E), hi, False, OK


@njit(cache=True)
def kernel_bwd(u, v, s, theta, eta, dg, ds_out, dth_out):
    """Backprop dL/dg into (s, theta) accumulators; returns (dL/du, dL/dv, dL/deta)."""
    r2sq = u * u + v * v
    if r2sq == 0.0:
        return 0.0, 0.0, 0.0
    th = polar_angle(u, v)
    lo, hi, tlo, thi = bracket(th, theta)
    gap = thi - tlo
    dth = (th - tlo) * math.pi / gap
    c = math.cos(dth)
    sn = math.sin(dth)
    slo = s[lo]
    shi = s[hi]
    inv = (1.0 + c) / (2.0 * slo * slo) + (1.0 - c) / (2.0 * shi * shi)
    clo = math.cos(tlo)
    snlo = math.sin(tlo)
    chi = math.cos(thi)
    snhi = math.sin(thi)
    elx = slo * clo
    ely = slo * snlo
    ehx = shi * chi
    ehy = shi * snhi
    det = elx * ehy - ehx * ely
    if abs(det) < DET_EPS:
        return 0.0, 0.0, 0.0
    a = (ehy * u - ehx * v) / det
    b = (-ely * u + elx * v) / det
    sa = 1.0 if a >= 0.0 else -1.0
    sb = 1.0 if b >= 0.0 else -1.0
    r1 = abs(a) + abs(b)
    E = -0.5 * (eta * r1 * r1 + (1.0 - eta) * r2sq * inv)
    if E < EXP_FLOOR:
        return 0.0, 0.0, 0.0
    dE = dg * math.exp(E)

    dE_dr1 = -eta * r1
    dE_dr2sq = -0.5 * (1.0 - eta) * inv
    dE_dinv = -0.5 * (1.0 - eta) * r2sq
    deta = dE * (-0.5 * (r1 * r1 - r2sq * inv))

    dinv_ddth = 0.5 * sn * (1.0 / (shi * shi) - 1.0 / (slo * slo))
    ddth_dth = math.pi / gap
    ddth_dtlo = math.pi * (th - thi) / (gap * gap)
    ddth_dthi = -math.pi * (th - tlo) / (gap * gap)

    # d r1 / d(u, v) = M^-T sign(a, b)
    wx = (ehy * sa - ely * sb) / det
    wy = (-ehx * sa + elx * sb) / det

    r2c = max(r2sq, R2_FLOOR)
    gr1 = dE * dE_dr1
    ginv = dE * dE_dinv
    gang = ginv * dinv_ddth * ddth_dth
    du = gr1 * wx + dE * dE_dr2sq * 2.0 * u + gang * (-v / r2c)
    dv = gr1 * wy + dE * dE_dr2sq * 2.0 * v + gang * (u / r2c)

    ds_out[lo] += gr1 * (-a * (wx * clo + wy * snlo)) - ginv * (1.0 + c) / (slo * slo * slo)
    ds_out[hi] += gr1 * (-b * (wx * chi + wy * snhi)) - ginv * (1.0 - c) / (shi * shi * shi)
    dth_out[lo] += gr1 * (-a * slo * (-wx * snlo + wy * clo)) + ginv * dinv_ddth * ddth_dtlo
    dth_out[hi] += gr1 * (-b * shi * (-wx * snhi + wy * chi)) + ginv * dinv_ddth * ddth_dthi
    return du, dv, deta


@njit(cache=True)
def psi(g, tau):
    """Sharpening remap; returns (value, branch)."""
    if g < 0.0:
        g = 0.0
    elif g > 1.0:
        g = 1.0
    if g < (1.0 + tau) * 0.25:
        return (1.0 - tau) / (1.0 + tau) * g, 0
    if g < (3.0 - tau) * 0.25:
        return (1.0 + tau) / (1.0 - tau) * g - tau / (1.0 - tau), 1
    return (1.0 - tau) / (1.0 + tau) * g + 2.0 * tau / (1.0 + tau), 2


@njit(cache=True)
def psi_grad(g, tau):
    """(dPsi/dg, dPsi/dtau) on the active branch."""
    if g < 0.0:
        g = 0.0
    elif g > 1.0:
        g = 1.0
    if g < (1.0 + tau) * 0.25:
        return (1.0 - tau) / (1.0 + tau), -2.0 * g / ((1.0 + tau) * (1.0 + tau))
    if g < (3.0 - tau) * 0.25:
        return (1.0 + tau) / (1.0 - tau), (2.0 * g - 1.0) / ((1.0 - tau) * (1.0 - tau))
    return (1.0 - tau) / (1.0 + tau), 2.0 * (1.0 - g) / ((1.0 + tau) * (1.0 + tau))


@njit(cache=True)
def psi_inv(y, tau):
    if y < 0.0:
        y = 0.0
    elif y > 1.0:
        y = 1.0
    if y < (1.0 - tau) * 0.25:
        return y * (1.0 + tau) / (1.0 - tau)
    if y < (3.0 + tau) * 0.25:
        return (y * (1.0 - tau) + tau) / (1.0 + tau)
    return (y * (1.0 + tau) - 2.0 * tau) / (1.0 - tau)


@njit(cache=True)
def lowpass_exponent(dx, dy, cosv, s_l):
    return -(dx * dx + dy * dy) / (2.0 * cosv * cosv * s_l * s_l)


@njit(cache=True)
def sh_basis(x, y, z, deg, out):
    out[0] = SH_C0
    if deg < 1:
        return
    out[1] = -SH_C1 * y
    out[2] = SH_C1 * z
    out[3] = -SH_C1 * x
    if deg < 2:
        return
    xx = x * x
    yy = y * y
    zz = z * z
    out[4] = SH_C2[0] * x * y
    out[5] = SH_C2[1] * y * z
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[7] = SH_C2[3] * x * z
    out[8] = SH_C2[4] * (xx - yy)
    if deg < 3:
        return
    out[9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[10] = SH_C3[1] * x * y * z
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[14] = SH_C3[5] * z * (xx - yy)
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy)


@njit(cache=True)
def sh_color(sh, basis, deg, rgb):
    """rgb <- max(0, sum_i basis_i sh_i + 0.5); returns nothing."""
    nc = (deg + 1) * (deg + 1)
    for ch in range(3):
        acc = 0.0
        for i in range(nc):
            acc += basis[i] * sh[i, ch]
        acc += 0.5
        rgb[ch] = acc if acc > 0.0 else 0.0


# --------------------------------------------------------------------------
# per (ray, primitive) evaluation


@njit(cache=True)
def hit_forward(j, ro, rd, pxc, pyc, mu, R, s, theta, eta, tau, o, pc,
                s_l, grazing_eps):
    """Evaluate one primitive along one pixel ray.

    Returns (valid, r_t, alpha_tilde, denom, code). ``code`` packs the
    discrete branch state (bracket, Psi branch, low-pass gate, clamps) so
    finite-difference checks can detect branch crossings.
    """
    nx = R[j, 0, 2]
    ny = R[j, 1, 2]
    nz = R[j, 2, 2]
    denom = rd[0] * nx + rd[1] * ny + rd[2] * nz
    if abs(denom) < grazing_eps:
        return False, 0.0, 0.0, denom, -1
    mx = mu[j, 0] - ro[0]
    my = mu[j, 1] - ro[1]
    mz = mu[j, 2] - ro[2]
    rt = (mx * nx + my * ny + mz * nz) / denom
    if rt <= 0.0:
        return False, rt, 0.0, denom, -1
    dx = rt * rd[0] - mx
    dy = rt * rd[1] - my
    dz = rt * rd[2] - mz
    u = R[j, 0, 0] * dx + R[j, 1, 0] * dy + R[j, 2, 0] * dz
    v = R[j, 0, 1] * dx + R[j, 1, 1] * dy + R[j, 2, 1] * dz
    g, hi, gclamp, status = kernel_eval(u, v, s[j], theta[j], eta[j])
    if status != OK:
        return False, rt, 0.0, denom, -1
    ps, br = psi(g, tau[j])
    a = o[j] * ps
    cosv = abs(denom)
    E = lowpass_exponent(pxc - pc[j, 0], pyc - pc[j, 1], cosv, s_l)
    lclamp = E < EXP_FLOOR
    if lclamp:
        E = EXP_FLOOR
    f = o[j] * math.exp(E)
    lp = f > a
    at = f if lp else a
    aclamp = at > ALPHA_MAX
    if aclamp:
        at = ALPHA_MAX
    code = ((((hi + 1) * 3 + br) * 2 + int(lp)) * 2 + int(aclamp)) * 4 \
        + int(gclamp) * 2 + int(lclamp)
    return True, rt, at, denom, code


@njit(cache=True)
def hit_backward(j, ro, rd, pxc, pyc, mu, R, s, theta, eta, tau, o, pc,
                 s_l, d_at, d_rt, dnx, dny, dnz, row, K):
    """Accumulate gradients of one composited hit into ``row``.

    Row layout: mu(3) | R row-major(9) | s(K) | theta(K) | eta | tau | o |
    pc(2) | sh (filled by the caller).
    """
    nx = R[j, 0, 2]
    ny = R[j, 1, 2]
    nz = R[j, 2, 2]
    denom = rd[0] * nx + rd[1] * ny + rd[2] * nz
    mx = mu[j, 0] - ro[0]
    my = mu[j, 1] - ro[1]
    mz = mu[j, 2] - ro[2]
    rt = (mx * nx + my * ny + mz * nz) / denom
    dx = rt * rd[0] - mx
    dy = rt * rd[1] - my
    dz = rt * rd[2] - mz
    ax = R[j, 0, 0]
    ay = R[j, 1, 0]
    az = R[j, 2, 0]
    bx = R[j, 0, 1]
    by = R[j, 1, 1]
    bz = R[j, 2, 1]
    u = ax * dx + ay * dy + az * dz
    v = bx * dx + by * dy + bz * dz
    g, hi, gclamp, status = kernel_eval(u, v, s[j], theta[j], eta[j])
    ps, br = psi(g, tau[j])
    a = o[j] * ps
    cosv = abs(denom)
    sgn = 1.0 if denom >= 0.0 else -1.0
    ex = pxc - pc[j, 0]
    ey = pyc - pc[j, 1]
    E = lowpass_exponent(ex, ey, cosv, s_l)
    lclamp = E < EXP_FLOOR
    if lclamp:
        E = EXP_FLOOR
    eE = math.exp(E)
    f = o[j] * eE
    lp = f > a
    at = f if lp else a
    if at > ALPHA_MAX:
        at = ALPHA_MAX
        d_at = 0.0

    io_ = 12 + 2 * K
    du = 0.0
    dv = 0.0
    d_denom = 0.0
    if lp:
        row[io_ + 2] += d_at * eE
        if not lclamp:
            dEl = d_at * f
            q = 1.0 / (cosv * cosv * s_l * s_l)
            d_denom += dEl * (ex * ex + ey * ey) * q / cosv * sgn
            row[io_ + 3] += dEl * ex * q
            row[io_ + 4] += dEl * ey * q
    else:
        row[io_ + 2] += d_at * ps
        dps = d_at * o[j]
        dpg, dpt = psi_grad(g, tau[j])
        row[io_ + 1] += dps * dpt
        dgv = dps * dpg
        if dgv != 0.0:
            du, dv, de = kernel_bwd(u, v, s[j], theta[j], eta[j], dgv,
                                    row[12:12 + K], row[12 + K:12 + 2 * K])
            row[io_] += de

    # u = a.d, v = b.d with d = ro + rt rd - mu, rt = (mu - ro).n / denom
    ddx = du * ax + dv * bx
    ddy = du * ay + dv * by
    ddz = du * az + dv * bz
    row[3 + 0] += du * dx
    row[3 + 3] += du * dy
    row[3 + 6] += du * dz
    row[3 + 1] += dv * dx
    row[3 + 4] += dv * dy
    row[3 + 7] += dv * dz
    drt = d_rt + ddx * rd[0] + ddy * rd[1] + ddz * rd[2]
    row[0] += -ddx + drt * nx / denom
    row[1] += -ddy + drt * ny / denom
    row[2] += -ddz + drt * nz / denom
    gnx = -drt * dx / denom + d_denom * rd[0] - sgn * dnx
    gny = -drt * dy / denom + d_denom * rd[1] - sgn * dny
    gnz = -drt * dz / denom + d_denom * rd[2] - sgn * dnz
    row[3 + 2] += gnx
    row[3 + 5] += gny
    row[3 + 8] += gnz
    return at


@njit(cache=True)
def hit_geometry(j, ro, rd, mu, R):
    """(r_t, u, v, denom) without visibility tests."""
    nx = R[j, 0, 2]
    ny = R[j, 1, 2]
    nz = R[j, 2, 2]
    denom = rd[0] * nx + rd[1] * ny + rd[2] * nz
    mx = mu[j, 0] - ro[0]
    my = mu[j, 1] - ro[1]
    mz = mu[j, 2] - ro[2]
    rt = (mx * nx + my * ny + mz * nz) / denom
    dx = rt * rd[0] - mx
    dy = rt * rd[1] - my
    dz = rt * rd[2] - mz
    u = R[j, 0, 0] * dx + R[j, 1, 0] * dy + R[j, 2, 0] * dz
    v = R[j, 0, 1] * dx + R[j, 1, 1] * dy + R[j, 2, 1] * dz
    return rt, u, v, denom


@njit(cache=True)
def pixel_dir(px, py, fx, fy, cx, cy, c2w, out):
    x = (px - cx) / fx
    y = (py - cy) / fy
    n = math.sqrt(x * x + y * y + 1.0)
    x /= n
    y /= n
    z = 1.0 / n
    for r in range(3):
        out[r] = c2w[r, 0] * x + c2w[r, 1] * y + c2w[r, 2] * z


def empty_row(K, n_sh):
    return np.zeros(12 + 2 * K + 5 + 3 * n_sh)
