"""Reverse-mode gradients of a recorded render, plus a finite-difference
checker that masks discrete branch changes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import _jit
from .errors import ReplayMismatch
from .geometry import Camera
from .kernel import (KernelConfig, DrkPrimitive, PrimitiveSet, RawDrkParams, TAU_HI, TAU_LO,
                     activate, sigmoid)
from .raster import FrameBuffers, render


@dataclass
class ParamGrads:
    """Gradients with respect to the raw parameters (same layout as
    :class:`RawDrkParams`) plus densification statistics for this view."""

    center: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    angle: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    screen_grad: np.ndarray
    touch_count: np.ndarray

    FIELDS = RawDrkParams.FIELDS

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    @staticmethod
    def zeros_like(raw: RawDrkParams) -> "ParamGrads":
        n = len(raw)
        return ParamGrads(**{k: np.zeros_like(v) for k, v in raw.arrays().items()},
                          screen_grad=np.zeros(n), touch_count=np.zeros(n, dtype=np.int64))

    def __iadd__(self, other: "ParamGrads"):
        for k in self.FIELDS + ("screen_grad", "touch_count"):
            getattr(self, k).__iadd__(getattr(other, k))
        return self


# --------------------------------------------------------------------------
# single-kernel alpha


def backward_alpha(u: float, v: float, prim: DrkPrimitive, d_alpha: float = 1.0) -> dict:
    """Analytic partials of alpha = o * Psi(g(u, v)) scaled by ``d_alpha``."""
    g, _, _, status = _jit.kernel_eval(float(u), float(v), prim.s, prim.theta, float(prim.eta))
    ps, _ = _jit.psi(g, prim.tau)
    dpg, dpt = _jit.psi_grad(g, prim.tau)
    ds = np.zeros(prim.K)
    dth = np.zeros(prim.K)
    du, dv, deta = _jit.kernel_bwd(float(u), float(v), prim.s, prim.theta, float(prim.eta),
                                   d_alpha * prim.o * dpg, ds, dth)
    return {"s": ds, "theta": dth, "eta": deta, "tau": d_alpha * prim.o * dpt,
            "o": d_alpha * ps, "u": du, "v": dv}


# --------------------------------------------------------------------------
# full render


@njit(parallel=True, cache=True)
def _backward_tiles(tiles_x, tiles_y, W, H, ts, offs, prim_of,
                    mu, R, s, theta, eta, tau, o, pc, sh, deg,
                    fx, fy, cx, cy, c2w, ro, bg, s_l, geps,
                    rec_off, rec_n, rec_entry, rec_at, rec_code,
                    dC, dD, dN, dA, K, rows, mismatch):
    nc_act = (deg + 1) * (deg + 1)
    io_sh = 12 + 2 * K + 5
    for t in prange(tiles_x * tiles_y):
        tx = t % tiles_x
        ty = t // tiles_x
        rd = np.empty(3)
        basis = np.zeros(16)
        rgb = np.empty(3)
        qbuf = np.empty(max(offs[t + 1] - offs[t], 1))
        for py in range(ty * ts, min((ty + 1) * ts, H)):
            for px in range(tx * ts, min((tx + 1) * ts, W)):
                pix = py * W + px
                m = rec_n[pix]
                if m == 0:
                    continue
                base = rec_off[pix]
                pxc = px + 0.5
                pyc = py + 0.5
                _jit.pixel_dir(pxc, pyc, fx, fy, cx, cy, c2w, rd)
                _jit.sh_basis(rd[0], rd[1], rd[2], deg, basis)
                dc0 = dC[py, px, 0]
                dc1 = dC[py, px, 1]
                dc2 = dC[py, px, 2]
                dd = dD[py, px]
                dn0 = dN[py, px, 0]
                dn1 = dN[py, px, 1]
                dn2 = dN[py, px, 2]
                da = dA[py, px]
                # pass 1: replay and total weighted contribution
                T = 1.0
                Q = 0.0
                for i in range(m):
                    e = rec_entry[base + i]
                    j = prim_of[e]
                    ok, rt, at, den, code = _jit.hit_forward(
                        j, ro, rd, pxc, pyc, mu, R, s, theta, eta, tau, o, pc, s_l, geps)
                    if not ok or at != rec_at[base + i] or code != rec_code[base + i]:
                        mismatch[t] = 1
                    _jit.sh_color(sh[j], basis, deg, rgb)
                    sg = 1.0 if den >= 0.0 else -1.0
                    q = (dc0 * rgb[0] + dc1 * rgb[1] + dc2 * rgb[2] + dd * rt
                         - sg * (dn0 * R[j, 0, 2] + dn1 * R[j, 1, 2] + dn2 * R[j, 2, 2]))
                    qbuf[i] = q
                    Q += T * at * q
                    T *= 1.0 - at
                Tf = T
                tail = (da - (dc0 * bg[0] + dc1 * bg[1] + dc2 * bg[2])) * Tf
                # pass 2: front to back with running prefix
                T = 1.0
                S = 0.0
                for i in range(m):
                    e = rec_entry[base + i]
                    j = prim_of[e]
                    at = rec_at[base + i]
                    q = qbuf[i]
                    w = T * at
                    S += w * q
                    d_at = T * q - (Q - S) / (1.0 - at) + tail / (1.0 - at)
                    row = rows[e]
                    _jit.hit_backward(j, ro, rd, pxc, pyc, mu, R, s, theta, eta, tau, o, pc,
                                      s_l, d_at, w * dd, w * dn0, w * dn1, w * dn2, row, K)
                    dcs = (dc0, dc1, dc2)
                    for ch in range(3):
                        raw = 0.5
                        for k in range(nc_act):
                            raw += basis[k] * sh[j, k, ch]
                        if raw > 0.0:
                            g = w * dcs[ch]
                            for k in range(nc_act):
                                row[io_sh + 3 * k + ch] += g * basis[k]
                    T *= 1.0 - at


def quat_backward(q_raw, dR):
    """Chain dL/dR (N,3,3) through R(q/|q|) to dL/dq_raw (N,4)."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=1)
    q = q_raw / norm[:, None]
    w, x, y, z = q.T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
              - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
              - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
              + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
              - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm[:, None]


def angle_backward(angle_raw, theta, dtheta):
    a = np.asarray(angle_raw, dtype=np.float64)
    K = a.shape[1]
    sig = sigmoid(a)
    steps = sig + 1.0 / (K - 2)
    total = steps.sum(axis=1, keepdims=True)
    suffix = np.cumsum(dtheta[:, ::-1], axis=1)[:, ::-1]
    mean_term = np.sum(dtheta * theta, axis=1, keepdims=True) / (2 * math.pi)
    return sig * (1 - sig) * (2 * math.pi / total) * (suffix - mean_term)


def backward_render(frame_grad, frame: FrameBuffers, raw: RawDrkParams, cam: Camera,
                    cfg: KernelConfig | None = None, prims: PrimitiveSet | None = None,
                    return_activated: bool = False):
    """Gradients of a scalar loss with respect to ``raw`` given
    ``frame_grad = dL/d(color[, depth[, alpha[, normal]]])``.

    ``frame`` must come from ``render(..., record=True)`` of the same
    parameters and camera.
    """
    rec = frame.record
    if rec is None:
        raise ValueError("frame was rendered without record=True")
    cfg = cfg or KernelConfig(K=raw.K)
    prims = prims if prims is not None else activate(raw)
    H, W = cam.height, cam.width
    if isinstance(frame_grad, np.ndarray):
        frame_grad = {"color": frame_grad}
    dC = np.asarray(frame_grad.get("color", np.zeros((H, W, 3))), dtype=np.float64)
    dD = np.asarray(frame_grad.get("depth", np.zeros((H, W))), dtype=np.float64)
    dA = np.asarray(frame_grad.get("alpha", np.zeros((H, W))), dtype=np.float64)
    dN = np.asarray(frame_grad.get("normal", np.zeros((H, W, 3))), dtype=np.float64)
    if dC.shape != (H, W, 3) or dD.shape != (H, W) or dA.shape != (H, W) or dN.shape != (H, W, 3):
        raise ValueError("frame gradient shape does not match the camera")

    N, K = len(raw), raw.K
    n_sh = raw.sh.shape[1]
    binning = rec.binning
    L = 12 + 2 * K + 5 + 3 * n_sh
    rows = np.zeros((binning.n_entries, L))
    mismatch = np.zeros(binning.n_tiles, dtype=np.int64)
    if N:
        _backward_tiles(binning.tiles_x, binning.tiles_y, W, H, binning.tile_size,
                        binning.offsets, binning.prim_ids, prims.mu, prims.R, prims.s,
                        prims.theta, prims.eta, prims.tau, prims.o, rec.pc, prims.sh,
                        rec.sh_degree, cam.fx, cam.fy, cam.cx, cam.cy, cam.cam_to_world,
                        cam.center, frame.background, cfg.s_l, cfg.grazing_eps,
                        rec.offsets, rec.count, rec.entry, rec.alpha, rec.code,
                        dC, dD, dN, dA, K, rows, mismatch)
    if mismatch.any():
        raise ReplayMismatch(f"{int(mismatch.sum())} tile(s) disagree with the recorded blend order")

    acc = np.zeros((N, L))
    np.add.at(acc, binning.prim_ids, rows)
    d_mu = acc[:, 0:3].copy()
    d_R = acc[:, 3:12].reshape(N, 3, 3)
    d_s = acc[:, 12:12 + K]
    d_th = acc[:, 12 + K:12 + 2 * K]
    io_ = 12 + 2 * K
    d_eta, d_tau, d_o = acc[:, io_], acc[:, io_ + 1], acc[:, io_ + 2]
    d_pc = acc[:, io_ + 3:io_ + 5]
    d_sh = acc[:, io_ + 5:].reshape(N, n_sh, 3)

    # projected centre -> world centre
    pcam = prims.mu @ cam.rotation.T + cam.translation
    z = pcam[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    jt = np.stack([cam.fx / zs * d_pc[:, 0], cam.fy / zs * d_pc[:, 1],
                   -(cam.fx * pcam[:, 0] * d_pc[:, 0] + cam.fy * pcam[:, 1] * d_pc[:, 1]) / zs ** 2],
                  axis=1)
    jt[~front] = 0.0
    d_mu += jt @ cam.rotation

    # densification signal: world gradient expressed as an NDC-space shift
    gcam = d_mu @ cam.rotation.T
    screen = np.stack([gcam[:, 0] * zs / cam.fx * W / 2, gcam[:, 1] * zs / cam.fy * H / 2], axis=1)
    touched = np.zeros(N, dtype=np.int64)
    hits = rec.entry[rec.slab_index()]
    touched[np.unique(binning.prim_ids[hits])] = 1
    screen_norm = np.where(front & (touched > 0), np.linalg.norm(screen, axis=1), 0.0)

    tau_sig = (prims.tau - TAU_LO) / (TAU_HI - TAU_LO)
    grads = ParamGrads(
        center=d_mu,
        quat=quat_backward(raw.quat, d_R),
        scale=d_s * prims.s,
        angle=angle_backward(raw.angle, prims.theta, d_th),
        eta=d_eta * prims.eta * (1 - prims.eta),
        tau=d_tau * (TAU_HI - TAU_LO) * tau_sig * (1 - tau_sig),
        opacity=d_o * prims.o * (1 - prims.o),
        sh=d_sh,
        screen_grad=screen_norm,
        touch_count=touched,
    )
    if return_activated:
        act = {"mu": d_mu, "R": d_R, "s": d_s, "theta": d_th, "eta": d_eta, "tau": d_tau,
               "o": d_o, "pc": d_pc, "sh": d_sh}
        return grads, act
    return grads


# --------------------------------------------------------------------------
# finite-difference oracle

PARAM_CLASSES = ("center", "quat", "scale", "angle", "eta", "tau", "opacity", "sh")


def _signature(frame: FrameBuffers):
    rec = frame.record
    ids = rec.binning.prim_ids
    parts = []
    for a, c in zip(rec.offsets, rec.count):
        parts.append((int(c), tuple(ids[rec.entry[a:a + c]].tolist()),
                      tuple(rec.code[a:a + c].tolist())))
    return parts


def _linear_loss(frame, weights):
    return float(np.sum(weights["color"] * frame.color) + np.sum(weights["alpha"] * frame.alpha)
                 + np.sum(weights["depth"] * frame.depth))


def finite_diff_check(raw: RawDrkParams, cam: Camera, seed: int = 0, cfg: KernelConfig | None = None,
                      h: float = 1e-5, background=(0.3, 0.5, 0.7), depth_weight: float = 0.0,
                      grad_scale=1.0, rel_floor: float = 1e-4) -> dict:
    """Compare analytic raw-parameter gradients of a random linear image
    functional against central differences.

    Returns ``{class: max relative error}`` plus ``"checked"`` and
    ``"masked"`` counts. Scalars whose perturbation changes any pixel's
    blend list or branch state are masked; primitives with no visible hit
    are excluded. ``grad_scale`` multiplies individual analytic classes
    (used for mutation testing).
    """
    rng = np.random.default_rng(seed)
    cfg = cfg or KernelConfig(K=raw.K)
    H, W = cam.height, cam.width
    weights = {"color": rng.normal(size=(H, W, 3)), "alpha": rng.normal(size=(H, W)),
               "depth": depth_weight * rng.normal(size=(H, W))}

    def run(r):
        return render(activate(r), cam, cfg, background=background, record=True)

    base = run(raw)
    grads = backward_render(weights, base, raw, cam, cfg)
    if isinstance(grad_scale, dict):
        for k, f in grad_scale.items():
            setattr(grads, k, getattr(grads, k) * f)
    sig0 = _signature(base)
    visible = grads.touch_count > 0

    scale = max(max(np.abs(getattr(grads, k)).max(initial=0.0) for k in PARAM_CLASSES), 1e-12)
    report = {k: 0.0 for k in PARAM_CLASSES}
    checked = masked = 0
    for name in PARAM_CLASSES:
        arr = getattr(raw, name)
        g = getattr(grads, name)
        for idx in np.ndindex(arr.shape):
            if not visible[idx[0]]:
                continue
            plus, minus = raw.copy(), raw.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            fp, fm = run(plus), run(minus)
            if _signature(fp) != sig0 or _signature(fm) != sig0:
                masked += 1
                continue
            num = (_linear_loss(fp, weights) - _linear_loss(fm, weights)) / (2 * h)
            ana = g[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), rel_floor * scale)
            report[name] = max(report[name], err)
            checked += 1
    report["checked"] = checked
    report["masked"] = masked
    return report
