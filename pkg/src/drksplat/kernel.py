"""Deformable radial kernel: parameter records, activation and the
scalar kernel math (density, sharpening, low-pass, culling radius)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _jit
from .errors import DegenerateBasis, DegenerateQuaternion, GrazingView, NonFinite

TWO_PI = 2.0 * math.pi
TAU_LO, TAU_HI = -0.1, 0.99
THREE_SIGMA_LEVEL = math.exp(-9.0)
RAW_CLIP = 13.8  # logit(1 - 1e-6)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-300, 1.0)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


@dataclass
class KernelConfig:
    K: int = 8
    s_l: float = 0.5
    alpha_min: float = 1.0 / 255.0
    grazing_eps: float = 1e-6

    def __post_init__(self):
        if self.s_l <= 0:
            raise ValueError("s_l must be positive")
        if not 0 < self.alpha_min < 1:
            raise ValueError("alpha_min must lie in (0, 1)")
        if self.K < 3:
            raise ValueError("K must be at least 3")


@dataclass
class RawDrkParams:
    """Unconstrained learnable parameters for a set of N primitives.

    Every field carries a leading primitive axis. ``sh`` has shape
    ``(N, (degree+1)**2, 3)``.
    """

    center: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    angle: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    FIELDS = ("center", "quat", "scale", "angle", "eta", "tau", "opacity", "sh")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def __len__(self):
        return self.center.shape[0]

    @property
    def K(self) -> int:
        return self.scale.shape[1]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def copy(self) -> "RawDrkParams":
        return RawDrkParams(**{k: v.copy() for k, v in self.arrays().items()})

    def take(self, idx) -> "RawDrkParams":
        return RawDrkParams(**{k: v[idx] for k, v in self.arrays().items()})

    @staticmethod
    def concat(parts) -> "RawDrkParams":
        parts = list(parts)
        return RawDrkParams(**{
            name: np.concatenate([getattr(p, name) for p in parts], axis=0)
            for name in RawDrkParams.FIELDS})

    @staticmethod
    def empty(K=8, sh_degree=0) -> "RawDrkParams":
        nc = (sh_degree + 1) ** 2
        return RawDrkParams(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, K)),
                            np.zeros((0, K)), np.zeros(0), np.zeros(0), np.zeros(0),
                            np.zeros((0, nc, 3)))

    def quantized(self) -> "RawDrkParams":
        """Round-trip every value through float32 (the on-disk precision)."""
        return RawDrkParams(**{k: v.astype(np.float32).astype(np.float64)
                               for k, v in self.arrays().items()})

    def check_finite(self):
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"raw parameter '{name}' contains NaN/Inf")


@dataclass(frozen=True)
class DrkPrimitive:
    """One activated kernel."""

    mu: np.ndarray
    R: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    eta: float
    tau: float
    o: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    @property
    def K(self) -> int:
        return len(self.s)

    def endpoints(self) -> np.ndarray:
        """Radial endpoints e_k in tangent-plane coordinates, shape (K, 2)."""
        return self.s[:, None] * np.stack([np.cos(self.theta), np.sin(self.theta)], axis=1)


@dataclass
class PrimitiveSet:
    """Activated parameters for N kernels, laid out for the rasterizer."""

    mu: np.ndarray
    R: np.ndarray
    s: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    tau: np.ndarray
    o: np.ndarray
    sh: np.ndarray

    def __len__(self):
        return self.mu.shape[0]

    @property
    def K(self) -> int:
        return self.s.shape[1]

    def __getitem__(self, i) -> DrkPrimitive:
        return DrkPrimitive(self.mu[i].copy(), self.R[i].copy(), self.s[i].copy(),
                            self.theta[i].copy(), float(self.eta[i]), float(self.tau[i]),
                            float(self.o[i]), self.sh[i].copy())

    def with_sh(self, sh) -> "PrimitiveSet":
        return replace(self, sh=np.asarray(sh, dtype=np.float64))

    @staticmethod
    def from_primitives(prims) -> "PrimitiveSet":
        prims = list(prims)
        if not prims:
            raise ValueError("need at least one primitive")
        nc = max(p.sh.shape[0] for p in prims)
        sh = np.zeros((len(prims), nc, 3))
        for i, p in enumerate(prims):
            sh[i, :p.sh.shape[0]] = p.sh
        return PrimitiveSet(
            np.array([p.mu for p in prims], dtype=np.float64),
            np.array([p.R for p in prims], dtype=np.float64),
            np.array([p.s for p in prims], dtype=np.float64),
            np.array([p.theta for p in prims], dtype=np.float64),
            np.array([p.eta for p in prims], dtype=np.float64),
            np.array([p.tau for p in prims], dtype=np.float64),
            np.array([p.o for p in prims], dtype=np.float64),
            sh)


# --------------------------------------------------------------------------
# activation


def quat_to_rotation_batch(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateQuaternion("quaternion norm below 1e-12")
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quat_batch(R):
    """Inverse of :func:`quat_to_rotation_batch` (w >= 0 hemisphere)."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    cand = np.stack([
        1 + tr,
        1 + R[:, 0, 0] - R[:, 1, 1] - R[:, 2, 2],
        1 - R[:, 0, 0] + R[:, 1, 1] - R[:, 2, 2],
        1 - R[:, 0, 0] - R[:, 1, 1] + R[:, 2, 2],
    ], axis=1)
    pick = np.argmax(cand, axis=1)
    q = np.empty((R.shape[0], 4))
    for k in range(4):
        m = pick == k
        if not np.any(m):
            continue
        r = R[m]
        t = np.sqrt(np.maximum(cand[m, k], 1e-300)) * 2.0  # = 4 * |component k|
        if k == 0:
            q[m] = np.stack([t / 4, (r[:, 2, 1] - r[:, 1, 2]) / t,
                             (r[:, 0, 2] - r[:, 2, 0]) / t, (r[:, 1, 0] - r[:, 0, 1]) / t], 1)
        elif k == 1:
            q[m] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / t, t / 4,
                             (r[:, 0, 1] + r[:, 1, 0]) / t, (r[:, 0, 2] + r[:, 2, 0]) / t], 1)
        elif k == 2:
            q[m] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / t, (r[:, 0, 1] + r[:, 1, 0]) / t,
                             t / 4, (r[:, 1, 2] + r[:, 2, 1]) / t], 1)
        else:
            q[m] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / t, (r[:, 0, 2] + r[:, 2, 0]) / t,
                             (r[:, 1, 2] + r[:, 2, 1]) / t, t / 4], 1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q


def angle_activation(angle_raw):
    """Map unconstrained angle raws (..., K) to strictly increasing polar
    angles ending exactly at 2*pi, with every gap below pi."""
    a = np.asarray(angle_raw, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFinite("angle raw contains NaN/Inf")
    K = a.shape[-1]
    if K < 3:
        raise ValueError("K must be at least 3")
    steps = sigmoid(a) + 1.0 / (K - 2)
    c = np.cumsum(steps, axis=-1)
    theta = TWO_PI * c / c[..., -1:]
    theta[..., -1] = TWO_PI
    return theta


def angle_deactivation(theta):
    """Raw angles reproducing ``theta`` (up to the representable gap ratio).

    Consecutive gaps whose ratio reaches K-1 cannot be expressed by the step
    activation. Such rows get the raw vector whose angles deviate least (in
    max abs angle) over a sweep of step scales; the returned flag is False
    for them.
    """
    theta = np.asarray(theta, dtype=np.float64)
    K = theta.shape[-1]
    r = 1.0 / (K - 2)
    gaps = np.diff(theta, axis=-1, prepend=0.0) / TWO_PI
    gmin = gaps.min(axis=-1, keepdims=True)
    gmax = gaps.max(axis=-1, keepdims=True)
    lo = r / gmin
    hi = (1.0 + r) / gmax
    exact = (lo < hi)[..., 0]
    p = np.clip(0.5 * (lo + hi) * gaps - r, 1e-6, 1 - 1e-6)
    raw = logit(p)
    bad = np.flatnonzero(~exact.reshape(-1))
    if bad.size:
        flat_raw = raw.reshape(-1, K)
        g = gaps.reshape(-1, K)[bad]
        th = theta.reshape(-1, K)[bad]
        best = np.full(bad.size, np.inf)
        for c in np.linspace(r / 2, 2.0, 256) * K:
            cand = logit(np.clip(c * g - r, 1e-6, 1 - 1e-6))
            err = np.abs(angle_activation(cand) - th).max(axis=-1)
            take = err < best
            best[take] = err[take]
            flat_raw[bad[take]] = cand[take]
        raw = flat_raw.reshape(theta.shape)
    return raw, exact


def tau_activation(raw):
    # the clip only absorbs rounding when the sigmoid saturates
    return np.clip(TAU_LO + (TAU_HI - TAU_LO) * sigmoid(raw), TAU_LO, TAU_HI)


def tau_deactivation(tau):
    return logit((np.asarray(tau, dtype=np.float64) - TAU_LO) / (TAU_HI - TAU_LO))


def activate(raw: RawDrkParams) -> PrimitiveSet:
    """Apply the activation functions to a set of raw parameters."""
    raw.check_finite()
    if raw.K < 3:
        raise ValueError("K must be at least 3")
    return PrimitiveSet(
        mu=raw.center.copy(),
        R=quat_to_rotation_batch(raw.quat),
        s=np.exp(raw.scale),
        theta=angle_activation(raw.angle),
        eta=sigmoid(raw.eta),
        tau=tau_activation(raw.tau),
        o=sigmoid(raw.opacity),
        sh=raw.sh.copy(),
    )


def deactivate(prims: PrimitiveSet) -> RawDrkParams:
    """Raw parameters whose activation reproduces ``prims`` (values at the
    open-interval limits are clipped to a finite raw)."""
    angle, _ = angle_deactivation(prims.theta)
    clip = lambda x: np.clip(x, -RAW_CLIP, RAW_CLIP)  # noqa: E731
    return RawDrkParams(
        center=prims.mu.copy(),
        quat=rotation_to_quat_batch(prims.R),
        scale=np.log(prims.s),
        angle=angle,
        eta=clip(logit(prims.eta)),
        tau=clip(tau_deactivation(prims.tau)),
        opacity=clip(logit(prims.o)),
        sh=prims.sh.copy(),
    )


# --------------------------------------------------------------------------
# scalar kernel API


def eval_kernel(u: float, v: float, prim: DrkPrimitive) -> float:
    """Kernel density g(u, v) in (0, 1] (exactly 1 at the center)."""
    g, _, _, status = _jit.kernel_eval(float(u), float(v), prim.s, prim.theta, float(prim.eta))
    if status == _jit.DEGENERATE:
        raise DegenerateBasis("adjacent radial endpoints are collinear with the center")
    return g


def sharpen(g: float, tau: float) -> float:
    return _jit.psi(float(g), float(tau))[0]


def sharpen_inverse(y: float, tau: float) -> float:
    return _jit.psi_inv(float(y), float(tau))


def alpha(u: float, v: float, prim: DrkPrimitive) -> float:
    return prim.o * sharpen(eval_kernel(u, v, prim), prim.tau)


def low_pass(alpha_value, dp_w, dp_h, cos_view, o, cfg: KernelConfig) -> float:
    """Screen-space low-pass floor: max(alpha, o * filter)."""
    if cos_view < cfg.grazing_eps:
        raise GrazingView(f"|r_d . R_z| = {cos_view:g} below grazing threshold")
    E = max(_jit.lowpass_exponent(dp_w, dp_h, cos_view, cfg.s_l), _jit.EXP_FLOOR)
    return max(alpha_value, o * math.exp(E))


def calibrated_radii(prim: DrkPrimitive, level: float = THREE_SIGMA_LEVEL):
    """s_k^c = s_k * sqrt(-log Psi^-1(level / o)); None if never visible."""
    y = level / prim.o
    if y >= 1.0:
        return None
    g = sharpen_inverse(y, prim.tau)
    return prim.s * math.sqrt(-math.log(g))


def calibrated_endpoints(prim: DrkPrimitive, cfg: KernelConfig | None = None):
    """World-space polygon vertices v_k, shape (K, 3); None when the
    primitive can never reach the 3-sigma visibility level."""
    sc = calibrated_radii(prim)
    if sc is None:
        return None
    dirs = np.cos(prim.theta)[:, None] * prim.R[:, 0] + np.sin(prim.theta)[:, None] * prim.R[:, 1]
    return prim.mu + sc[:, None] * dirs


def gaussian_special_case(s_u, s_v, mu=None, R=None, o=1.0, sh=None) -> DrkPrimitive:
    """K=4 kernel reproducing a 2D Gaussian with axis scales (s_u, s_v)."""
    if s_u <= 0 or s_v <= 0:
        raise ValueError("scales must be positive")
    theta = np.array([0.5, 1.0, 1.5, 2.0]) * math.pi
    # bases at pi/2 and 3pi/2 lie on the v axis, pi and 2pi on the u axis
    s = np.array([s_v, s_u, s_v, s_u], dtype=np.float64)
    return DrkPrimitive(
        mu=np.zeros(3) if mu is None else np.asarray(mu, dtype=np.float64),
        R=np.eye(3) if R is None else np.asarray(R, dtype=np.float64),
        s=s, theta=theta, eta=0.0, tau=0.0, o=float(o),
        sh=np.zeros((1, 3)) if sh is None else np.asarray(sh, dtype=np.float64))


def raw_fields():
    return [f.name for f in fields(RawDrkParams)]
