"""Image fitting: photometric loss, Adam, learning-rate schedules and
adaptive density control."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import DimensionMismatch
from .geometry import Camera, rgb_to_sh_dc
from .grad import ParamGrads, backward_render
from .kernel import KernelConfig, RawDrkParams, activate, logit, tau_deactivation
from .raster import render

log = logging.getLogger(__name__)

DENSITY_PRESETS = {
    "default": (5e-4, 5e-2),
    "s1": (1e-3, 5e-2),
    "s2": (2e-3, 1e-1),
}
DRK_FIELDS = ("scale", "angle", "eta", "tau")
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window


# --------------------------------------------------------------------------
# metrics and loss


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _window(x):
    sig = (SSIM_SIGMA, SSIM_SIGMA) + (0,) * (x.ndim - 2)
    return gaussian_filter(x, sig, mode="constant", truncate=SSIM_RADIUS / SSIM_SIGMA)


def psnr(a, b) -> float:
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return -10.0 * math.log10(mse)


def ssim(a, b, return_grad: bool = False):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5, zero padded).

    With ``return_grad`` also returns dSSIM/da.
    """
    x, y = _check_same(a, b)
    mx, my = _window(x), _window(y)
    pxx, pyy, pxy = _window(x * x), _window(y * y), _window(x * y)
    vx, vy, cxy = pxx - mx * mx, pyy - my * my, pxy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not return_grad:
        return value
    n = S.size
    d_mx = S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2)
    d_pxx = -S / B2
    d_pxy = 2 * S / A2
    grad = (_window(d_mx) + 2 * x * _window(d_pxx) + y * _window(d_pxy)) / n
    return value, grad


def loss(rendered, target, dssim_weight: float = 0.2):
    """(1-w) * L1 + w * (1 - SSIM); returns (value, dL/d rendered)."""
    img = rendered.color if hasattr(rendered, "color") else rendered
    x, y = _check_same(img, target)
    diff = x - y
    l1 = float(np.abs(diff).mean())
    g = (1 - dssim_weight) * np.sign(diff) / diff.size
    value = (1 - dssim_weight) * l1
    if dssim_weight > 0:
        s, ds = ssim(x, y, return_grad=True)
        value += dssim_weight * (1 - s)
        g = g - dssim_weight * ds
    return value, g


# --------------------------------------------------------------------------
# optimiser


@dataclass
class TrainConfig:
    steps: int = 35000
    lr_drk: float = 5e-3
    lr_drk_final: float = 5e-5
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    densify_grad_threshold: float = 5e-4
    prune_opacity_threshold: float = 5e-2
    densify_interval: int = 100
    densify_start_step: int = 500
    densify_stop_step: int = 15000
    percent_dense: float = 0.01
    max_primitives: int = 100000
    dssim_weight: float = 0.2
    sh_degree_warmup_interval: int = 1000
    max_sh_degree: int = 3
    background: tuple = (0.0, 0.0, 0.0)
    scene_extent: float | None = None
    log_interval: int = 100
    seed: int = 0
    frozen: tuple = ()
    tie_opposite_scales: bool = False

    def __post_init__(self):
        if self.densify_grad_threshold <= 0 or self.prune_opacity_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 <= self.dssim_weight <= 1:
            raise ValueError("dssim_weight must lie in [0, 1]")

    @staticmethod
    def with_density(preset: str, **kw) -> "TrainConfig":
        if preset not in DENSITY_PRESETS:
            raise ValueError(f"unknown density preset '{preset}'")
        g, o = DENSITY_PRESETS[preset]
        return TrainConfig(densify_grad_threshold=g, prune_opacity_threshold=o, **kw)


def exp_decay(step, total, start, end):
    """Log-linear interpolation from ``start`` to ``end`` over ``total`` steps."""
    if total <= 0:
        return end
    t = min(max(step / total, 0.0), 1.0)
    return math.exp((1 - t) * math.log(start) + t * math.log(end))


def learning_rates(cfg: TrainConfig, step: int, extent: float = 1.0) -> dict:
    drk = exp_decay(step, cfg.steps, cfg.lr_drk, cfg.lr_drk_final)
    return {
        "center": exp_decay(step, cfg.steps, cfg.lr_position, cfg.lr_position_final) * extent,
        "quat": cfg.lr_rotation,
        "scale": drk, "angle": drk, "eta": drk, "tau": drk,
        "opacity": cfg.lr_opacity,
        "sh": cfg.lr_sh,
    }


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @staticmethod
    def for_params(raw: RawDrkParams) -> "OptState":
        return OptState({k: np.zeros_like(a) for k, a in raw.arrays().items()},
                        {k: np.zeros_like(a) for k, a in raw.arrays().items()})

    def __len__(self):
        return self.m["center"].shape[0]

    def take(self, idx):
        self.m = {k: a[idx] for k, a in self.m.items()}
        self.v = {k: a[idx] for k, a in self.v.items()}

    def append_zeros(self, n):
        for d in (self.m, self.v):
            for k, a in d.items():
                d[k] = np.concatenate([a, np.zeros((n,) + a.shape[1:])], axis=0)


def adam_step(raw: RawDrkParams, grads, state: OptState, lrs: dict, frozen=()) -> RawDrkParams:
    """In-place Adam update; ``lrs`` maps field name to learning rate."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name in RawDrkParams.FIELDS:
        if name in frozen:
            continue
        g = getattr(grads, name) if not isinstance(grads, dict) else grads[name]
        if g.shape != getattr(raw, name).shape:
            raise DimensionMismatch(f"gradient for '{name}' has shape {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lrs[name] * (m / c1) / (np.sqrt(v / c2) + state.eps)
        getattr(raw, name)[...] -= step
    return raw


# --------------------------------------------------------------------------
# density control


@dataclass
class GradStats:
    accum: np.ndarray
    count: np.ndarray

    @staticmethod
    def zeros(n):
        return GradStats(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, grads: ParamGrads):
        self.accum += grads.screen_grad
        self.count += grads.touch_count

    def mean(self):
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyInfo:
    cloned: int = 0
    split: int = 0
    pruned: int = 0

    @property
    def added(self):
        return self.cloned + self.split


def longest_basis_directions(raw: RawDrkParams, prims=None):
    prims = prims if prims is not None else activate(raw)
    k = np.argmax(prims.s, axis=1)
    idx = np.arange(len(raw))
    th = prims.theta[idx, k]
    smax = prims.s[idx, k]
    d = np.cos(th)[:, None] * prims.R[:, :, 0] + np.sin(th)[:, None] * prims.R[:, :, 1]
    return d, smax


def densify_and_prune(raw: RawDrkParams, stats: GradStats, state: OptState | None,
                      cfg: TrainConfig, extent: float, allow_densify: bool = True):
    """Clone small / split large high-gradient primitives, then prune
    transparent ones. Returns (new raw, info); ``state`` rows are kept in
    step with the primitives."""
    n0 = len(raw)
    info = DensifyInfo()
    prims = activate(raw)
    parts = [raw]
    if allow_densify and n0:
        grad = stats.mean()
        hot = grad >= cfg.densify_grad_threshold
        room = max(cfg.max_primitives - n0, 0)
        if hot.sum() > room:
            # keep the strongest candidates
            order = np.argsort(-grad, kind="stable")[:room]
            keep = np.zeros(n0, dtype=bool)
            keep[order] = True
            hot &= keep
        small = prims.s.max(axis=1) <= cfg.percent_dense * extent
        clone = np.flatnonzero(hot & small)
        split = np.flatnonzero(hot & ~small)
        if len(clone):
            parts.append(raw.take(clone))
        if len(split):
            d, smax = longest_basis_directions(raw, prims)
            off = 0.25 * (smax[split, None] * d[split])
            child_a = raw.take(split)
            child_b = raw.take(split)
            child_a.scale -= math.log(2.0)
            child_b.scale -= math.log(2.0)
            child_a.center += off
            child_b.center -= off
            # first child replaces the parent in place, second is appended
            raw = raw.copy()
            for name in RawDrkParams.FIELDS:
                getattr(raw, name)[split] = getattr(child_a, name)
            parts = [raw] + parts[1:] + [child_b]
        info.cloned, info.split = len(clone), len(split)
        new = RawDrkParams.concat(parts)
        if state is not None:
            state.append_zeros(len(new) - n0)
            for d_ in (state.m, state.v):
                for k in d_:
                    d_[k][split] = 0.0
        raw = new
    o = 1 / (1 + np.exp(-raw.opacity))
    keep = o >= cfg.prune_opacity_threshold
    info.pruned = int((~keep).sum())
    if info.pruned:
        raw = raw.take(keep)
        if state is not None:
            state.take(keep)
    return raw, info


# --------------------------------------------------------------------------
# initialisation


def init_random(n, lo, hi, rng, K=8, sh_degree=3, opacity=0.1, quat=None, knn=3):
    """Random points in a box with uniform angles, kNN scales and low opacity."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    pts = rng.uniform(lo, hi, size=(n, 3))
    if n > 1:
        k = min(knn, n - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        d = np.maximum(dist[:, 1:].mean(axis=1), 1e-6)
    else:
        d = np.full(n, max(np.linalg.norm(hi - lo) / 4, 1e-3))
    nc = (sh_degree + 1) ** 2
    q = np.tile([1.0, 0, 0, 0], (n, 1)) if quat is None else np.tile(quat, (n, 1))
    return RawDrkParams(
        center=pts, quat=q, scale=np.repeat(np.log(d)[:, None], K, axis=1),
        angle=np.zeros((n, K)), eta=np.zeros(n), tau=np.full(n, float(tau_deactivation(0.0))),
        opacity=np.full(n, float(logit(opacity))), sh=np.zeros((n, nc, 3)))


def gaussian_baseline(raw: RawDrkParams) -> RawDrkParams:
    """K=4 Gaussian-equivalent copy of ``raw``: uniform quarter angles,
    eta ~ 0, tau = 0, opposite scales equal."""
    n = len(raw)
    s = raw.scale.mean(axis=1)
    return RawDrkParams(
        center=raw.center.copy(), quat=raw.quat.copy(),
        scale=np.repeat(s[:, None], 4, axis=1), angle=np.zeros((n, 4)),
        eta=np.full(n, -30.0), tau=np.full(n, float(tau_deactivation(0.0))),
        opacity=raw.opacity.copy(), sh=raw.sh.copy())


GAUSSIAN_FROZEN = ("angle", "eta", "tau")


def colour_from_targets(raw: RawDrkParams, views, sh_band=0):
    """Set DC colour of each primitive from the first view it projects into."""
    raw = raw.copy()
    for img, cam in views:
        pc = raw.center @ cam.rotation.T + cam.translation
        z = pc[:, 2]
        ok = z > 0
        px = np.where(ok, cam.fx * pc[:, 0] / np.where(ok, z, 1) + cam.cx, -1)
        py = np.where(ok, cam.fy * pc[:, 1] / np.where(ok, z, 1) + cam.cy, -1)
        inside = ok & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        ix = np.clip(px.astype(int), 0, cam.width - 1)
        iy = np.clip(py.astype(int), 0, cam.height - 1)
        raw.sh[inside, 0] = rgb_to_sh_dc(img[iy[inside], ix[inside]])
    return raw


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, loss, psnr, count)
    final_psnr: float = float("nan")

    def as_csv(self) -> str:
        lines = ["step,loss,psnr,count"]
        for s, l, p, c in self.rows:
            lines.append(f"{s},{l:.8g},{'' if p is None else f'{p:.6f}'},{c}")
        return "\n".join(lines) + "\n"


def scene_extent(views, raw: RawDrkParams) -> float:
    centres = np.array([cam.center for _, cam in views])
    r_cam = 1.1 * np.linalg.norm(centres - centres.mean(axis=0), axis=1).max()
    if len(raw):
        r_pts = 0.5 * np.linalg.norm(raw.center.max(axis=0) - raw.center.min(axis=0))
    else:
        r_pts = 0.0
    return max(r_cam, r_pts, 1e-6)


def evaluate_psnr(raw, views, kcfg, cfg, sh_degree=None):
    prims = activate(raw)
    vals = []
    for img, cam in views:
        fb = render(prims, cam, kcfg, background=cfg.background, sh_degree=sh_degree)
        vals.append(psnr(fb.color, img))
    return float(np.mean(vals))


def train(views, raw: RawDrkParams, cfg: TrainConfig, kcfg: KernelConfig | None = None,
          callback=None):
    """Fit ``raw`` to posed images ``views = [(image HxWx3, Camera), ...]``.

    Returns (fitted raw params, TrainLog). Final parameters are rounded to
    float32 so that a saved scene reproduces the reported PSNR.
    """
    if not views:
        raise ValueError("need at least one posed image")
    for img, cam in views:
        if img.shape != (cam.height, cam.width, 3):
            raise DimensionMismatch(f"image {img.shape} does not match camera {cam.width}x{cam.height}")
    raw = raw.copy()
    kcfg = kcfg or KernelConfig(K=raw.K)
    tlog = TrainLog()
    if cfg.steps <= 0:
        tlog.final_psnr = evaluate_psnr(raw, views, kcfg, cfg, _sh_degree(cfg, 0, raw))
        return raw, tlog
    rng = np.random.default_rng(cfg.seed)
    extent = cfg.scene_extent or scene_extent(views, raw)
    state = OptState.for_params(raw)
    stats = GradStats.zeros(len(raw))
    for step in range(1, cfg.steps + 1):
        deg = _sh_degree(cfg, step - 1, raw)
        img, cam = views[int(rng.integers(len(views)))] if len(views) > 1 else views[0]
        prims = activate(raw)
        frame = render(prims, cam, kcfg, background=cfg.background, sh_degree=deg, record=True)
        value, dimg = loss(frame, img, cfg.dssim_weight)
        grads = backward_render(dimg, frame, raw, cam, kcfg, prims=prims)
        if cfg.tie_opposite_scales and raw.K % 2 == 0:
            h = raw.K // 2
            avg = 0.5 * (grads.scale[:, :h] + grads.scale[:, h:])
            grads.scale = np.concatenate([avg, avg], axis=1)
        stats.add(grads)
        adam_step(raw, grads, state, learning_rates(cfg, step, extent), cfg.frozen)

        if step <= cfg.densify_stop_step and step >= cfg.densify_start_step \
                and step % cfg.densify_interval == 0:
            raw, info = densify_and_prune(raw, stats, state, cfg, extent)
            stats = GradStats.zeros(len(raw))
            log.debug("step %d: +%d clone +%d split -%d prune -> %d", step, info.cloned,
                      info.split, info.pruned, len(raw))
        p = psnr(frame.color, img) if step % cfg.log_interval == 0 or step == cfg.steps else None
        tlog.rows.append((step, value, p, len(raw)))
        if callback is not None:
            callback(step, value, raw)
    raw = raw.quantized()
    tlog.final_psnr = evaluate_psnr(raw, views, kcfg, cfg, _sh_degree(cfg, cfg.steps, raw))
    return raw, tlog


def _sh_degree(cfg: TrainConfig, step: int, raw: RawDrkParams) -> int:
    stored = raw.sh_degree
    if cfg.sh_degree_warmup_interval <= 0:
        return min(cfg.max_sh_degree, stored)
    return min(step // cfg.sh_degree_warmup_interval, cfg.max_sh_degree, stored)
