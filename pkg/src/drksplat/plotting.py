"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

DPI = 120


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)


def training_curves(rows, path, title=None):
    """Loss, PSNR and primitive count against step from ``(step, loss, psnr, count)`` rows."""
    rows = list(rows)
    step = np.array([r[0] for r in rows])
    fig = Figure(figsize=(9, 3))
    ax_l, ax_p, ax_n = fig.subplots(1, 3)
    ax_l.plot(step, [r[1] for r in rows], lw=1)
    ax_l.set_yscale("log")
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    logged = [(s, p) for s, _, p, _ in rows if p is not None]
    if logged:
        ax_p.plot(*zip(*logged), marker=".", lw=1)
    ax_p.set_xlabel("step")
    ax_p.set_ylabel("PSNR (dB)")
    ax_n.plot(step, [r[3] for r in rows], lw=1, color="tab:green")
    ax_n.set_xlabel("step")
    ax_n.set_ylabel("primitives")
    if title:
        fig.suptitle(title)
    _save(fig, path)


def sorting_table(table, path):
    """Grouped bars for an ``{mode: (accuracy, tau, mae)}`` table."""
    modes = list(table)
    vals = np.array([table[m] for m in modes], dtype=np.float64)
    fig = Figure(figsize=(8, 3))
    for ax, col, name in zip(fig.subplots(1, 3), range(3), ("accuracy", "Kendall tau", "MAE")):
        ax.bar(range(len(modes)), vals[:, col], color="tab:blue")
        ax.set_xticks(range(len(modes)), modes, rotation=30, ha="right", fontsize=8)
        ax.set_title(name, fontsize=10)
    _save(fig, path)


def metric_bars(names, psnrs, ssims, path):
    fig = Figure(figsize=(max(4, 0.5 * len(names) + 2), 3))
    ax1, ax2 = fig.subplots(1, 2)
    x = np.arange(len(names))
    ax1.bar(x, psnrs)
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(x, ssims, color="tab:orange")
    ax2.set_ylabel("SSIM")
    for ax in (ax1, ax2):
        ax.set_xticks(x, names, rotation=45, ha="right", fontsize=7)
    _save(fig, path)


def depth_to_rgb(depth, alpha=None):
    """Colour-mapped depth; pixels with no coverage become black."""
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.isfinite(depth) & (depth > 0)
    if alpha is not None:
        mask &= np.asarray(alpha) > 1e-3
    out = np.zeros(depth.shape + (3,))
    if mask.any():
        lo, hi = depth[mask].min(), depth[mask].max()
        t = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
        out[mask] = colormaps["viridis"](np.clip(t[mask], 0, 1))[:, :3]
    return out


def normal_to_rgb(normal):
    return np.clip(0.5 * (np.asarray(normal) + 1.0), 0.0, 1.0)
