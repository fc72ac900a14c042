"""Figures written next to CSV reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(p, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return p


def plot_curve(thresholds, values, path, title: str = "MMA", ylabel: str = "accuracy") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(thresholds), list(values), marker="o")
    ax.set_xlabel("threshold (px)")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, max(1.0, float(np.max(values)) * 1.05) if len(values) else 1.0)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_bars(labels: Sequence[str], values: Sequence[float], path, title: str = "", ylabel: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(3.5, 0.6 * len(labels) + 1.5), 3.2))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save(fig, path)


def plot_error_cdf(errors, path, max_px: float = 10.0, title: str = "corner error") -> Path:
    e = np.sort(np.asarray(errors, dtype=np.float64))
    e = e[np.isfinite(e)]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if e.size:
        n_all = len(np.asarray(errors).reshape(-1))
        ax.step(np.r_[0, e], np.r_[0, np.arange(1, e.size + 1) / n_all], where="post")
    ax.set_xlim(0, max_px)
    ax.set_ylim(0, 1)
    ax.set_xlabel("error (px)")
    ax.set_ylabel("fraction")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_matches(img_a, img_b, pa, pb, path, inlier=None, max_lines: int = 200) -> Path:
    a, b = np.asarray(img_a), np.asarray(img_b)
    h, w = a.shape
    canvas = np.zeros((max(h, b.shape[0]), w + b.shape[1]), dtype=np.float64)
    canvas[:h, :w] = a
    canvas[:b.shape[0], w:] = b
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.imshow(canvas, cmap="gray")
    pa, pb = np.asarray(pa).reshape(-1, 2)[:max_lines], np.asarray(pb).reshape(-1, 2)[:max_lines]
    ok = np.ones(len(pa), bool) if inlier is None else np.asarray(inlier, bool)[:max_lines]
    for (xa, ya), (xb, yb), good in zip(pa, pb, ok):
        ax.plot([xa, xb + w], [ya, yb], lw=0.6, color="lime" if good else "red")
    ax.set_axis_off()
    return _save(fig, path)


def plot_losses(rows: Sequence[dict], path, title: str = "training") -> Path:
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for key in ("loss_c", "loss_f", "total"):
        ax.plot(steps, [r[key] for r in rows], label=key, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend()
    ax.set_title(title)
    return _save(fig, path)
