"""Training objectives: coarse BCE, epipolar, cycle consistency, variance-weighted fine, total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .matching import FINE_STRIDE, SIGMA2_FLOOR, soft_expectation
from .numerics import Tensor

BCE_EPS = 1e-7
_NORM_EPS = 1e-20  # keeps sqrt differentiable at an exact zero


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 1.0
    n_q: int = 512
    coarse_norm: str = "entries"  # or "points"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_q < 1:
            raise ValueError("n_q must be >= 1")
        if self.coarse_norm not in ("entries", "points"):
            raise ValueError(f"unknown coarse_norm '{self.coarse_norm}'")


def loss_coarse(P, GT, eps: float = BCE_EPS, norm: str = "entries") -> Tensor:
    P = nx.as_tensor(P)
    gt = np.asarray(GT.matrix if hasattr(GT, "matrix") else GT, dtype=P.dtype)
    if gt.shape != P.shape:
        raise nx.ShapeError(f"loss_coarse: P {P.shape} vs GT {gt.shape}")
    pc = nx.clampmax(nx.clampmin(P, eps), 1.0 - eps)
    bce = nx.neg(gt * nx.log(pc) + (1.0 - gt) * nx.log(1.0 - pc))
    if norm == "entries":
        return nx.mean(bce)
    if norm == "points":
        return nx.scale(nx.sum(bce), 1.0 / max(1.0, float(gt.sum())))
    raise ValueError(f"unknown coarse normalizer '{norm}'")


def _norm2(d: Tensor) -> Tensor:
    return nx.sqrt(nx.sum(d * d, axis=-1) + _NORM_EPS)


def epipolar_lines(F, queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    return np.c_[q, np.ones(len(q))] @ np.asarray(F, dtype=np.float64).T


def loss_epipolar(h12, queries, F, tol: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Per-query point-to-line distance. Returns (distances of valid queries, validity mask)."""
    h12 = nx.as_tensor(h12)
    lines = epipolar_lines(F, queries)
    nrm = np.hypot(lines[:, 0], lines[:, 1])
    valid = (np.abs(lines[:, 0]) >= tol) | (np.abs(lines[:, 1]) >= tol)
    idx = np.nonzero(valid)[0]
    ln = (lines[idx] / nrm[idx, None]).astype(h12.dtype)
    pts = nx.gather(h12, idx, axis=0)
    r = nx.sum(pts * ln[:, :2], axis=1) + ln[:, 2]
    return nx.abs(r), valid


def loss_reprojection(h12, targets) -> Tensor:
    """Stand-in for the epipolar term when the pair has no valid F ("ep-surrogate")."""
    h12 = nx.as_tensor(h12)
    return _norm2(h12 - np.asarray(targets, dtype=h12.dtype))


def forward_expectation(fine_a: Tensor, fine_b: Tensor, queries_full) -> tuple[Tensor, Tensor]:
    """h_{1->2} for full-resolution query points; returns (mean full px, total variance full px²)."""
    s = FINE_STRIDE
    h, w, c = fine_a.shape
    q = np.asarray(queries_full, dtype=np.float64).reshape(-1, 2)
    qx = np.clip(np.round(q[:, 0] / s).astype(int), 0, w - 1)
    qy = np.clip(np.round(q[:, 1] / s).astype(int), 0, h - 1)
    feats = nx.gather(nx.reshape(fine_a, (h * w, c)), qy * w + qx, axis=0)
    mean, var, _ = soft_expectation(feats, fine_b)
    return nx.scale(mean, s), nx.scale(nx.sum(var, axis=1), s * s)


def backward_field(fine_b: Tensor, fine_a: Tensor, pts_full: Tensor) -> Tensor:
    """h_{2->1} evaluated at sub-pixel points of I_b by bilinear interpolation of the
    backward expectation at the four surrounding fine-grid positions."""
    s = FINE_STRIDE
    h, w, c = fine_b.shape
    x = nx.scale(nx.gather(pts_full, 0, axis=1), 1.0 / s)
    y = nx.scale(nx.gather(pts_full, 1, axis=1), 1.0 / s)
    x0 = np.clip(np.floor(x.data), 0, w - 2).astype(int)
    y0 = np.clip(np.floor(y.data), 0, h - 2).astype(int)
    fx = x - x0.astype(x.dtype)
    fy = y - y0.astype(y.dtype)
    flat = nx.reshape(fine_b, (h * w, c))
    corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
    idx = np.concatenate([cy * w + cx for cx, cy in corners])
    mean, _, _ = soft_expectation(nx.gather(flat, idx, axis=0), fine_a)
    n = len(x0)
    m = [nx.gather(mean, np.arange(k * n, (k + 1) * n), axis=0) for k in range(4)]
    gx, gy = 1.0 - fx, 1.0 - fy
    wts = [gx * gy, fx * gy, gx * fy, fx * fy]
    out = m[0] * nx.reshape(wts[0], (n, 1))
    for k in range(1, 4):
        out = out + m[k] * nx.reshape(wts[k], (n, 1))
    return nx.scale(out, s)


def loss_cycle(h12, queries, fine_a: Tensor, fine_b: Tensor) -> Tensor:
    """Per-query ||h_{2->1}(h_{1->2}(i)) - i|| in full-resolution px."""
    h21 = backward_field(fine_b, fine_a, nx.as_tensor(h12))
    return _norm2(h21 - np.asarray(queries, dtype=h21.dtype))


def loss_fine(sigma2, l_ep, l_cy, lam: float = 1.0) -> Tensor:
    """sum_m (L_ep + lam L_cy) / sigma2; sigma2 is a constant weight."""
    s2 = np.asarray(sigma2.data if isinstance(sigma2, Tensor) else sigma2, dtype=np.float64).reshape(-1)
    if s2.size == 0:
        raise ValueError("loss_fine: empty query set")
    s2 = np.maximum(s2, SIGMA2_FLOOR)
    l_ep, l_cy = nx.as_tensor(l_ep), nx.as_tensor(l_cy)
    inner = l_ep + nx.scale(l_cy, lam)
    return nx.sum(inner * (1.0 / s2).astype(inner.dtype))


def loss_total(lc, lf, alpha: float = 1.0, beta: float = 0.5) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return nx.scale(nx.as_tensor(lc), alpha) + nx.scale(nx.as_tensor(lf), beta)
