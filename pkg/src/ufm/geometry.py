"""Homographies, epipolar geometry and invertible transform chains.

Coordinate convention shared by every module: pixel centres sit on
integer coordinates, origin top-left, x to the right, y downward. An
image of width w covers x in [-0.5, w - 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError", "OUT_OF_FRAME", "Step", "TransformChain", "apply_homography",
    "apply_homography_many", "normalize_h", "fundamental_from_poses",
    "epipolar_distance", "estimate_homography_ransac", "corner_error", "skew",
]


class GeometryError(ValueError):
    pass


class _OutOfFrame:
    __slots__ = ()

    def __repr__(self):
        return "OutOfFrame"

    def __bool__(self):
        return False


OUT_OF_FRAME = _OutOfFrame()


# --------------------------------------------------------------- homographies

def normalize_h(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(H)) < 1e-12:
        raise GeometryError("homography is singular")
    return H / H[2, 2] if H[2, 2] != 0 else H.copy()


def apply_homography_many(H, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    q = np.c_[pts, np.ones(len(pts))] @ np.asarray(H, dtype=np.float64).T
    w = q[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("point maps to infinity")
    return q[:, :2] / w[:, None]


def apply_homography(H, p) -> tuple[float, float]:
    x, y = apply_homography_many(H, [p])[0]
    return float(x), float(y)


def corner_error(H_est, H_gt, width: int, height: int) -> float:
    """Mean distance between the four image corners mapped by both homographies."""
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], float)
    a = apply_homography_many(H_est, corners)
    b = apply_homography_many(H_gt, corners)
    return float(np.linalg.norm(a - b, axis=1).mean())


# ------------------------------------------------------------ transform chain

_STEP_ARITY = {"mirror-h": 1, "mirror-v": 1, "rot90": 3, "rotate": 3, "crop": 4, "scale": 1}


@dataclass(frozen=True)
class Step:
    """One invertible step. Parameters carry the extents the step needs.

    mirror-h W          x -> W-1-x
    mirror-v H          y -> H-1-y
    rot90 k W H         k quarter turns clockwise (on screen): (x, y) -> (H-1-y, x)
    rotate deg W H      continuous rotation about the image centre, same extents
    crop x0 y0 w h      x -> x - x0, y -> y - y0
    scale s             x -> s*x
    """

    name: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.name not in _STEP_ARITY:
            raise GeometryError(f"unknown transform step '{self.name}'")
        if len(self.params) != _STEP_ARITY[self.name]:
            raise GeometryError(f"step '{self.name}' takes {_STEP_ARITY[self.name]} parameters")
        if self.name == "scale" and self.params[0] <= 0:
            raise GeometryError("scale must be positive")

    def out_size(self, size: tuple[int, int]) -> tuple[int, int]:
        w, h = size
        if self.name == "rot90":
            return (h, w) if int(self.params[0]) % 2 else (w, h)
        if self.name == "crop":
            return int(self.params[2]), int(self.params[3])
        if self.name == "scale":
            s = self.params[0]
            return int(round(w * s)), int(round(h * s))
        return w, h

    def matrix(self) -> np.ndarray:
        n, p = self.name, self.params
        if n == "mirror-h":
            return np.array([[-1, 0, p[0] - 1], [0, 1, 0], [0, 0, 1]], float)
        if n == "mirror-v":
            return np.array([[1, 0, 0], [0, -1, p[0] - 1], [0, 0, 1]], float)
        if n == "rot90":
            k, w, h = int(p[0]) % 4, int(p[1]), int(p[2])
            m = np.eye(3)
            for _ in range(k):
                quarter = np.array([[0, -1, h - 1], [1, 0, 0], [0, 0, 1]], float)
                m = quarter @ m
                w, h = h, w
            return m
        if n == "rotate":
            t = np.deg2rad(p[0])
            cx, cy = (p[1] - 1) / 2.0, (p[2] - 1) / 2.0
            c, s = np.cos(t), np.sin(t)
            return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
        if n == "crop":
            return np.array([[1, 0, -p[0]], [0, 1, -p[1]], [0, 0, 1]], float)
        return np.array([[p[0], 0, 0], [0, p[0], 0], [0, 0, 1]], float)

    def serialize(self) -> str:
        return " ".join([self.name] + [_fmt(v) for v in self.params])


def _fmt(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


@dataclass
class TransformChain:
    """Ordered steps mapping source-image coordinates to the transformed image."""

    steps: list[Step] = field(default_factory=list)
    source_size: tuple[int, int] | None = None  # (w, h) of the input image

    def __len__(self):
        return len(self.steps)

    def then(self, name: str, *params: float) -> "TransformChain":
        return TransformChain(self.steps + [Step(name, tuple(float(v) for v in params))], self.source_size)

    def compose(self, other: "TransformChain") -> "TransformChain":
        return TransformChain(self.steps + other.steps, self.source_size)

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        for st in self.steps:
            m = st.matrix() @ m
        return m

    def output_size(self, size: tuple[int, int] | None = None) -> tuple[int, int] | None:
        size = size or self.source_size
        if size is None:
            crops = [st for st in self.steps if st.name == "crop"]
            return None if not crops else (int(crops[-1].params[2]), int(crops[-1].params[3]))
        for st in self.steps:
            size = st.out_size(size)
        return size

    def map_points(self, pts, direction: str = "forward") -> np.ndarray:
        """Map an (n, 2) array; rows leaving the destination frame become NaN."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if direction == "forward":
            m, frame = self.matrix(), self.output_size()
        elif direction == "inverse":
            m, frame = np.linalg.inv(self.matrix()), self.source_size
        else:
            raise ValueError(f"direction must be forward or inverse, got {direction!r}")
        out = pts @ m[:2, :2].T + m[:2, 2]
        if frame is not None:
            w, h = frame
            bad = (out[:, 0] < -0.5) | (out[:, 0] >= w - 0.5) | (out[:, 1] < -0.5) | (out[:, 1] >= h - 0.5)
            out[bad] = np.nan
        return out

    def map(self, p, direction: str = "forward"):
        q = self.map_points([p], direction)[0]
        if np.isnan(q).any():
            return OUT_OF_FRAME
        return float(q[0]), float(q[1])

    def serialize(self) -> str:
        lines = [st.serialize() for st in self.steps]
        if self.source_size is not None:
            lines.insert(0, f"source {self.source_size[0]} {self.source_size[1]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "TransformChain":
        steps, size = [], None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, *vals = line.split()
            if name == "source":
                size = (int(vals[0]), int(vals[1]))
                continue
            try:
                params = tuple(float(v) for v in vals)
            except ValueError:
                raise GeometryError(f"bad transform step line: {raw!r}") from None
            steps.append(Step(name, params))
        return cls(steps, size)


def chain_map(chain: TransformChain, p, direction: str = "forward"):
    return chain.map(p, direction)


# ------------------------------------------------------------------ epipolar

def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=np.float64).reshape(3)
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])


def fundamental_from_poses(K1, K2, R, t) -> np.ndarray:
    """F = K2^-T [t]x R K1^-1, rank-2 truncated and scaled to unit Frobenius norm.

    Camera 2 maps a camera-1 point X to R X + t.
    """
    R = np.asarray(R, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if np.linalg.norm(t) <= 0:
        raise GeometryError("zero baseline: translation must be non-zero")
    if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
        raise GeometryError("rotation is not orthonormal")
    F = np.linalg.inv(K2).T @ skew(t) @ R @ np.linalg.inv(K1)
    U, s, Vt = np.linalg.svd(F)
    s[2] = 0.0
    F = U @ np.diag(s) @ Vt
    return F / np.linalg.norm(F)


def epipolar_distance(F, p1, p2) -> np.ndarray | float:
    """Distance from p2 to the epipolar line F @ [p1, 1]. Vectorized over rows."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    single = p1.ndim == 1
    p1, p2 = p1.reshape(-1, 2), p2.reshape(-1, 2)
    lines = np.c_[p1, np.ones(len(p1))] @ np.asarray(F, dtype=np.float64).T
    norm = np.hypot(lines[:, 0], lines[:, 1])
    if np.any((np.abs(lines[:, 0]) < 1e-12) & (np.abs(lines[:, 1]) < 1e-12)):
        raise GeometryError("degenerate epipolar line")
    d = np.abs(lines[:, 0] * p2[:, 0] + lines[:, 1] * p2[:, 1] + lines[:, 2]) / norm
    return float(d[0]) if single else d


# -------------------------------------------------------------------- RANSAC

def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])


def dlt_homography(src, dst) -> np.ndarray | None:
    """Normalized DLT fit; None for rank-deficient systems."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    T1, T2 = _normalizer(src), _normalizer(dst)
    a = np.c_[src, np.ones(len(src))] @ T1.T
    b = np.c_[dst, np.ones(len(dst))] @ T2.T
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = a
    A[0::2, 6:9] = -b[:, [0]] * a
    A[1::2, 3:6] = a
    A[1::2, 6:9] = -b[:, [1]] * a
    _, s, Vt = np.linalg.svd(A)
    if n == 4 and s[7] < 1e-10 * s[0]:
        return None
    H = np.linalg.inv(T2) @ Vt[-1].reshape(3, 3) @ T1
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12:
        return None
    return H / H[2, 2]


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-6) -> bool:
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u, v = pts[j] - pts[i], pts[k] - pts[i]
        if 0.5 * abs(u[0] * v[1] - u[1] * v[0]) < tol:
            return True
    return False


def symmetric_transfer_error(H, src, dst) -> np.ndarray:
    with np.errstate(all="ignore"):
        fwd = np.c_[src, np.ones(len(src))] @ H.T
        bwd = np.c_[dst, np.ones(len(dst))] @ np.linalg.inv(H).T
        e1 = np.linalg.norm(fwd[:, :2] / fwd[:, 2:] - dst, axis=1)
        e2 = np.linalg.norm(bwd[:, :2] / bwd[:, 2:] - src, axis=1)
    err = e1 + e2
    return np.where(np.isfinite(err), err, np.inf)


def estimate_homography_ransac(src, dst, iters: int = 2000, inlier_thresh: float = 3.0,
                               seed: int | np.random.Generator = 0,
                               confidence: float = 0.999) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC over 4-point normalized-DLT fits, refit on all inliers.

    ``iters`` caps the sample count; sampling stops early once the best inlier ratio w gives
    1 - (1 - w^4)^k >= ``confidence`` (set confidence=1 for the full budget).
    Returns (H, inlier_mask). Deterministic for a fixed seed and input order.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise GeometryError("source and destination point counts differ")
    if len(src) < 4:
        raise GeometryError(f"need at least 4 matches, got {len(src)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = len(src)
    best_inl, best_count, best_err = None, -1, np.inf
    need = iters
    k = 0
    while k < min(iters, need):
        k += 1
        idx = rng.choice(n, 4, replace=False)
        if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
            continue
        H = dlt_homography(src[idx], dst[idx])
        if H is None:
            continue
        err = symmetric_transfer_error(H, src, dst)
        inl = err < inlier_thresh
        count = int(inl.sum())
        tot = float(np.minimum(err, inlier_thresh).sum())
        if count > best_count or (count == best_count and tot < best_err):
            best_inl, best_count, best_err = inl, count, tot
            if count == n:
                break
            w4 = (count / n) ** 4
            if confidence < 1 and w4 > 0:
                need = int(np.ceil(np.log1p(-confidence) / np.log1p(-min(w4, 1 - 1e-12))))
    if best_inl is None or best_count < 4:
        raise GeometryError("all RANSAC samples degenerate")
    H = None
    for _ in range(3):
        H_ref = dlt_homography(src[best_inl], dst[best_inl])
        if H_ref is None:
            break
        H = H_ref
        inl = symmetric_transfer_error(H, src, dst) < inlier_thresh
        if inl.sum() < 4 or np.array_equal(inl, best_inl):
            break
        best_inl = inl
    if H is None:
        raise GeometryError("all RANSAC samples degenerate")
    return H, best_inl


def homography_from_matches(matches: Iterable[Sequence[float]], **kw) -> np.ndarray:
    m = np.asarray(list(matches), dtype=np.float64)
    return estimate_homography_ransac(m[:, 0:2], m[:, 2:4], **kw)[0]
