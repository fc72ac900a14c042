"""Coarse dual-softmax matching and sub-pixel refinement by soft expectation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .augment import PatchGrid
from .synthdata import DataFormatError, image_to_input

TAU = 0.1
THETA = 0.2
SIGMA2_FLOOR = 1e-6
FINE_STRIDE = 2  # full-resolution px per fine-map px

MATCH_HEADER = "# ufm-matches v1"


@dataclass
class MatchSet:
    xa: np.ndarray
    ya: np.ndarray
    xb: np.ndarray
    yb: np.ndarray
    score: np.ndarray
    sigma2: np.ndarray  # NaN where unknown
    ia: np.ndarray | None = None  # patch indices for coarse matches
    ib: np.ndarray | None = None

    @classmethod
    def empty(cls) -> "MatchSet":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, np.zeros(0, int), np.zeros(0, int))

    @classmethod
    def from_arrays(cls, pa, pb, score=None, sigma2=None, ia=None, ib=None) -> "MatchSet":
        pa = np.asarray(pa, dtype=np.float64).reshape(-1, 2)
        pb = np.asarray(pb, dtype=np.float64).reshape(-1, 2)
        n = len(pa)
        score = np.ones(n) if score is None else np.asarray(score, dtype=np.float64)
        sigma2 = np.full(n, np.nan) if sigma2 is None else np.asarray(sigma2, dtype=np.float64)
        return cls(pa[:, 0].copy(), pa[:, 1].copy(), pb[:, 0].copy(), pb[:, 1].copy(), score, sigma2,
                   None if ia is None else np.asarray(ia), None if ib is None else np.asarray(ib))

    def __len__(self):
        return len(self.xa)

    @property
    def pa(self) -> np.ndarray:
        return np.c_[self.xa, self.ya]

    @property
    def pb(self) -> np.ndarray:
        return np.c_[self.xb, self.yb]

    def sorted(self) -> "MatchSet":
        o = np.argsort(-self.score, kind="stable")
        pick = (lambda v: None if v is None else v[o])
        return MatchSet(self.xa[o], self.ya[o], self.xb[o], self.yb[o], self.score[o], self.sigma2[o],
                        pick(self.ia), pick(self.ib))

    def serialize(self) -> str:
        s = self.sorted()
        lines = [MATCH_HEADER]
        for r in zip(s.xa, s.ya, s.xb, s.yb, s.score, s.sigma2):
            lines.append(" ".join(f"{v:.6f}" for v in r))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.serialize())

    @classmethod
    def parse(cls, text: str) -> "MatchSet":
        lines = text.splitlines()
        if not lines or lines[0].strip() != MATCH_HEADER:
            raise DataFormatError("match file: missing header")
        rows = []
        for k, ln in enumerate(lines[1:], start=2):
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 6:
                raise DataFormatError(f"match file line {k}: expected 6 fields, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DataFormatError(f"match file line {k}: non-numeric field") from None
        if not rows:
            return cls.empty()
        a = np.array(rows)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], a[:, 5])

    @classmethod
    def read(cls, path) -> "MatchSet":
        return cls.parse(Path(path).read_text())


# ---------------------------------------------------------------------- coarse

def similarity(fa: Tensor, fb: Tensor) -> Tensor:
    """Scaled dot products of coarse tokens: (Na, d) x (Nb, d) -> (Na, Nb)."""
    return nx.scale(nx.matmul(fa, nx.transpose(fb)), 1.0 / fa.shape[-1])


def dual_softmax(S, tau: float = TAU, return_factors: bool = False):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    S = nx.as_tensor(S)
    if not np.isfinite(S.data).all():
        raise nx.NonFiniteError("dual_softmax")
    z = nx.scale(S, 1.0 / tau)
    row = nx.softmax(z, axis=1)  # over j
    col = nx.softmax(z, axis=0)  # over i
    P = row * col
    return (P, row, col) if return_factors else P


def mutual_argmax(P: np.ndarray) -> np.ndarray:
    """Boolean mask of entries that are both the row max and the column max."""
    P = np.asarray(P)
    if P.size == 0:
        return np.zeros(P.shape, bool)
    rmax = np.zeros(P.shape, bool)
    rmax[np.arange(P.shape[0]), P.argmax(axis=1)] = True
    cmax = np.zeros(P.shape, bool)
    cmax[P.argmax(axis=0), np.arange(P.shape[1])] = True
    return rmax & cmax


def extract_coarse_matches(P, theta: float = THETA, grid=None) -> MatchSet:
    """Mutual-argmax entries with P >= theta, reported at patch centres."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    keep = mutual_argmax(P) & (P >= theta)
    ia, ib = np.nonzero(keep)
    if grid is None:
        side = int(round(np.sqrt(P.shape[0])))
        grid = PatchGrid(side * 8, side * 8, 8)
    ca, cb = grid.centers()[ia], grid.centers()[ib]
    return MatchSet.from_arrays(ca, cb, P[ia, ib], None, ia, ib)


# ------------------------------------------------------------------------ fine

def _grid_coords(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.c_[xx.ravel(), yy.ravel()].astype(np.float64)


def soft_expectation(q: Tensor, M2: Tensor, coords: np.ndarray | None = None):
    """Batched expectation: q (n, c) against M2 (h, w, c) -> (mean (n,2), var (n,2), heat (n, h*w)).

    Coordinates are in fine-map px.
    """
    h, w, c = M2.shape
    flat = nx.reshape(M2, (h * w, c))
    logits = nx.matmul(q, nx.transpose(flat))
    heat = nx.softmax(logits, axis=1)
    xy = _grid_coords(h, w) if coords is None else coords
    xy = xy.astype(heat.dtype)
    mean = nx.matmul(heat, xy)
    var = nx.matmul(heat, xy * xy) - mean * mean
    return mean, var, heat


def expected_match(M1, M2, i) -> tuple[np.ndarray, float, np.ndarray]:
    """Eq-10 style expectation for one query pixel ``i`` = (x, y) of M1, in fine-map px."""
    M1, M2 = nx.as_tensor(M1), nx.as_tensor(M2)
    x, y = int(round(i[0])), int(round(i[1]))
    if not (0 <= x < M1.shape[1] and 0 <= y < M1.shape[0]):
        raise ValueError(f"query {i} outside feature map {M1.shape[:2]}")
    with nx.no_grad():
        q = nx.reshape(nx.gather(nx.gather(M1, y, axis=0), x, axis=0), (1, -1))
        mean, var, heat = soft_expectation(q, M2)
    s2 = max(float(var.data.sum()), SIGMA2_FLOOR)
    return mean.data[0].astype(np.float64), s2, heat.data[0].reshape(M2.shape[:2])


def expectation_from_logits(logits: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Expectation and total variance for explicit logits (-inf allowed) over explicit coordinates."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z[np.isfinite(z)].max()
    p = np.exp(z)
    p /= p.sum()
    mu = p @ coords
    var = p @ (coords ** 2) - mu ** 2
    return mu, max(float(var.sum()), SIGMA2_FLOOR), p


def refine_matches(coarse: MatchSet, fine_a, fine_b, window: int | None = None) -> MatchSet:
    """Replace each coarse b-side centre with the expected fine position (full-resolution px)."""
    if len(coarse) == 0:
        return MatchSet.empty()
    fa = np.asarray(fine_a.data if isinstance(fine_a, Tensor) else fine_a, dtype=np.float64)
    fb = np.asarray(fine_b.data if isinstance(fine_b, Tensor) else fine_b, dtype=np.float64)
    h, w, c = fb.shape
    s = FINE_STRIDE
    qx = np.clip(np.round(coarse.xa / s).astype(int), 0, fa.shape[1] - 1)
    qy = np.clip(np.round(coarse.ya / s).astype(int), 0, fa.shape[0] - 1)
    q = fa[qy, qx]
    coords = _grid_coords(h, w)
    logits = q @ fb.reshape(-1, c).T
    if window is not None:
        cx, cy = coarse.xb / s, coarse.yb / s
        out = (np.abs(coords[None, :, 0] - cx[:, None]) > window) | (np.abs(coords[None, :, 1] - cy[:, None]) > window)
        logits = np.where(out, -np.inf, logits)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    mu = p @ coords
    var = np.maximum((p @ coords ** 2 - mu ** 2).sum(axis=1), SIGMA2_FLOOR)
    return MatchSet(coarse.xa.copy(), coarse.ya.copy(), s * mu[:, 0], s * mu[:, 1], coarse.score.copy(),
                    s * s * var, coarse.ia, coarse.ib)


def match_pair(model, img_a, img_b, modalities=("OPT", "OPT"), tau: float = TAU, theta: float = THETA,
               window: int | None = None, grid=None) -> tuple[MatchSet, MatchSet]:
    """Full inference: (coarse matches, refined matches). uint8 images are standardized first."""
    img_a, img_b = (image_to_input(x) if np.asarray(x).dtype == np.uint8 else x for x in (img_a, img_b))
    with nx.no_grad():
        out = model.forward_pair(img_a, img_b, modalities)
        P = dual_softmax(similarity(out.coarse_a, out.coarse_b), tau)
    if grid is None:
        h, w = np.asarray(img_a).shape
        grid = PatchGrid(h, w, 8)
    coarse = extract_coarse_matches(P.data, theta, grid)
    return coarse, refine_matches(coarse, out.fine_a, out.fine_b, window)
