"""Geometric + intensity augmentation of registered pairs and the patch-level GT matrix."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import TransformChain
from .seeding import rng_for
from .synthdata import DataFormatError, Modality, Registered, ScenePair

__all__ = [
    "AugmentError", "PatchGrid", "AugmentConfig", "AugmentedPair", "GtMatrix",
    "augment_pair", "patch_center", "center_to_patch", "build_gt_matrix",
    "oracle_gt_matrix", "mask_bounds", "map_a_to_b", "boundary_distance",
    "gt_agreement", "with_chains", "render_chain",
]


class AugmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchGrid:
    h: int
    w: int
    p: int

    def __post_init__(self):
        if self.h % self.p or self.w % self.p:
            raise ValueError(f"patch size {self.p} must divide crop {self.h}x{self.w}")

    @property
    def cols(self) -> int:
        return self.w // self.p

    @property
    def rows(self) -> int:
        return self.h // self.p

    @property
    def N(self) -> int:
        return self.cols * self.rows

    def index(self, ip, jp):
        return jp * self.cols + ip

    def coords(self, idx):
        idx = np.asarray(idx)
        return idx % self.cols, idx // self.cols

    def centers(self) -> np.ndarray:
        ip, jp = self.coords(np.arange(self.N))
        return np.stack([ip * self.p + self.p / 2, jp * self.p + self.p / 2], axis=1).astype(np.float64)


def patch_center(ip: int, jp: int, p: int, grid: PatchGrid | None = None) -> tuple[float, float]:
    if ip < 0 or jp < 0 or (grid is not None and (ip >= grid.cols or jp >= grid.rows)):
        raise ValueError(f"patch ({ip}, {jp}) outside the grid")
    return ip * p + p / 2, jp * p + p / 2


def center_to_patch(ic, jc, p: int, plus_one: bool = True):
    """Patch coordinates of a point: floor((c + 1) / p), or floor(c / p) without the +1."""
    off = 1.0 if plus_one else 0.0
    ip = np.floor((np.asarray(ic, dtype=np.float64) + off) / p).astype(np.int64)
    jp = np.floor((np.asarray(jc, dtype=np.float64) + off) / p).astype(np.int64)
    if ip.ndim == 0:
        return int(ip), int(jp)
    return ip, jp


def mask_bounds(N: int) -> tuple[int, int]:
    return math.ceil(0.2 * N - 1e-9), math.floor(0.4 * N + 1e-9)


@dataclass
class AugmentConfig:
    crop_h: int = 64
    crop_w: int = 64
    patch: int = 8
    mirror: bool = True        # left-right mirror with probability 1/2
    flip: bool = True          # up-down flip with probability 1/2
    rot90: bool = True         # random quarter turn
    rotate_deg: float = 0.0    # continuous rotation drawn from [-rotate_deg, rotate_deg]
    crop: bool = True          # random crop offset (else top-left)
    noise: float = 8.0
    mask: bool = True
    min_overlap: float = 0.4
    max_retries: int = 50
    eq5_plus_one: bool = True

    def __post_init__(self):
        if not 0 <= self.noise <= 16:
            raise ValueError("noise amplitude must be within [0, 16] levels")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        base = dict(mirror=False, flip=False, rot90=False, rotate_deg=0.0, crop=False, noise=0.0)
        base.update(kw)
        return cls(**base)

    @property
    def geometric(self) -> bool:
        return self.mirror or self.flip or self.rot90 or self.rotate_deg > 0 or self.crop


@dataclass
class AugmentedPair:
    I_a: np.ndarray
    I_b: np.ndarray
    chain_a: TransformChain
    chain_b: TransformChain
    mask_a: np.ndarray
    mask_b: np.ndarray
    grid: PatchGrid
    geometry: object
    modality_a: Modality = Modality.OPT
    modality_b: Modality = Modality.OPT
    seed: int = 0
    eq5_plus_one: bool = True

    def affine_a_to_b(self) -> np.ndarray | None:
        """3x3 map from I_a to I_b pixels when the scene geometry is projective, else None."""
        H = np.eye(3)
        if hasattr(self.geometry, "H"):
            H = self.geometry.H
        elif not isinstance(self.geometry, Registered):
            return None
        M = self.chain_b.matrix() @ H @ np.linalg.inv(self.chain_a.matrix())
        return M / M[2, 2]


@dataclass
class GtMatrix:
    matrix: np.ndarray            # (N, N) uint8
    grid: PatchGrid
    mask_a: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    mask_b: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def N(self) -> int:
        return self.grid.N

    def pairs(self) -> np.ndarray:
        return np.argwhere(self.matrix == 1)

    def serialize(self) -> str:
        g = self.grid
        lines = ["# ufm-gt v1", f"{g.N} {g.h} {g.w} {g.p}",
                 "A: " + " ".join(str(int(i)) for i in sorted(self.mask_a)),
                 "B: " + " ".join(str(int(i)) for i in sorted(self.mask_b))]
        lines += [f"{i} {j}" for i, j in self.pairs()]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "GtMatrix":
        lines = text.splitlines()
        if len(lines) < 4 or lines[0].strip() != "# ufm-gt v1":
            raise DataFormatError("not a ufm-gt v1 file")
        try:
            n, h, w, p = (int(v) for v in lines[1].split())
            grid = PatchGrid(h, w, p)
            if grid.N != n:
                raise DataFormatError("GT header N does not match h, w, p")
            if not lines[2].startswith("A:") or not lines[3].startswith("B:"):
                raise DataFormatError("GT mask lines missing")
            ma = np.array([int(v) for v in lines[2][2:].split()], np.int64)
            mb = np.array([int(v) for v in lines[3][2:].split()], np.int64)
            m = np.zeros((n, n), np.uint8)
            for ln in lines[4:]:
                if ln.strip():
                    i, j = (int(v) for v in ln.split())
                    m[i, j] = 1
        except ValueError as exc:
            raise DataFormatError(f"malformed GT file: {exc}") from None
        return cls(m, grid, ma, mb)

    def write(self, path) -> None:
        Path(path).write_text(self.serialize())


# ------------------------------------------------------------- augmentation

def _random_chain(rng: np.random.Generator, size: tuple[int, int], cfg: AugmentConfig) -> TransformChain:
    W, H = size
    chain = TransformChain([], (W, H))
    if cfg.mirror and rng.random() < 0.5:
        chain = chain.then("mirror-h", W)
    if cfg.flip and rng.random() < 0.5:
        chain = chain.then("mirror-v", H)
    if cfg.rot90:
        k = int(rng.integers(4))
        if k:
            chain = chain.then("rot90", k, W, H)
            if k % 2:
                W, H = H, W
    if cfg.rotate_deg > 0:
        chain = chain.then("rotate", float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)), W, H)
    if W < cfg.crop_w or H < cfg.crop_h:
        raise AugmentError(f"source {W}x{H} smaller than crop {cfg.crop_w}x{cfg.crop_h}")
    if cfg.crop:
        x0, y0 = int(rng.integers(0, W - cfg.crop_w + 1)), int(rng.integers(0, H - cfg.crop_h + 1))
    else:
        x0 = y0 = 0
    return chain.then("crop", x0, y0, cfg.crop_w, cfg.crop_h)


def render_chain(img: np.ndarray, chain: TransformChain) -> np.ndarray:
    """Resample ``img`` into the chain's output frame (bilinear, zero outside)."""
    w, h = chain.output_size((img.shape[1], img.shape[0]))
    yy, xx = np.mgrid[0:h, 0:w]
    src = chain.map_points(np.c_[xx.ravel(), yy.ravel()], "inverse")
    src = np.nan_to_num(src, nan=-10.0)
    vals = ndimage.map_coordinates(img.astype(np.float64), [src[:, 1], src[:, 0]], order=1,
                                   mode="constant", cval=0.0, prefilter=False)
    return vals.reshape(h, w)


def map_a_to_b(pts, chain_a: TransformChain, geometry, chain_b: TransformChain) -> np.ndarray:
    """I_a pixel -> I_b pixel through chain_a^-1, scene geometry and chain_b; NaN when lost."""
    src = chain_a.map_points(pts, "inverse")
    ok = ~np.isnan(src).any(axis=1)
    out = np.full_like(src, np.nan)
    if ok.any():
        out[ok] = geometry.map_points(src[ok])
    ok = ~np.isnan(out).any(axis=1)
    res = np.full_like(out, np.nan)
    if ok.any():
        res[ok] = chain_b.map_points(out[ok], "forward")
    return res


def _overlap(chain_a, chain_b, geometry, cfg) -> float:
    ys, xs = np.mgrid[0:cfg.crop_h:2, 0:cfg.crop_w:2]
    pts = np.c_[xs.ravel(), ys.ravel()].astype(np.float64)
    return float((~np.isnan(map_a_to_b(pts, chain_a, geometry, chain_b)).any(axis=1)).mean())


def _draw_mask(rng: np.random.Generator, N: int) -> np.ndarray:
    lo, hi = mask_bounds(N)
    k = int(rng.integers(lo, hi + 1))
    return np.sort(rng.choice(N, k, replace=False)).astype(np.int64)


def _finish(img: np.ndarray, mask: np.ndarray, grid: PatchGrid, noise: float, rng) -> np.ndarray:
    out = img.copy()
    if noise > 0:
        out = out + rng.uniform(-noise, noise, size=out.shape)
    out = np.round(out).clip(0, 255)
    for idx in mask:
        ip, jp = grid.coords(idx)
        out[jp * grid.p:(jp + 1) * grid.p, ip * grid.p:(ip + 1) * grid.p] = 0
    return out.astype(np.uint8)


def augment_pair(pair: ScenePair, cfg: AugmentConfig | None = None, seed: int = 0) -> AugmentedPair:
    cfg = cfg or AugmentConfig()
    grid = PatchGrid(cfg.crop_h, cfg.crop_w, cfg.patch)
    rng = rng_for(seed, "augment")
    size_a = (pair.image_a.shape[1], pair.image_a.shape[0])
    size_b = (pair.image_b.shape[1], pair.image_b.shape[0])
    for _ in range(max(1, cfg.max_retries)):
        chain_a = _random_chain(rng, size_a, cfg)
        chain_b = _random_chain(rng, size_b, cfg)
        if _overlap(chain_a, chain_b, pair.geometry, cfg) >= cfg.min_overlap:
            break
    else:
        raise AugmentError(f"crop overlap >= {cfg.min_overlap} not reached in {cfg.max_retries} draws")
    mrng = rng_for(seed, "mask")
    if cfg.mask:
        mask_a, mask_b = _draw_mask(mrng, grid.N), _draw_mask(mrng, grid.N)
    else:
        mask_a = mask_b = np.zeros(0, np.int64)
    nrng = rng_for(seed, "noise")
    I_a = _finish(render_chain(pair.image_a, chain_a), mask_a, grid, cfg.noise, nrng)
    I_b = _finish(render_chain(pair.image_b, chain_b), mask_b, grid, cfg.noise, nrng)
    return AugmentedPair(I_a, I_b, chain_a, chain_b, mask_a, mask_b, grid, pair.geometry,
                         pair.modality_a, pair.modality_b, seed, cfg.eq5_plus_one)


def with_chains(pair: ScenePair, chain_a: TransformChain, chain_b: TransformChain, grid: PatchGrid,
                mask_a=(), mask_b=(), eq5_plus_one: bool = True, noise: float = 0.0, seed: int = 0) -> AugmentedPair:
    """Build an AugmentedPair from explicit chains and masks (tests, replay)."""
    mask_a = np.array(sorted(mask_a), np.int64)
    mask_b = np.array(sorted(mask_b), np.int64)
    nrng = rng_for(seed, "noise")
    I_a = _finish(render_chain(pair.image_a, chain_a), mask_a, grid, noise, nrng)
    I_b = _finish(render_chain(pair.image_b, chain_b), mask_b, grid, noise, nrng)
    return AugmentedPair(I_a, I_b, chain_a, chain_b, mask_a, mask_b, grid, pair.geometry,
                         pair.modality_a, pair.modality_b, seed, eq5_plus_one)


# ---------------------------------------------------------------- GT matrix

def _plus_one(ap: AugmentedPair, plus_one: bool | None) -> bool:
    return ap.eq5_plus_one if plus_one is None else plus_one


def build_gt_matrix(ap: AugmentedPair, plus_one: bool | None = None) -> GtMatrix:
    """Map every unmasked I_a patch centre into I_b and mark the target patch."""
    grid = ap.grid
    N = grid.N
    gt = np.zeros((N, N), np.uint8)
    rows = np.setdiff1d(np.arange(N), ap.mask_a)
    if len(rows):
        pts = map_a_to_b(grid.centers()[rows], ap.chain_a, ap.geometry, ap.chain_b)
        ok = ~np.isnan(pts).any(axis=1)
        ip, jp = center_to_patch(pts[ok, 0], pts[ok, 1], grid.p, _plus_one(ap, plus_one))
        inside = (ip >= 0) & (ip < grid.cols) & (jp >= 0) & (jp < grid.rows)
        src = rows[ok][inside]
        dst = grid.index(ip[inside], jp[inside])
        keep = ~np.isin(dst, ap.mask_b)
        gt[src[keep], dst[keep]] = 1
    return GtMatrix(gt, grid, ap.mask_a.copy(), ap.mask_b.copy())


def oracle_gt_matrix(ap: AugmentedPair, plus_one: bool | None = None) -> GtMatrix:
    """Independent GT from every pixel of each source patch.

    A patch is lost when half its pixel rows or columns leave I_b; otherwise the
    plurality target patch (same rounding rule per pixel) wins. Each pixel is
    sampled at the middle of its unit cell so the samples are centred on the
    patch centre used by build_gt_matrix.
    """
    grid = ap.grid
    N, p = grid.N, grid.p
    po = _plus_one(ap, plus_one)
    gt = np.zeros((N, N), np.uint8)
    dy, dx = np.mgrid[0:p, 0:p]
    offs = np.c_[dx.ravel(), dy.ravel()].astype(np.float64) + 0.5
    masked_a, masked_b = set(ap.mask_a.tolist()), set(ap.mask_b.tolist())
    for i in range(N):
        if i in masked_a:
            continue
        ip, jp = grid.coords(i)
        pix = offs + [ip * p, jp * p]
        mapped = map_a_to_b(pix, ap.chain_a, ap.geometry, ap.chain_b)
        lost = np.isnan(mapped).any(axis=1)
        # lost when most sample rows, or most sample columns, are mostly out of
        # frame; a plain area vote would drop corner patches whose centre is still inside
        grid_lost = lost.reshape(p, p)
        if ((grid_lost.sum(1) * 2 >= p).sum() * 2 >= p) or ((grid_lost.sum(0) * 2 >= p).sum() * 2 >= p):
            continue
        tx, ty = center_to_patch(mapped[~lost, 0], mapped[~lost, 1], p, po)
        inside = (tx >= 0) & (tx < grid.cols) & (ty >= 0) & (ty < grid.rows)
        ids = np.where(inside, grid.index(tx, ty), N)  # N = off-grid bucket
        counts = np.bincount(ids, minlength=N + 1)
        best = N - int(np.argmax(counts[::-1]))  # ties -> highest index, as floor() does on a boundary
        if best == N or best in masked_b:
            continue
        gt[i, best] = 1
    return GtMatrix(gt, grid, ap.mask_a.copy(), ap.mask_b.copy())


def boundary_distance(ap: AugmentedPair, plus_one: bool | None = None) -> np.ndarray:
    """Per I_a patch: distance of its mapped centre to the nearest patch or frame boundary in I_b."""
    grid = ap.grid
    off = 1.0 if _plus_one(ap, plus_one) else 0.0
    x, y = _unchecked_map(ap, grid.centers()).T
    dx = np.abs((x + off) / grid.p - np.round((x + off) / grid.p)) * grid.p
    dy = np.abs((y + off) / grid.p - np.round((y + off) / grid.p)) * grid.p
    fx = np.minimum(np.abs(x + 0.5), np.abs(x - (grid.w - 0.5)))
    fy = np.minimum(np.abs(y + 0.5), np.abs(y - (grid.h - 0.5)))
    return np.minimum.reduce([dx, dy, fx, fy])


def _unchecked_map(ap: AugmentedPair, pts) -> np.ndarray:
    ia = np.linalg.inv(ap.chain_a.matrix())
    src = np.asarray(pts, dtype=np.float64) @ ia[:2, :2].T + ia[:2, 2]
    geo = ap.geometry
    if hasattr(geo, "project"):
        src = geo.project(src)
    elif hasattr(geo, "H"):
        q = np.c_[src, np.ones(len(src))] @ geo.H.T
        src = q[:, :2] / q[:, 2:]
    cb = ap.chain_b.matrix()
    return src @ cb[:2, :2].T + cb[:2, 2]


def gt_agreement(ap: AugmentedPair, plus_one: bool | None = None) -> dict:
    a = build_gt_matrix(ap, plus_one).matrix
    b = oracle_gt_matrix(ap, plus_one).matrix
    rows_differ = np.where((a != b).any(axis=1))[0]
    dist = boundary_distance(ap, plus_one)
    return {"rows": ap.grid.N, "disagree": rows_differ, "distance": dist[rows_differ]}


def config_from(cfg: AugmentConfig, **kw) -> AugmentConfig:
    return replace(cfg, **kw)
