"""Deterministic synthetic multimodal image pairs, PGM I/O and dataset manifests."""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import GeometryError, apply_homography_many, dlt_homography, fundamental_from_poses, normalize_h
from .seeding import rng_for


class DataFormatError(ValueError):
    pass


class Modality(str, enum.Enum):
    OPT = "OPT"
    NIR = "NIR"
    SAR = "SAR"
    DEPTH = "DEPTH"
    UV = "UV"

    @classmethod
    def parse(cls, s) -> "Modality":
        if isinstance(s, Modality):
            return s
        try:
            return cls(str(s).upper())
        except ValueError:
            raise DataFormatError(f"unknown modality '{s}'") from None


def pair_key(a, b) -> str:
    """Assistant key for an unordered modality pair, e.g. 'OPT+SAR'."""
    a, b = Modality.parse(a), Modality.parse(b)
    if a == b:
        return a.value
    return "+".join(sorted((a.value, b.value)))


# ------------------------------------------------------------------- geometry

class Registered:
    kind = "REG"

    def __init__(self, size: tuple[int, int] | None = None):
        self.size = size

    def map_points(self, pts) -> np.ndarray:
        return _frame_check(np.array(pts, dtype=np.float64).reshape(-1, 2), self.size)

    def serialize(self) -> str:
        return "REG\n"


class HomographyGeom:
    kind = "H"

    def __init__(self, H, size: tuple[int, int] | None = None):
        self.H = normalize_h(H)
        self.size = size

    def map_points(self, pts) -> np.ndarray:
        return _frame_check(apply_homography_many(self.H, pts), self.size)

    def serialize(self) -> str:
        return "H " + " ".join(repr(float(v)) for v in self.H.reshape(-1)) + "\n"


class TwoView:
    """Textured plane-plus-relief seen from two pinhole cameras.

    View-1 depth is an analytic function of view-1 pixel coordinates:
    z(u, v) = z0 + sum_k a_k exp(-|(u, v) - c_k|^2 / (2 s_k^2)).
    """

    kind = "F"

    def __init__(self, K1, K2, R, t, z0: float, bumps, size: tuple[int, int]):
        self.K1 = np.asarray(K1, dtype=np.float64)
        self.K2 = np.asarray(K2, dtype=np.float64)
        self.R = np.asarray(R, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64).reshape(3)
        self.z0 = float(z0)
        self.bumps = np.asarray(bumps, dtype=np.float64).reshape(-1, 4)  # u, v, sigma, amp
        self.size = tuple(size)
        self.F = fundamental_from_poses(self.K1, self.K2, self.R, self.t)

    def depth(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        z = np.full(len(pts), self.z0)
        for u, v, s, a in self.bumps:
            z += a * np.exp(-((pts[:, 0] - u) ** 2 + (pts[:, 1] - v) ** 2) / (2 * s * s))
        return z

    def project(self, pts) -> np.ndarray:
        """Exact view-1 -> view-2 pixel map (no frame check)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        rays = np.c_[pts, np.ones(len(pts))] @ np.linalg.inv(self.K1).T
        X = rays * self.depth(pts)[:, None]
        q = (X @ self.R.T + self.t) @ self.K2.T
        return q[:, :2] / q[:, 2:]

    def map_points(self, pts) -> np.ndarray:
        return _frame_check(self.project(pts), self.size)

    def plane_homography(self) -> np.ndarray:
        e3 = np.array([0.0, 0.0, 1.0])
        return self.K2 @ (self.z0 * self.R + np.outer(self.t, e3)) @ np.linalg.inv(self.K1)

    def unproject(self, pts, iters: int = 12) -> np.ndarray:
        """Invert ``project`` by Newton iterations from the base-plane homography."""
        q = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        u = apply_homography_many(np.linalg.inv(self.plane_homography()), q)
        eps = 1e-4
        for _ in range(iters):
            f0 = self.project(u) - q
            fx = (self.project(u + [eps, 0]) - self.project(u - [eps, 0])) / (2 * eps)
            fy = (self.project(u + [0, eps]) - self.project(u - [0, eps])) / (2 * eps)
            det = fx[:, 0] * fy[:, 1] - fy[:, 0] * fx[:, 1]
            du = (fy[:, 1] * f0[:, 0] - fy[:, 0] * f0[:, 1]) / det
            dv = (-fx[:, 1] * f0[:, 0] + fx[:, 0] * f0[:, 1]) / det
            u = u - np.c_[du, dv]
        return u

    def serialize(self) -> str:
        def row(tag, arr):
            return tag + " " + " ".join(repr(float(v)) for v in np.asarray(arr).reshape(-1))
        lines = [
            row("F", self.F), row("K1", self.K1), row("K2", self.K2), row("R", self.R),
            row("t", self.t), f"size {self.size[0]} {self.size[1]}",
            row("depth", np.r_[self.z0, self.bumps.reshape(-1)]),
        ]
        return "\n".join(lines) + "\n"


def _frame_check(pts: np.ndarray, size) -> np.ndarray:
    if size is not None:
        w, h = size
        bad = (pts[:, 0] < -0.5) | (pts[:, 0] >= w - 0.5) | (pts[:, 1] < -0.5) | (pts[:, 1] >= h - 0.5)
        pts[bad] = np.nan
    return pts


def parse_geometry(text: str, size: tuple[int, int] | None = None):
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataFormatError("empty geometry file")
    tag = lines[0][0]
    try:
        if tag == "REG":
            return Registered(size)
        if tag == "H":
            return HomographyGeom(np.array(lines[0][1:], float).reshape(3, 3), size)
        if tag == "F":
            rec = {ln[0]: ln[1:] for ln in lines}
            depth = np.array(rec["depth"], float)
            sz = tuple(int(v) for v in rec["size"])
            return TwoView(np.array(rec["K1"], float).reshape(3, 3), np.array(rec["K2"], float).reshape(3, 3),
                           np.array(rec["R"], float).reshape(3, 3), np.array(rec["t"], float),
                           depth[0], depth[1:], sz)
    except (KeyError, ValueError, GeometryError) as exc:
        raise DataFormatError(f"malformed geometry file: {exc}") from None
    raise DataFormatError(f"unknown geometry tag '{tag}'")


@dataclass
class ScenePair:
    image_a: np.ndarray
    image_b: np.ndarray
    modality_a: Modality
    modality_b: Modality
    geometry: object
    seed: int = 0
    id: str = ""

    @property
    def cross_modal(self) -> bool:
        return self.modality_a != self.modality_b


# -------------------------------------------------------------------- images

def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    g = grid.shape[0] - 1
    coords = np.linspace(0, g, size, endpoint=False) + g / (2 * size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")


def gen_base_scene(seed: int, size: int = 96) -> np.ndarray:
    """Multi-octave value noise with blobs and straight edges, uint8 in [0, 255]."""
    if size < 32:
        raise ValueError(f"scene size must be at least 32 px, got {size}")
    rng = rng_for(seed, "base-scene")
    img = np.zeros((size, size))
    amp = 1.0
    cells = 3
    while cells <= size // 2:
        img += amp * _bilinear_upsample(rng.uniform(-1, 1, (cells + 1, cells + 1)), size)
        amp *= 0.85
        cells *= 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(max(8, size * size // 96)):
        cx, cy = rng.uniform(0, size, 2)
        s = rng.uniform(1.0, size / 12)
        img += rng.uniform(-1.5, 1.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    for _ in range(max(3, size // 24)):
        theta = rng.uniform(0, np.pi)
        off = rng.uniform(-size / 3, size / 3)
        side = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) - off
        img += rng.uniform(-0.8, 0.8) * (side > 0)
    img = (img - img.min()) / (img.max() - img.min())
    return np.round(img * 255).astype(np.uint8)


DEFAULT_RENDER = {
    Modality.OPT: {"gamma": 1.15},
    Modality.NIR: {"gamma": 0.6, "blur": 1.0},
    Modality.SAR: {"looks": 4.0, "corr": 0.6},
    Modality.DEPTH: {"smooth": 2.0, "levels": 8},
    Modality.UV: {"gain": 2.5},
}


def render_modality(base: np.ndarray, m, seed: int = 0, **params) -> np.ndarray:
    """Render a base scene as seen by a synthetic sensor of modality ``m``."""
    m = Modality.parse(m)
    p = {**DEFAULT_RENDER[m], **params}
    x = base.astype(np.float64) / 255.0
    if m is Modality.OPT:
        if p["gamma"] == 1.0:
            return base.copy()
        y = x ** p["gamma"]
    elif m is Modality.NIR:
        y = 1.0 - x ** p["gamma"]
        y = ndimage.gaussian_filter(y, p["blur"], mode="nearest")
    elif m is Modality.SAR:
        rng = rng_for(seed, "speckle")
        looks = p["looks"]
        speckle = rng.gamma(looks, 1.0 / looks, size=x.shape)
        speckle = ndimage.gaussian_filter(speckle, p["corr"], mode="nearest")
        y = np.log1p(50.0 * (0.05 + x) * speckle)
    elif m is Modality.DEPTH:
        s = ndimage.gaussian_filter(x, p["smooth"], mode="nearest")
        s = (s - s.min()) / max(s.max() - s.min(), 1e-12)
        y = np.floor(s * p["levels"] - 1e-9).clip(0, None) / (p["levels"] - 1)
    else:
        lo = ndimage.gaussian_filter(x, 3.0, mode="nearest")
        hi = ndimage.gaussian_filter(x, 0.7, mode="nearest")
        y = 0.5 + p["gain"] * (hi - lo)
    y = (y - y.min()) / max(y.max() - y.min(), 1e-12)
    return np.round(y * 255).astype(np.uint8)


def _two_view_geometry(rng: np.random.Generator, size: int) -> TwoView:
    f = float(size)
    c = (size - 1) / 2.0
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1]])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(1.0, 3.0))
    A = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(ang) * A + (1 - np.cos(ang)) * A @ A
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    t = np.array([rng.choice([-1, 1]) * rng.uniform(0.15, 0.3), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)])
    n_b = 4
    bumps = np.c_[rng.uniform(0, size, (n_b, 2)), rng.uniform(size / 10, size / 4, n_b), rng.uniform(-0.3, 0.3, n_b)]
    return TwoView(K, K.copy(), R, t, 4.0, bumps, (size, size))


def render_two_view(tex_b: np.ndarray, geom: TwoView) -> np.ndarray:
    h, w = tex_b.shape
    yy, xx = np.mgrid[0:h, 0:w]
    q = np.c_[xx.ravel(), yy.ravel()].astype(np.float64)
    src = geom.unproject(q)
    vals = ndimage.map_coordinates(tex_b.astype(np.float64), [src[:, 1], src[:, 0]], order=1,
                                   mode="constant", cval=0.0)
    return np.round(vals.reshape(h, w)).clip(0, 255).astype(np.uint8)


def gen_pair(seed: int, mode: str = "same-modal", modalities: Sequence = ("OPT",), size: int = 96) -> ScenePair:
    mods = [Modality.parse(m) for m in modalities]
    if len(mods) == 1:
        mods = mods * 2
    ma, mb = mods[0], mods[1]
    if mode == "same-modal" and ma != mb:
        raise ValueError("same-modal pairs need a single modality")
    if mode == "cross-modal" and ma == mb:
        raise ValueError("cross-modal pairs need two distinct modalities")
    if mode not in ("same-modal", "cross-modal", "two-view", "homography"):
        raise ValueError(f"unknown pair mode '{mode}'")
    base = gen_base_scene(seed, size)
    img_a = render_modality(base, ma, seed)
    img_b = img_a.copy() if mb == ma else render_modality(base, mb, seed + 1)
    if mode == "two-view":
        geom = _two_view_geometry(rng_for(seed, "two-view"), size)
        img_b = render_two_view(img_b, geom)
    elif mode == "homography":
        H = random_homography(rng_for(seed, "homography"), size)
        return warp_homography_pair(ScenePair(img_a, img_b, ma, mb, Registered((size, size)), seed), H)
    else:
        geom = Registered((size, size))
    return ScenePair(img_a, img_b, ma, mb, geom, seed)


def random_homography(rng: np.random.Generator, size: int, jitter: float = 0.08) -> np.ndarray:
    """Mild projective warp: each image corner moves by up to ``jitter * size`` px."""
    c = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=np.float64)
    d = c + rng.uniform(-jitter * size, jitter * size, size=c.shape)
    return normalize_h(dlt_homography(c, d))


def warp_homography_pair(pair: ScenePair, H) -> ScenePair:
    """Resample image_b so that it relates to image_a by ``H`` (a -> b)."""
    if not isinstance(pair.geometry, Registered):
        raise ValueError("homography warping needs a registered pair")
    H = normalize_h(H)
    h, w = pair.image_b.shape
    yy, xx = np.mgrid[0:h, 0:w]
    src = apply_homography_many(np.linalg.inv(H), np.c_[xx.ravel(), yy.ravel()])
    vals = ndimage.map_coordinates(pair.image_b.astype(np.float64), [src[:, 1], src[:, 0]], order=1,
                                   mode="constant", cval=0.0)
    img_b = np.round(vals.reshape(h, w)).clip(0, 255).astype(np.uint8)
    return ScenePair(pair.image_a, img_b, pair.modality_a, pair.modality_b, HomographyGeom(H, (w, h)),
                     pair.seed, pair.id)


# ----------------------------------------------------------------------- PGM

def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DataFormatError("PGM writer needs a 2-D uint8 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataFormatError(f"{path}: not a binary PGM (bad magic)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    payload = raw[pos:pos + w * h]
    if len(payload) != w * h:
        raise DataFormatError(f"{path}: truncated payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ------------------------------------------------------------------ manifest

@dataclass
class ManifestEntry:
    id: str
    modality_a: Modality
    modality_b: Modality
    geom_type: str
    image_a: str
    image_b: str
    geom_file: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.entries)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(f"{e.id} {e.modality_a.value} {e.modality_b.value} {e.geom_type} "
                         f"{e.image_a} {e.image_b} {e.geom_file}\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        entries = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise DataFormatError(f"{path}:{n}: expected 7 fields, got {len(parts)}")
            if parts[3] not in ("REG", "H", "F"):
                raise DataFormatError(f"{path}:{n}: unknown geometry type '{parts[3]}'")
            entries.append(ManifestEntry(parts[0], Modality.parse(parts[1]), Modality.parse(parts[2]),
                                         *parts[3:]))
        return cls(entries, path.parent)

    def load(self, i: int) -> ScenePair:
        e = self.entries[i]
        img_a = read_pgm(self.root / e.image_a)
        img_b = read_pgm(self.root / e.image_b)
        geom = parse_geometry((self.root / e.geom_file).read_text(), (img_b.shape[1], img_b.shape[0]))
        if geom.kind != e.geom_type:
            raise DataFormatError(f"pair {e.id}: manifest says {e.geom_type}, geometry file says {geom.kind}")
        return ScenePair(img_a, img_b, e.modality_a, e.modality_b, geom, id=e.id)

    def pairs(self) -> list[ScenePair]:
        return [self.load(i) for i in range(len(self))]

    def subset(self, idx: Sequence[int]) -> "Manifest":
        return Manifest([self.entries[i] for i in idx], self.root)

    def modality_pairs(self) -> set[str]:
        return {pair_key(e.modality_a, e.modality_b) for e in self.entries}


def parse_modes(spec: str) -> list[tuple[str, Modality, Modality]]:
    """'opt:opt,opt:sar,opt:opt@tv,opt:sar@h' -> [(mode, ma, mb), ...]."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        suffix = ""
        for tag in ("@tv", "@h"):
            if item.endswith(tag):
                suffix, item = tag, item[:-len(tag)]
        parts = item.split(":")
        if len(parts) != 2:
            raise DataFormatError(f"bad mode '{item}', expected modA:modB")
        ma, mb = Modality.parse(parts[0]), Modality.parse(parts[1])
        mode = {"@tv": "two-view", "@h": "homography"}.get(suffix) or ("same-modal" if ma == mb else "cross-modal")
        out.append((mode, ma, mb))
    if not out:
        raise DataFormatError("no pair modes given")
    return out


def gen_dataset(seed: int, n_pairs: int, modes: str | Sequence, out_dir, size: int = 96) -> Manifest:
    """Generate ``n_pairs`` pairs cycling through ``modes``; write PGMs, geometry files and manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "geom").mkdir(parents=True, exist_ok=True)
    modes = parse_modes(modes) if isinstance(modes, str) else list(modes)
    entries = []
    for i in range(n_pairs):
        mode, ma, mb = modes[i % len(modes)]
        pair_seed = int(rng_for(seed, "pair", i).integers(0, 2 ** 31 - 1))
        pair = gen_pair(pair_seed, mode, (ma, mb), size)
        pid = f"p{i:05d}"
        ia, ib, gf = f"images/{pid}_a.pgm", f"images/{pid}_b.pgm", f"geom/{pid}.geom"
        write_pgm(out / ia, pair.image_a)
        write_pgm(out / ib, pair.image_b)
        (out / gf).write_text(pair.geometry.serialize())
        entries.append(ManifestEntry(pid, ma, mb, pair.geometry.kind, ia, ib, gf))
    manifest = Manifest(entries, out)
    manifest.write(out / "manifest.txt")
    return manifest


def image_to_input(img: np.ndarray) -> np.ndarray:
    """Per-image standardization used as model input."""
    x = img.astype(np.float64)
    return ((x - x.mean()) / (x.std() + 1e-6)).astype(np.float32)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise DataFormatError(f"manifest not found: {os.fspath(path)}")
    return Manifest.read(path)
