"""AdamW, freeze plans, staged pre-training / fine-tuning and ablation switches."""
from __future__ import annotations

import fnmatch
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .augment import AugmentConfig, AugmentedPair, GtMatrix, augment_pair, build_gt_matrix, map_a_to_b
from .losses import (LossWeights, forward_expectation, loss_coarse, loss_cycle, loss_epipolar, loss_fine,
                     loss_reprojection, loss_total, epipolar_lines)
from .matching import FINE_STRIDE, TAU, THETA, dual_softmax, extract_coarse_matches, similarity
from .model import MiaModel, ModelConfig, load_checkpoint, save_checkpoint
from .seeding import derive_seed, rng_for
from .synthdata import DataFormatError, Manifest, Modality, ScenePair, image_to_input, load_manifest, pair_key

log = logging.getLogger("ufm.trainer")

STAGES = ("pretrain-1", "pretrain-2", "pretrain-3", "finetune-same", "finetune-cross")


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    pass


class TrainingAbort(FloatingPointError):
    def __init__(self, component: str, op: str = ""):
        super().__init__(f"non-finite value in {component}" + (f" (op {op})" if op else ""))
        self.component = component


# ------------------------------------------------------------------- switches

@dataclass(frozen=True)
class Switches:
    """Ablation columns: A augmentation, B generic FFN, C assistant FFN, D pre-training, E fine-tuning."""
    augmentation: bool = True
    generic_ffn: bool = True
    assistant_ffn: bool = True
    use_pretrained: bool = True
    finetune: bool = True

    @classmethod
    def variant(cls, k: int) -> "Switches":
        if k not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {k}")
        return cls(*(bool(v) for v in VARIANTS[k]))


VARIANTS = {
    1: (1, 0, 0, 1, 1), 2: (0, 1, 0, 1, 1), 3: (0, 0, 1, 1, 1), 4: (1, 1, 0, 1, 1),
    5: (1, 0, 1, 1, 1), 6: (1, 1, 1, 1, 0), 7: (1, 1, 1, 0, 1), 8: (1, 1, 1, 1, 1),
}


# ----------------------------------------------------------------- freeze plan

@dataclass(frozen=True)
class FreezePlan:
    patterns: tuple[str, ...]

    def trainable(self, names) -> list[str]:
        return [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in self.patterns)]

    def validate(self, names) -> None:
        names = list(names)
        for p in self.patterns:
            if not any(fnmatch.fnmatchcase(n, p) for n in names):
                raise ConfigError(f"freeze-plan pattern '{p}' matches no parameter")

    @property
    def empty(self) -> bool:
        return not self.patterns


def _assist(*keys) -> list[str]:
    return [f"assistant.{k}.*" for k in keys]


def build_freeze_plan(stage: str, x=None, y=None, switches: Switches | None = None,
                      names=None) -> FreezePlan:
    sw = switches or Switches()
    X = Modality.parse(x).value if x is not None else None
    Y = Modality.parse(y).value if y is not None else None
    attn, generic = ["layer*.attn.*"], ["layer*.ffn.*"]
    if stage == "pretrain-1":
        pats = ["encoder.*"] + attn + ["layer*.norm_*"] + generic + ["head.*"]
    elif stage in ("pretrain-2", "finetune-same"):
        if X is None:
            raise ConfigError(f"{stage} needs a modality")
        pats = _assist(X)
    elif stage in ("pretrain-3", "finetune-cross"):
        if X is None or Y is None or X == Y:
            raise ConfigError(f"{stage} needs two distinct modalities")
        pats = (attn if stage == "pretrain-3" else []) + _assist(X, Y, pair_key(X, Y))
    else:
        raise ConfigError(f"unknown stage '{stage}'")
    if not sw.use_pretrained and stage in ("finetune-same", "finetune-cross"):
        # no pre-training: the single stage trains everything it routes through
        pats = ["encoder.*"] + attn + ["layer*.norm_*"] + generic + ["head.*"] + pats
    if not sw.generic_ffn:
        pats = [p for p in pats if p not in generic]
    if not sw.assistant_ffn:
        pats = [p for p in pats if not p.startswith("assistant.")]
    plan = FreezePlan(tuple(dict.fromkeys(pats)))
    if names is not None:
        plan.validate(names)
    return plan


def apply_plan(model: MiaModel, plan: FreezePlan) -> list[str]:
    train = set(plan.trainable(model.names()))
    for n, t in model.params.items():
        t.requires_grad = n in train
        t.grad = None
    return [n for n in model.names() if n in train]


# ------------------------------------------------------------------- optimizer

class AdamW:
    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.98), eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr, self.betas, self.eps, self.wd = lr, tuple(betas), eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @staticmethod
    def decays(name: str) -> bool:
        return not name.endswith(".gain")

    def step(self, params: dict, names) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for n in names:
            p = params[n]
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = self.v.get(n)
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data.astype(np.float64) - self.lr * upd
            if self.wd and self.decays(n):
                new -= self.lr * self.wd * p.data
            p.data[...] = new.astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"{n}.adam_m"] = self.m[n]
            out[f"{n}.adam_v"] = self.v[n]
        out["step"] = np.array(float(self.t))
        return out

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            if k.endswith(".adam_m"):
                self.m[k[:-7]] = np.asarray(v, np.float64)
            elif k.endswith(".adam_v"):
                self.v[k[:-7]] = np.asarray(v, np.float64)
        if "step" in state:
            self.t = int(np.asarray(state["step"]).reshape(-1)[0])


# ---------------------------------------------------------------------- config

@dataclass
class StageConfig:
    stage: str = "pretrain-1"
    modality_a: str = "OPT"
    modality_b: str | None = None
    manifest: str | None = None
    steps: int = 100
    lr: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 1.0
    n_q: int = 512
    tau: float = TAU
    theta: float = THETA
    coarse_norm: str = "entries"
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    m_top: int = 2
    seed: int = 0
    switches: Switches = field(default_factory=Switches)
    tenth: bool = True
    eq5_plus_one: bool = True
    rotate_deg: float = 10.0
    crop: int = 64             # square crop side for augmented pairs
    mirror: bool = False
    rot90: bool = False
    aug_pool: int = 0          # > 0: reuse this many fixed augmentations per pair (overfit runs)
    accum: int = 1
    ckpt_every: int = 100
    weight_decay: float = 0.01
    fine_gain: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage '{self.stage}'")
        if self.steps < 0 or self.accum < 1:
            raise ConfigError("steps must be >= 0 and accum >= 1")
        if self.stage in ("pretrain-3", "finetune-cross") and self.modality_b is None:
            raise ConfigError(f"{self.stage} needs modality_b")

    def model_config(self) -> ModelConfig:
        return ModelConfig(L=self.layers, d=self.hidden, heads=self.heads, d_ffn=2 * self.hidden,
                           M=self.m_top, generic_ffn=self.switches.generic_ffn,
                           assistant_ffn=self.switches.assistant_ffn, fine_gain=self.fine_gain)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.lam, self.n_q, self.coarse_norm)

    def augment_config(self) -> AugmentConfig:
        if not self.switches.augmentation:
            # same window on both sides, no photometric change, no masking
            return AugmentConfig.disabled(crop=False, mask=False, eq5_plus_one=self.eq5_plus_one)
        return AugmentConfig(crop_h=self.crop, crop_w=self.crop, mirror=self.mirror, flip=self.mirror,
                             rot90=self.rot90, rotate_deg=self.rotate_deg, eq5_plus_one=self.eq5_plus_one)

    def plan(self, names=None) -> FreezePlan:
        b = self.modality_b if self.stage in ("pretrain-3", "finetune-cross") else None
        return build_freeze_plan(self.stage, self.modality_a, b, self.switches, names)


_KEYS = {
    "stage": str, "modality_a": str, "modality_b": str, "manifest": str, "steps": int, "lr": float,
    "alpha": float, "beta": float, "lambda": float, "tau": float, "theta": float, "layers": int,
    "hidden": int, "heads": int, "m_top": int, "seed": int, "tenth": bool, "eq5_plus_one": bool,
    "coarse_norm": str, "n_q": int, "rotate_deg": float, "crop": int, "mirror": bool, "rot90": bool,
    "aug_pool": int, "accum": int, "ckpt_every": int, "weight_decay": float,
    "fine_gain": float, "ablate_A": bool, "ablate_B": bool, "ablate_C": bool, "ablate_D": bool, "ablate_E": bool,
}
_ABLATE = {"ablate_A": "augmentation", "ablate_B": "generic_ffn", "ablate_C": "assistant_ffn",
           "ablate_D": "use_pretrained", "ablate_E": "finetune"}
CONFIG_KEYS = tuple(_KEYS)


def _parse_bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: '{v}'")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines with ``#`` comments; unknown keys are errors."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _KEYS:
            raise ConfigError(f"line {n}: unknown key '{k}'")
        typ = _KEYS[k]
        try:
            out[k] = _parse_bool(v) if typ is bool else typ(v)
        except ValueError:
            raise ConfigError(f"line {n}: bad value for '{k}': '{v}'") from None
    return out


def stage_config_from(values: dict, base: StageConfig | None = None) -> StageConfig:
    """Apply parsed key/values (config file, then flags) over ``base``."""
    cfg = base or StageConfig()
    kw, sw = {}, asdict(cfg.switches)
    for k, v in values.items():
        if k not in _KEYS:
            raise ConfigError(f"unknown key '{k}'")
        if k in _ABLATE:
            sw[_ABLATE[k]] = not v
        elif k == "lambda":
            kw["lam"] = v
        else:
            kw[k] = v
    for k in ("modality_a", "modality_b"):
        if kw.get(k) is not None:
            kw[k] = Modality.parse(kw[k]).value
    valid = {f.name for f in fields(StageConfig)}
    return replace(cfg, switches=Switches(**sw), **{k: v for k, v in kw.items() if k in valid})


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataFormatError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


# ---------------------------------------------------------------------- batches

@dataclass
class Batch:
    ap: AugmentedPair
    img_a: np.ndarray
    img_b: np.ndarray
    gt: GtMatrix
    modalities: tuple[str, str]
    queries: np.ndarray          # (n, 2) I_a px
    targets: np.ndarray          # (n, 2) true I_b px (NaN for lost)
    F: np.ndarray | None         # crop-frame fundamental matrix for two-view pairs


def crop_fundamental(ap: AugmentedPair) -> np.ndarray | None:
    F = getattr(ap.geometry, "F", None)
    if F is None:
        return None
    Ca, Cb = ap.chain_a.matrix(), ap.chain_b.matrix()
    Fc = np.linalg.inv(Cb).T @ F @ np.linalg.inv(Ca)
    return Fc / np.linalg.norm(Fc)


def draw_queries(ap: AugmentedPair, n_q: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n_q fine-grid positions of I_a, outside both masks, whose true match lands inside I_b."""
    s = FINE_STRIDE
    h, w = ap.I_a.shape
    yy, xx = np.mgrid[0:h:s, 0:w:s]
    cand = np.c_[xx.ravel(), yy.ravel()].astype(np.float64)
    tgt = map_a_to_b(cand, ap.chain_a, ap.geometry, ap.chain_b)
    hb, wb = ap.I_b.shape
    ok = np.isfinite(tgt).all(axis=1)
    ok[ok] = (tgt[ok, 0] >= -0.5) & (tgt[ok, 0] < wb - 0.5) & (tgt[ok, 1] >= -0.5) & (tgt[ok, 1] < hb - 0.5)
    # masked patches are blank on that side, so they carry no evidence for the fine loss
    p = ap.grid.p
    ok &= ~np.isin(ap.grid.index(cand[:, 0].astype(int) // p, cand[:, 1].astype(int) // p), ap.mask_a)
    tb = np.floor((np.nan_to_num(tgt) + 0.5) / p).astype(int)
    tb = np.clip(tb, 0, [ap.grid.cols - 1, ap.grid.rows - 1])
    ok &= ~np.isin(ap.grid.index(tb[:, 0], tb[:, 1]), ap.mask_b)
    idx = np.nonzero(ok)[0]
    if len(idx) > n_q:
        idx = np.sort(rng_for(seed, "queries").choice(idx, n_q, replace=False))
    return cand[idx], tgt[idx]


def make_batch(ap: AugmentedPair, n_q: int = 512, seed: int = 0) -> Batch:
    gt = build_gt_matrix(ap)
    q, tgt = draw_queries(ap, n_q, seed)
    return Batch(ap, image_to_input(ap.I_a), image_to_input(ap.I_b), gt,
                 (ap.modality_a.value, ap.modality_b.value), q, tgt, crop_fundamental(ap))


def with_queries(batch: Batch, n_q: int, seed: int) -> Batch:
    """Same augmented pair and GT, fresh query draw."""
    q, tgt = draw_queries(batch.ap, n_q, seed)
    return replace(batch, queries=q, targets=tgt)


def compute_losses(model: MiaModel, batch: Batch, w: LossWeights, tau: float = TAU) -> dict:
    """Forward pass, all loss terms; tensors in the returned dict are differentiable."""
    stage = "forward"
    try:
        out = model.forward_pair(batch.img_a, batch.img_b, batch.modalities)
        stage = "loss_coarse"
        P = dual_softmax(similarity(out.coarse_a, out.coarse_b), tau)
        lc = loss_coarse(P, batch.gt.matrix, norm=w.coarse_norm)
        stage = "loss_fine"
        q, tgt, surrogate, excluded = batch.queries, batch.targets, batch.F is None, 0
        if batch.F is not None and len(q):
            ln = epipolar_lines(batch.F, q)
            ok = (np.abs(ln[:, 0]) >= 1e-12) | (np.abs(ln[:, 1]) >= 1e-12)
            excluded = int((~ok).sum())
            q, tgt = q[ok], tgt[ok]
        if len(q):
            h12, s2 = forward_expectation(out.fine_a, out.fine_b, q)
            ep = loss_epipolar(h12, q, batch.F)[0] if not surrogate else loss_reprojection(h12, tgt)
            cy = loss_cycle(h12, q, out.fine_a, out.fine_b)
            lf = loss_fine(s2.data, ep, cy, w.lam)
        else:
            lf = nx.as_tensor(0.0)
        stage = "loss_total"
        total = loss_total(lc, lf, w.alpha, w.beta)
    except nx.NonFiniteError as exc:
        raise TrainingAbort(stage, str(exc)) from None
    return {"P": P, "loss_c": lc, "loss_f": lf, "total": total, "out": out,
            "ep_surrogate": surrogate, "excluded": excluded}


def coarse_scores(P: np.ndarray, gt: np.ndarray, theta: float = THETA, grid=None) -> tuple[float, float, int]:
    """(precision, recall, n_matches) of mutual-argmax coarse matches against a GT matrix."""
    m = extract_coarse_matches(P, theta, grid)
    hits = int(gt[m.ia, m.ib].sum()) if len(m) else 0
    prec = hits / len(m) if len(m) else 0.0
    rec = hits / max(1, int(gt.sum()))
    return prec, rec, len(m)


def train_step(model: MiaModel, batches, trainable: list[str], opt: AdamW, w: LossWeights,
               tau: float = TAU, theta: float = THETA) -> dict:
    """One optimizer step over ``batches`` (gradient accumulation). Empty plan -> no-op."""
    if not trainable:
        return {"loss_c": float("nan"), "loss_f": float("nan"), "total": float("nan"),
                "precision": float("nan"), "noop": True}
    model.zero_grad()
    rec = {"loss_c": 0.0, "loss_f": 0.0, "total": 0.0, "precision": 0.0}
    for b in batches:
        r = compute_losses(model, b, w, tau)
        root = nx.scale(r["total"], 1.0 / len(batches))
        if not np.isfinite(root.data).all():
            raise TrainingAbort("loss_total")
        if root.requires_grad:
            nx.backward(root)
        rec["loss_c"] += r["loss_c"].item() / len(batches)
        rec["loss_f"] += r["loss_f"].item() / len(batches)
        rec["total"] += r["total"].item() / len(batches)
        rec["precision"] += coarse_scores(r["P"].data, b.gt.matrix, theta, b.ap.grid)[0] / len(batches)
    for n in trainable:
        g = model.params[n].grad
        if g is not None and not np.isfinite(g).all():
            raise TrainingAbort("backward", n)
    opt.step(model.params, trainable)
    rec["noop"] = False
    return rec


# ------------------------------------------------------------------ checkpoints

def save_training_checkpoint(path, model: MiaModel, opt: AdamW | None = None) -> None:
    state = dict(model.state_dict())
    if opt is not None:
        state.update(opt.state())
    save_checkpoint(path, state)


def split_checkpoint(state: dict) -> tuple[dict, dict]:
    params = {k: v for k, v in state.items() if not (k.endswith(".adam_m") or k.endswith(".adam_v") or k == "step")}
    extra = {k: v for k, v in state.items() if k not in params}
    return params, extra


class MergeConflict(ValueError):
    pass


def merge_checkpoints(base: dict, *others: dict) -> dict:
    """Combine runs that started from ``base`` and changed disjoint parameter sets."""
    out = dict(base)
    for k in base:
        changed = [o[k] for o in others if k in o and not np.array_equal(o[k], base[k])]
        if not changed:
            continue
        if any(not np.array_equal(c, changed[0]) for c in changed[1:]):
            raise MergeConflict(f"parameter '{k}' changed differently in several runs")
        out[k] = changed[0]
    for o in others:
        for k, v in o.items():
            if k in base:
                continue
            if k == "step":
                out[k] = np.maximum(out.get(k, v), v)
            elif k in out and not np.array_equal(out[k], v):
                raise MergeConflict(f"optimizer state '{k}' differs between runs")
            else:
                out[k] = v
    return {k: out[k] for k in sorted(out, key=lambda n: (n not in base, n))}


# -------------------------------------------------------------------- stages

def stage_pairs(stage: str, x: str, y: str | None) -> set[str]:
    """Modality-pair keys a stage trains on."""
    if stage == "pretrain-1":
        return {"OPT"}
    if stage in ("pretrain-2", "finetune-same"):
        return {x}
    if stage == "pretrain-3":
        return {x, y, pair_key(x, y)}
    return {pair_key(x, y)}


@dataclass
class StageResult:
    model: MiaModel
    rows: list[dict]
    checkpoint: Path | None
    trainable: list[str]
    optimizer: AdamW


class PairSource:
    """Deterministic stream of augmented training batches from a manifest or in-memory pairs."""

    def __init__(self, pairs: list[ScenePair], aug: AugmentConfig, n_q: int, seed: int, tag: str, pool: int = 0):
        if not pairs:
            raise DataFormatError("no training pairs")
        self.pairs, self.aug, self.n_q, self.seed, self.tag, self.pool = pairs, aug, n_q, seed, tag, pool
        self._cache: dict[tuple[int, int], Batch] = {}

    def batch(self, step: int, k: int = 0) -> Batch:
        i = int(rng_for(self.seed, self.tag, "order", step, k).integers(len(self.pairs)))
        if self.pool:
            b = self.fixed_batch(i, int(rng_for(self.seed, self.tag, "slot", step, k).integers(self.pool)))
            return with_queries(b, self.n_q, derive_seed(self.seed, self.tag, "queries", step, k))
        s = derive_seed(self.seed, self.tag, "aug", step, k)
        return make_batch(augment_pair(self.pairs[i], self.aug, s), self.n_q, s)

    def fixed_batch(self, i: int, slot: int = 0) -> Batch:
        key = (i, slot)
        if key not in self._cache:
            s = derive_seed(self.seed, self.tag, "aug", i, slot)
            self._cache[key] = make_batch(augment_pair(self.pairs[i], self.aug, s), self.n_q, s)
        return self._cache[key]


def select_pairs(manifest: Manifest, stage: str, x: str, y: str | None, tenth: bool, seed: int) -> list[ScenePair]:
    want = stage_pairs(stage, x, y)
    idx = [i for i, e in enumerate(manifest.entries) if pair_key(e.modality_a, e.modality_b) in want]
    if not idx:
        raise DataFormatError(f"manifest has no pairs for {stage} ({', '.join(sorted(want))})")
    if tenth and stage.startswith("finetune"):
        k = max(1, len(idx) // 10)
        idx = sorted(rng_for(seed, "tenth").choice(idx, k, replace=False).tolist())
    return [manifest.load(i) for i in idx]


def run_stage(cfg: StageConfig, model: MiaModel | None = None, out_dir=None, pairs: list[ScenePair] | None = None,
              init_ckpt=None, pretrained: bool = False, log_path=None) -> StageResult:
    """Iterate train_step for cfg.steps; checkpoint every cfg.ckpt_every steps and at the end."""
    needs_base = cfg.stage in ("pretrain-2", "pretrain-3")
    if init_ckpt is not None:
        state = load_checkpoint(init_ckpt)
        params, _ = split_checkpoint(state)
        model = MiaModel(cfg.model_config())
        model.load_state_dict(params)
        pretrained = True
    if needs_base and cfg.switches.use_pretrained and not pretrained:
        raise PrerequisiteError(f"{cfg.stage} needs a pretrain-1 checkpoint")
    model = model if model is not None else MiaModel(cfg.model_config(), seed=derive_seed(cfg.seed, "init"))
    model = model.with_config(generic_ffn=cfg.switches.generic_ffn, assistant_ffn=cfg.switches.assistant_ffn)
    x = Modality.parse(cfg.modality_a).value
    y = Modality.parse(cfg.modality_b).value if cfg.modality_b else None
    if pairs is None:
        if cfg.manifest is None:
            raise ConfigError("no manifest given")
        pairs = select_pairs(load_manifest(cfg.manifest), cfg.stage, x, y, cfg.tenth, cfg.seed)
    for k in {pair_key(p.modality_a, p.modality_b) for p in pairs}:
        for part in k.split("+"):
            if part not in model.cfg.assistant_keys:
                raise DataFormatError(f"model has no assistant for modality '{part}'")
    plan = cfg.plan(model.names())
    trainable = apply_plan(model, plan)
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    src = PairSource(pairs, cfg.augment_config(), cfg.n_q, cfg.seed, cfg.stage + ":" + x + (y or ""),
                     cfg.aug_pool)
    w = cfg.loss_weights()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, ckpt = [], None
    logf = open(log_path, "a") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            batches = [] if not trainable else [src.batch(step, k) for k in range(cfg.accum)]
            r = train_step(model, batches, trainable, opt, w, cfg.tau, cfg.theta)
            r["step"] = step
            rows.append(r)
            if logf:
                logf.write(f"{step} {r['loss_c']:.6f} {r['loss_f']:.6f} {r['total']:.6f} {r['precision']:.4f}\n")
            if out is not None and (step % cfg.ckpt_every == 0 or step == cfg.steps):
                ckpt = out / f"{cfg.stage}-step{step:05d}.ckpt"
                save_training_checkpoint(ckpt, model, opt)
    finally:
        if logf:
            logf.close()
        for t in model.params.values():
            t.requires_grad = True
            t.grad = None
    if out is not None and cfg.steps == 0:
        ckpt = out / f"{cfg.stage}-step00000.ckpt"
        save_training_checkpoint(ckpt, model, opt)
    return StageResult(model, rows, ckpt, trainable, opt)


# ---------------------------------------------------------------- pipelines

@dataclass
class PipelineBudget:
    pretrain1: int = 150
    pretrain2: int = 50     # per modality
    pretrain3: int = 100
    finetune: int = 100

    @property
    def total(self) -> int:
        return self.pretrain1 + 2 * self.pretrain2 + self.pretrain3 + self.finetune


def run_pipeline(pairs_by_key: dict[str, list[ScenePair]], x: str, y: str, switches: Switches,
                 budget: PipelineBudget, base: StageConfig | None = None, seed: int = 0) -> MiaModel:
    """Staged pre-training (1, 2 per modality, 3) then cross-modal fine-tuning under the given ablation switches.

    Every variant spends ``budget.total`` steps; stages whose plan is empty still consume theirs.
    """
    base = replace(base or StageConfig(), seed=seed, switches=switches, tenth=False)
    key = pair_key(x, y)
    model = MiaModel(base.model_config(), seed=derive_seed(seed, "init"))
    if not switches.use_pretrained:
        cfg = replace(base, stage="finetune-cross", modality_a=x, modality_b=y, steps=budget.total)
        return run_stage(cfg, model, pairs=pairs_by_key[key]).model
    ft = budget.finetune if switches.finetune else 0
    p3 = budget.pretrain3 + (0 if switches.finetune else budget.finetune)
    plan = [("pretrain-1", "OPT", None, budget.pretrain1, "OPT"),
            ("pretrain-2", x, None, budget.pretrain2, x),
            ("pretrain-2", y, None, budget.pretrain2, y),
            ("pretrain-3", x, y, p3, None),
            ("finetune-cross", x, y, ft, key)]
    for stage, a, b, steps, data_key in plan:
        if steps == 0:
            continue
        if data_key is None:
            data = [p for k in (x, y, key) for p in pairs_by_key.get(k, [])]
        else:
            data = pairs_by_key[data_key]
        cfg = replace(base, stage=stage, modality_a=a, modality_b=b, steps=steps)
        model = run_stage(cfg, model, pairs=data, pretrained=True).model
    return model
