"""End-to-end smoke pipeline: data -> augment -> staged training -> match -> eval, with a JSON-lines report.

Everything is driven by one seed; the report carries no wall-clock values so two runs with the
same seed are byte-identical. Timings go to the log instead.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, evalkit
from .augment import AugmentConfig, PatchGrid, _draw_mask, augment_pair, gt_agreement, mask_bounds
from .matching import dual_softmax, expectation_from_logits, match_pair
from .model import load_checkpoint, route, save_checkpoint
from .plotting import plot_curve, plot_error_cdf
from .seeding import derive_seed, rng_for
from .synthdata import gen_dataset, load_manifest, pair_key, write_pgm
from .trainer import (StageConfig, Switches, build_freeze_plan, merge_checkpoints, run_stage, select_pairs,
                      split_checkpoint)

log = logging.getLogger(__name__)

CRITERIA = ("c1_gradcheck", "c2_gt_oracle", "c3_mask_bounds", "c4_freeze", "c5_routing", "c6_overfit",
            "c7_staged", "c8_metrics", "c9_softmax", "c10_determinism")
SMOKE_MODES = "opt:opt@h,sar:sar@h,opt:sar@h"


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _r(v, nd: int = 6):
    """Round floats for the report so the text form is stable."""
    if isinstance(v, dict):
        return {k: _r(x, nd) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_r(x, nd) for x in v]
    if isinstance(v, (float, np.floating)):
        return round(float(v), nd)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _frozen_unchanged(before: dict, after: dict, trainable: set[str]) -> bool:
    return all(np.array_equal(before[k], after[k]) for k in before if k not in trainable and not k.endswith(
        (".adam_m", ".adam_v")) and k != "step" and k in after)


class Smoke:
    def __init__(self, out_dir, seed: int = 7, steps: int = 12, pairs: int = 24):
        self.out = Path(out_dir)
        self.seed, self.steps, self.n_pairs = seed, steps, pairs
        self.records: list[dict] = []
        self.timings: dict[str, float] = {}

    def emit(self, kind: str, **kw):
        self.records.append(_r({"kind": kind, **kw}))

    def _timed(self, name, fn, *a, **kw):
        t = time.perf_counter()
        res = fn(*a, **kw)
        self.timings[name] = time.perf_counter() - t
        log.info("%s: %.1fs", name, self.timings[name])
        return res

    # -- pipeline stages
    def run(self) -> Path:
        out, seed = self.out, self.seed
        out.mkdir(parents=True, exist_ok=True)
        man = self._timed("gen-data", gen_dataset, seed, self.n_pairs, SMOKE_MODES, out / "data")
        self.emit("stage", name="gen-data", pairs=len(man), manifest_sha256=sha256(out / "data" / "manifest.txt"))

        aug_dir = out / "augment"
        aug_dir.mkdir(exist_ok=True)
        ap = augment_pair(man.load(0), AugmentConfig(rotate_deg=10.0, mirror=False, flip=False, rot90=False),
                          derive_seed(seed, "augment", 0))
        write_pgm(aug_dir / "p00000_a.pgm", ap.I_a)
        write_pgm(aug_dir / "p00000_b.pgm", ap.I_b)
        self.emit("stage", name="augment", masked_a=len(ap.mask_a), masked_b=len(ap.mask_b))

        base = StageConfig(manifest=str(out / "data"), seed=seed, steps=self.steps, tenth=False, ckpt_every=10 ** 6,
                           lr=3e-4, n_q=64)
        ck = out / "ckpt"
        r1 = self._timed("pretrain-1", run_stage, replace(base, stage="pretrain-1", modality_a="OPT"), out_dir=ck)
        s1 = load_checkpoint(r1.checkpoint)
        merged_parts, frozen_ok = [], True
        for m in ("OPT", "SAR"):
            r2 = self._timed(f"pretrain-2-{m}", run_stage, replace(base, stage="pretrain-2", modality_a=m),
                             out_dir=ck / f"p2-{m}", init_ckpt=r1.checkpoint)
            s2 = load_checkpoint(r2.checkpoint)
            frozen_ok &= _frozen_unchanged(split_checkpoint(s1)[0], s2, set(r2.trainable))
            merged_parts.append(split_checkpoint(s2)[0])
        p1 = split_checkpoint(s1)[0]
        merged = merge_checkpoints(p1, *merged_parts)
        commutes = all(np.array_equal(merged[k], v) for k, v in merge_checkpoints(p1, *merged_parts[::-1]).items())
        save_checkpoint(ck / "pretrain-2-merged.ckpt", merged)
        r3 = self._timed("pretrain-3", run_stage, replace(base, stage="pretrain-3", modality_a="OPT", modality_b="SAR"),
                         out_dir=ck / "p3", init_ckpt=ck / "pretrain-2-merged.ckpt")
        s3 = load_checkpoint(r3.checkpoint)
        frozen_ok &= _frozen_unchanged(merged, s3, set(r3.trainable))
        r4 = self._timed("finetune", run_stage, replace(base, stage="finetune-cross", modality_a="OPT", modality_b="SAR"),
                         out_dir=ck / "ft", init_ckpt=r3.checkpoint)
        s4 = load_checkpoint(r4.checkpoint)
        frozen_ok &= _frozen_unchanged(split_checkpoint(s3)[0], s4, set(r4.trainable))
        ckpts = [r1.checkpoint, ck / "pretrain-2-merged.ckpt", r3.checkpoint, r4.checkpoint]
        for name, r in (("pretrain-1", r1), ("pretrain-3", r3), ("finetune", r4)):
            self.emit("stage", name=name, steps=len(r.rows), final_loss=r.rows[-1]["total"] if r.rows else None,
                      trainable=len(r.trainable))
        self.emit("checkpoints", sha256={p.name: sha256(p) for p in ckpts})

        # match + eval on the cross-modal pairs
        model = r4.model
        idx = [i for i, e in enumerate(man.entries) if pair_key(e.modality_a, e.modality_b) == "OPT+SAR"][:4]
        mdir = out / "matches"
        mdir.mkdir(exist_ok=True)
        sets, Hs = [], []
        for i in idx:
            p = man.load(i)
            _, fine = match_pair(model, p.image_a, p.image_b, ("OPT", "SAR"), theta=0.0)
            fine.write(mdir / f"{man.entries[i].id}.matches")
            sets.append(fine)
            Hs.append(p.geometry.H)
        size = (man.load(idx[0]).image_a.shape[1], man.load(idx[0]).image_a.shape[0])
        auc = evalkit.homography_auc(sets, Hs, size)
        curve = evalkit.mma(sets, [p.geometry.map_points for p in (man.load(i) for i in idx)])
        rows = auc.rows() + curve.rows()
        report = evalkit.write_report(out / "report.csv", rows)
        plot_curve(curve.thresholds, curve.values, out / "report_mma.png")
        plot_error_cdf(auc.errors, out / "report_corner_error.png")
        self.emit("eval", auc=auc.values, mma=list(curve.values), matches={p.name: sha256(p) for p in sorted(mdir.iterdir())},
                  report_sha256=sha256(report))

        self._criteria(frozen_ok, commutes, r4, auc)
        path = out / "smoke_report.jsonl"
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))
        return path

    # -- quick per-criterion probes (the full-size versions live in the acceptance tests)
    def _criteria(self, frozen_ok, commutes, r_ft, auc):
        seed = self.seed
        g = checks.run_all(instances=2, seed=seed)
        self.emit("criterion", key="c1_gradcheck", worst=g, ok=max(g.values()) < checks.TOL)

        man_pairs = select_pairs(load_manifest(self.out / "data"), "pretrain-1", "OPT", None, False, seed)[:4]
        agree = []
        for k, p in enumerate(man_pairs):
            ap = augment_pair(p, AugmentConfig(rotate_deg=10.0), derive_seed(seed, "c2", k))
            g = gt_agreement(ap)
            agree.append(1.0 - len(g["disagree"]) / g["rows"])
        self.emit("criterion", key="c2_gt_oracle", agreement=float(np.mean(agree)), ok=float(np.mean(agree)) >= 0.95)

        rng = rng_for(seed, "c3")
        N = PatchGrid(64, 64, 8).N
        lo, hi = mask_bounds(N)
        ks = [len(_draw_mask(rng, N)) for _ in range(200)]
        self.emit("criterion", key="c3_mask_bounds", lo=lo, hi=hi, min=min(ks), max=max(ks),
                  ok=lo <= min(ks) and max(ks) <= hi)

        self.emit("criterion", key="c4_freeze", frozen_unchanged=frozen_ok, merge_commutes=commutes,
                  ok=bool(frozen_ok and commutes))

        L, M = r_ft.model.cfg.L, r_ft.model.cfg.M
        routes = [route("OPT", "SAR", i, L, M) for i in range(L)]
        ok5 = all(rt == (("OPT", "SAR") if i < L - M else ("OPT+SAR", "OPT+SAR")) for i, rt in enumerate(routes))
        plan = build_freeze_plan("pretrain-3", "OPT", "SAR", Switches(), r_ft.model.names())
        stray = [n for n in plan.trainable(r_ft.model.names())
                 if n.startswith("assistant.") and n.split(".")[1] not in ("OPT", "SAR", "OPT+SAR")]
        self.emit("criterion", key="c5_routing", routes=[list(r) for r in routes], stray_trainable=len(stray),
                  ok=ok5 and not stray)

        rows = r_ft.rows
        self.emit("criterion", key="c6_overfit", note="full 500-step run in the acceptance tests",
                  smoke_precision=rows[-1]["precision"] if rows else 0.0)
        self.emit("criterion", key="c7_staged", note="variant sweep in the acceptance tests", smoke_auc10=auc.values[10])

        e = np.array([[0.6, 0.8], [0.3, -0.2]])
        h, v, hv = evalkit.rmse_errors(e)
        step = evalkit.auc_from_errors([5.0])
        ok8 = abs(hv ** 2 - h ** 2 - v ** 2) < 1e-9 and step == {3: 0.0, 5: 0.0, 10: 50.0}
        self.emit("criterion", key="c8_metrics", hv_identity_err=abs(hv ** 2 - h ** 2 - v ** 2), ok=ok8)

        S = rng_for(seed, "c9").normal(size=(6, 6))
        P, row, col = dual_softmax(S, 0.1, return_factors=True)
        mu, s2, _ = expectation_from_logits(np.zeros(2), np.array([[0.0, 0.0], [2.0, 0.0]]))
        ok9 = (P.data.min() >= 0 and P.data.max() <= 1 and np.abs(row.data.sum(1) - 1).max() < 1e-6
               and np.abs(col.data.sum(0) - 1).max() < 1e-6 and tuple(mu) == (1.0, 0.0) and s2 == 1.0)
        self.emit("criterion", key="c9_softmax", ok=bool(ok9))
        self.emit("criterion", key="c10_determinism", note="compare two smoke reports byte-for-byte")


def pipeline_smoke(out_dir, seed: int = 7, steps: int = 12) -> Path:
    return Smoke(out_dir, seed, steps).run()
