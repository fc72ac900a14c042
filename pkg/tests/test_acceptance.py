"""Acceptance criteria 1-10. Each test carries a ``criterion`` marker; a summary line per criterion is
printed at the end of the run (see conftest)."""
import json

import numpy as np
import pytest

from ufm import checks, evalkit
from ufm import numerics as nx
from ufm.augment import (AugmentConfig, augment_pair, boundary_distance, gt_agreement, map_a_to_b,
                         mask_bounds)
from ufm.geometry import apply_homography_many
from ufm.matching import (MatchSet, dual_softmax, expectation_from_logits, extract_coarse_matches, match_pair,
                          refine_matches, similarity)
from ufm.model import MiaModel, load_checkpoint, route
from ufm.seeding import derive_seed
from ufm.smoke import CRITERIA, pipeline_smoke
from ufm.synthdata import gen_dataset, gen_pair, image_to_input, pair_key
from ufm.trainer import (PairSource, PipelineBudget, StageConfig, Switches, apply_plan, build_freeze_plan,
                         coarse_scores, compute_losses, merge_checkpoints, run_pipeline, run_stage, split_checkpoint)

SMALL = dict(layers=2, hidden=16, heads=2, m_top=1, n_q=16, lr=1e-3, ckpt_every=10 ** 6, tenth=False)
GEOMS = ("same-modal", "homography", "two-view")


def _draw(k: int, plus_one: bool = True):
    """k-th random (chain, mask, geometry) draw: full geometric chain, masks on."""
    pair = gen_pair(500 + k, GEOMS[k % 3], ("OPT",), 96)
    cfg = AugmentConfig(mirror=True, flip=True, rot90=True, rotate_deg=10.0, eq5_plus_one=plus_one)
    return augment_pair(pair, cfg, derive_seed(11, "c2", k))


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "gradient correctness")
def test_c1_gradcheck(record_property):
    worst = checks.run_all(instances=20, seed=0, model=True)
    for k, v in worst.items():
        record_property(k, f"{v:.1e}")
    assert set(worst) >= {"coarse", "epipolar", "cycle", "fine", "total", "model"}
    assert max(worst.values()) < 1e-3


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "GT matrix vs oracle")
def test_c2_gt_oracle(record_property):
    rows = bad = 0
    far = []
    strict_rows = strict_bad = 0
    for k in range(200):
        g = gt_agreement(_draw(k))
        rows += g["rows"]
        bad += len(g["disagree"])
        far += [d for d in g["distance"] if d > 1.0]
        ap0 = _draw(k, plus_one=False)
        g0 = gt_agreement(ap0, plus_one=False)
        inner = boundary_distance(ap0, plus_one=False) > 1.0
        strict_rows += int(inner.sum())
        strict_bad += int(inner[g0["disagree"]].sum())
    agree = 1 - bad / rows
    record_property("agreement", f"{agree:.4f}")
    record_property("far_disagreements", len(far))
    record_property("no_plus_one_inner_agreement", f"{1 - strict_bad / max(strict_rows, 1):.4f}")
    assert agree >= 0.95
    assert not far
    assert strict_bad == 0


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "mask cardinality bound")
def test_c3_mask_bounds(record_property):
    viol, sizes = 0, []
    for k in range(1000):
        pair = gen_pair(k % 10, "same-modal", ("OPT",), 96)
        ap = augment_pair(pair, AugmentConfig(rotate_deg=10.0), derive_seed(3, "c3", k))
        lo, hi = mask_bounds(ap.grid.N)
        for m in (ap.mask_a, ap.mask_b):
            sizes.append(len(m))
            viol += not (lo <= len(m) <= hi)
    record_property("range", f"[{min(sizes)},{max(sizes)}] within [{lo},{hi}]")
    assert viol == 0


# ---------------------------------------------------------------- 4

@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("acc_data")
    gen_dataset(21, 8, "opt:opt@h,sar:sar@h,opt:sar@h", d)
    return d


@pytest.mark.criterion(4, "freeze integrity and merge commutativity")
def test_c4_freeze(small_data, tmp_path, record_property):
    c1 = StageConfig(manifest=str(small_data), steps=20, seed=4, **SMALL)
    init = MiaModel(c1.model_config(), seed=derive_seed(4, "init")).state_dict()
    s1 = run_stage(c1, out_dir=tmp_path / "s1")
    base = split_checkpoint(load_checkpoint(s1.checkpoint))[0]
    frozen1 = [k for k in init if k not in set(s1.trainable) and init[k].tobytes() != base[k].tobytes()]
    assert not frozen1 and any(init[k].tobytes() != base[k].tobytes() for k in s1.trainable)
    stages = [("pretrain-2", "OPT", None), ("pretrain-2", "SAR", None), ("pretrain-3", "OPT", "SAR"),
              ("finetune-same", "SAR", None), ("finetune-cross", "OPT", "SAR")]
    changed, parts = {"pretrain-1:OPT": sum(init[k].tobytes() != base[k].tobytes() for k in s1.trainable)}, []
    for stage, x, y in stages:
        cfg = StageConfig(stage=stage, modality_a=x, modality_b=y, manifest=str(small_data), steps=20, seed=5,
                          **SMALL)
        r = run_stage(cfg, out_dir=tmp_path / f"{stage}-{x}", init_ckpt=s1.checkpoint)
        after = split_checkpoint(load_checkpoint(r.checkpoint))[0]
        tr = set(r.trainable)
        frozen_diff = [k for k in base if k not in tr and base[k].tobytes() != after[k].tobytes()]
        assert not frozen_diff, (stage, frozen_diff[:3])
        changed[f"{stage}:{x}"] = sum(base[k].tobytes() != after[k].tobytes() for k in tr)
        if stage == "pretrain-2":
            parts.append(after)
    ab, ba = merge_checkpoints(base, *parts), merge_checkpoints(base, *parts[::-1])
    assert list(ab) == list(ba) and all(ab[k].tobytes() == ba[k].tobytes() for k in ab)
    record_property("updated_tensors", changed)
    assert all(v > 0 for v in changed.values())


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5, "routing fidelity")
def test_c5_routing(record_property):
    for L in range(1, 9):
        for M in range(0, L + 1):
            for i in range(L):
                want = ("OPT", "SAR") if i < L - M else ("OPT+SAR", "OPT+SAR")
                assert route("OPT", "SAR", i, L, M) == want
    cfg = checks.tiny_model_config()
    with nx.precision(np.float64):
        m = MiaModel(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    for n, t in m.params.items():
        if n.startswith("assistant.") and n.endswith("fc2.weight"):
            t.data = rng.normal(scale=0.1, size=t.shape)
    trainable = set(apply_plan(m, build_freeze_plan("pretrain-3", "OPT", "SAR", Switches(), m.names())))
    img = lambda s: np.random.default_rng(s).normal(size=(16, 16))  # noqa: E731
    with nx.precision(np.float64):
        out = m.forward_pair(img(1), img(2), ("OPT", "SAR"))
        loss = nx.sum(out.coarse_a * out.coarse_b) + nx.sum(out.fine_a * out.fine_a)
    loss.backward()
    got = {n for n, t in m.params.items() if t.grad is not None and np.abs(t.grad).max() > 0}
    allowed = lambda n: ".attn." in n or (n.startswith("assistant.")  # noqa: E731
                                          and n.split(".")[1] in ("OPT", "SAR", "OPT+SAR"))
    assert got <= trainable and all(allowed(n) for n in got)
    keys = {n.split(".")[1] for n in got if n.startswith("assistant.")}
    assert keys == {"OPT", "SAR", "OPT+SAR"}
    assert any(".attn." in n for n in got)
    record_property("assistants_with_grad", sorted(keys))


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6, "desk-scale overfit")
def test_c6_overfit(record_property):
    pairs = [gen_pair(100 + i, "homography", ("OPT",), 96) for i in range(8)]
    cfg = StageConfig(stage="pretrain-1", steps=500, lr=1e-4, aug_pool=1, seed=1,
                      switches=Switches(augmentation=False))
    res = run_stage(cfg, pairs=pairs)
    m = res.model
    src = PairSource(pairs, cfg.augment_config(), cfg.n_q, cfg.seed, "c6", 1)
    prec, rec, better = [], [], []
    for i in range(len(pairs)):
        b = src.fixed_batch(i)
        with nx.no_grad():
            r = compute_losses(m, b, cfg.loss_weights())
        p, rc, _ = coarse_scores(r["P"].data, b.gt.matrix)
        prec.append(p)
        rec.append(rc)
        cm = extract_coarse_matches(r["P"].data, cfg.theta, b.ap.grid)
        truth = map_a_to_b(cm.pa, b.ap.chain_a, b.ap.geometry, b.ap.chain_b)
        fm = refine_matches(cm, r["out"].fine_a, r["out"].fine_b)
        e0 = np.hypot(*(cm.pb - truth).T)
        e1 = np.hypot(*(fm.pb - truth).T)
        sel = (b.gt.matrix[cm.ia, cm.ib] == 1) & np.isfinite(e0)
        better += list(e1[sel] < e0[sel])
    P, R, B = float(np.mean(prec)), float(np.mean(rec)), float(np.mean(better))
    record_property("precision", f"{P:.3f}")
    record_property("recall", f"{R:.3f}")
    record_property("fine_better", f"{B:.3f}")
    assert P >= 0.90 and R >= 0.80 and B >= 0.90


# ---------------------------------------------------------------- 7

C7_N, C7_TEST, C7_SCALE, C7_WINDOW = 64, 24, 4, 2
C7_BASE = dict(lr=3e-4, n_q=512, crop=96)


def _c7_auc(model, test, x, y):
    sets = []
    for p in test:
        c, _ = match_pair(model, p.image_a, p.image_b, (x, y), theta=0.0)
        with nx.no_grad():
            o = model.forward_pair(image_to_input(p.image_a), image_to_input(p.image_b), (x, y))
        sets.append(refine_matches(c, o.fine_a, o.fine_b, C7_WINDOW))
    return evalkit.homography_auc(sets, [p.geometry.H for p in test], (96, 96)).values[10]


@pytest.mark.criterion(7, "staged-training benefit")
def test_c7_staged(record_property):
    x, y = "OPT", "SAR"
    pairs = {x: [gen_pair(1000 + i, "homography", (x,)) for i in range(C7_N)],
             y: [gen_pair(2000 + i, "homography", (y,)) for i in range(C7_N)],
             pair_key(x, y): [gen_pair(3000 + i, "homography", (x, y)) for i in range(C7_N)]}
    test = [gen_pair(9000 + i, "homography", (x, y)) for i in range(C7_TEST)]
    budget = PipelineBudget(*(v * C7_SCALE for v in (150, 50, 100, 100)))
    base = StageConfig(**C7_BASE)
    auc = {}
    for v in (8, 1, 2, 3, 4, 5):
        model = run_pipeline(pairs, x, y, Switches.variant(v), budget, base=base, seed=0)
        auc[v] = round(_c7_auc(model, test, x, y), 2)
    record_property("auc10", auc)
    assert all(auc[8] >= auc[v] - 2 for v in (1, 2, 3, 4, 5))
    assert auc[8] >= auc[1] + 5


# ---------------------------------------------------------------- 8

@pytest.mark.criterion(8, "metric identities")
def test_c8_metrics(rng, record_property):
    worst = 0.0
    for _ in range(500):
        d = rng.uniform(-1, 1, size=(rng.integers(1, 50), 2))
        h, v, hv = evalkit.rmse_errors(d)
        worst = max(worst, abs(hv ** 2 - h ** 2 - v ** 2))
    assert worst < 1e-9
    for _ in range(100):
        c = evalkit.mma_from_errors([rng.exponential(3, size=rng.integers(0, 40)) for _ in range(3)])
        assert np.all(np.diff(c.values) >= 0)
    H = np.array([[1.02, 0.03, 4.0], [-0.02, 0.98, -3.0], [1e-4, -2e-4, 1.0]])
    pa = rng.uniform(0, 96, size=(40, 2))
    rep = evalkit.homography_auc(MatchSet.from_arrays(pa, apply_homography_many(H, pa)), H, (96, 96))
    assert all(abs(rep[t] - 100.0) <= 1e-6 for t in (3, 5, 10))
    assert evalkit.auc_from_errors([5.0]) == {3: 0.0, 5: 0.0, 10: 50.0}
    np.testing.assert_allclose(evalkit.mma_from_errors([np.array([0.5, 1.5, 2.5])], (1, 2, 3)).values,
                               [1 / 3, 2 / 3, 1.0])
    assert evalkit.rmse_errors(np.array([[0.6, 0.8]])) == pytest.approx((0.6, 0.8, 1.0), abs=1e-12)
    h, v, hv = evalkit.rmse_errors(np.array([[0.999, 0.0], [0.0, 0.0]]))
    assert round(h, 4) == 0.7064 and v == 0.0 and round(hv, 4) == 0.7064
    record_property("hv_identity_err", f"{worst:.1e}")


# ---------------------------------------------------------------- 9

@pytest.mark.criterion(9, "dual-softmax and expectation")
def test_c9_softmax(rng, record_property):
    worst = 0.0
    for _ in range(50):
        n, m = rng.integers(2, 30, size=2)
        fa, fb = rng.normal(size=(n, 8)), rng.normal(size=(m, 8))
        S = similarity(nx.as_tensor(fa), nx.as_tensor(fb)).data
        P, row, col = dual_softmax(S, 0.1, return_factors=True)
        assert P.data.min() >= 0 and P.data.max() <= 1
        worst = max(worst, np.abs(row.data.sum(1) - 1).max(), np.abs(col.data.sum(0) - 1).max())
        logits = rng.normal(size=(5, 7))
        coords = rng.uniform(0, 10, size=(7, 2))
        for lg in logits:
            _, _, heat = expectation_from_logits(lg, coords)
            worst = max(worst, abs(float(np.sum(heat)) - 1))
    assert worst <= 1e-6
    mu, s2, _ = expectation_from_logits(np.zeros(2), np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert tuple(mu) == (1.0, 0.0) and s2 == 1.0
    record_property("max_normalization_err", f"{worst:.1e}")


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10, "determinism")
def test_c10_determinism(tmp_path, record_property):
    ra = pipeline_smoke(tmp_path / "a", seed=7)
    rb = pipeline_smoke(tmp_path / "b", seed=7)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.suffix in (".ckpt", ".matches", ".csv", ".jsonl"))
    assert any(f.suffix == ".ckpt" for f in files) and any(f.suffix == ".matches" for f in files)
    diff = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    assert not diff, diff
    assert ra.read_bytes() == rb.read_bytes()
    keys = {r["key"] for r in map(json.loads, ra.read_text().splitlines()) if r["kind"] == "criterion"}
    assert keys == set(CRITERIA)
    record_property("files_compared", len(files))
