"""Randomized 64-bit gradient checks for the training losses and the model forward pass."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .losses import (forward_expectation, loss_coarse, loss_cycle, loss_epipolar, loss_fine,
                     loss_reprojection, loss_total)
from .matching import dual_softmax, similarity
from .model import MiaModel, ModelConfig
from .seeding import rng_for

TOL = 1e-3
LOSS_NAMES = ("coarse", "epipolar", "cycle", "fine", "total")


def _rand_F(rng) -> np.ndarray:
    F = rng.normal(size=(3, 3))
    u, s, vt = np.linalg.svd(F)
    return u @ np.diag([s[0], s[1], 0.0]) @ vt


def _fine_instance(rng, h=6, w=6, c=4, n=3):
    fa = rng.normal(size=(h, w, c)) * 0.7
    fb = rng.normal(size=(h, w, c)) * 0.7
    # interior full-res queries keep the backward bilinear weights away from cell edges
    q = np.c_[rng.uniform(2, 2 * w - 4, n), rng.uniform(2, 2 * h - 4, n)].round()
    return fa, fb, q


def check_loss(name: str, seed: int) -> float:
    """Max relative gradcheck error of one loss on one random instance."""
    rng = rng_for(seed, "gradcheck", name)
    if name == "coarse":
        n = int(rng.integers(4, 7))
        S = rng.normal(size=(n, n))
        gt = (rng.random((n, n)) < 0.2).astype(float)
        return nx.gradcheck(lambda s: loss_coarse(dual_softmax(s, 0.5), gt), S)
    fa, fb, q = _fine_instance(rng)
    if name == "epipolar":
        F = _rand_F(rng)
        return nx.gradcheck(lambda a: nx.sum(loss_epipolar(forward_expectation(a, nx.as_tensor(fb), q)[0], q, F)[0]), fa)
    if name == "cycle":
        def f(b):
            h12, _ = forward_expectation(nx.as_tensor(fa), b, q)
            return nx.sum(loss_cycle(h12, q, nx.as_tensor(fa), b))
        return nx.gradcheck(f, fb)
    # sigma^2 is a constant weight in the fine loss, so it is frozen at the base point
    with nx.no_grad(), nx.precision(np.float64):
        s2 = forward_expectation(nx.as_tensor(fa), nx.as_tensor(fb), q)[1].data
    if name == "fine":
        tgt = q + rng.normal(size=q.shape)

        def f(a):
            h12, _ = forward_expectation(a, nx.as_tensor(fb), q)
            return loss_fine(s2, loss_reprojection(h12, tgt), loss_cycle(h12, q, a, nx.as_tensor(fb)), 1.0)
        return nx.gradcheck(f, fa)
    if name == "total":
        n = 4
        S = rng.normal(size=(n, n))
        gt = np.eye(n)
        tgt = q + rng.normal(size=q.shape)

        def f(a):
            h12, _ = forward_expectation(a, nx.as_tensor(fb), q)
            lf = loss_fine(s2, loss_reprojection(h12, tgt), loss_cycle(h12, q, a, nx.as_tensor(fb)))
            sa = nx.reshape(nx.gather(nx.reshape(a, (-1, a.shape[-1])), np.arange(n), axis=0), (n, -1))
            lc = loss_coarse(dual_softmax(nx.matmul(sa, nx.transpose(sa)) + S, 0.5), gt)
            return loss_total(lc, lf, 1.0, 0.5)
        return nx.gradcheck(f, fa)
    raise ValueError(f"unknown loss '{name}'")


def tiny_model_config() -> ModelConfig:
    return ModelConfig(L=2, d=16, heads=2, d_ffn=16, d_fine=8, M=1, enc_channels=(4, 8),
                       fine_stop_grad=False)


def check_model(seed: int, size: int = 16, components: int = 24) -> float:
    """Gradcheck of a random linear functional of every model output wrt a random parameter subset."""
    rng = rng_for(seed, "gradcheck", "model")
    with nx.precision(np.float64):
        m = MiaModel(tiny_model_config(), seed=seed, dtype=np.float64)
        for name, t in m.params.items():  # assistants start at zero; wake them so their path is exercised
            if t.data.std() == 0 and name.endswith("weight"):
                t.data = rng.normal(scale=0.1, size=t.shape)
        a, b = rng.normal(size=(2, size, size))
        mods = ("OPT", "SAR") if seed % 2 else ("OPT", "OPT")
        out = m.forward_pair(a, b, mods)
        wts = [rng.normal(size=t.shape) for t in (out.coarse_a, out.coarse_b, out.fine_a, out.fine_b)]

        def f():
            o = m.forward_pair(a, b, mods)
            ts = (o.coarse_a, o.coarse_b, o.fine_a, o.fine_b)
            tot = nx.sum(ts[0] * wts[0])
            for t, wt in zip(ts[1:], wts[1:]):
                tot = tot + nx.sum(t * wt)
            return tot + nx.sum(similarity(o.coarse_a, o.coarse_b))
        return nx.parameters_gradcheck(f, list(m.params.values()), components=components, seed=seed)


def run_all(instances: int = 20, seed: int = 0, model: bool = True) -> dict[str, float]:
    """name -> worst relative error over ``instances`` random instances."""
    out = {n: max(check_loss(n, seed + i) for i in range(instances)) for n in LOSS_NAMES}
    if model:
        out["model"] = max(check_model(seed + i) for i in range(instances))
    return out
