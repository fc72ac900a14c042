"""`ufm` command line: data generation, augmentation, staged training, matching and evaluation.

Exit codes: 0 ok, 1 usage error, 2 data/format/precondition error, 3 numeric failure.
Errors are also written to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("ufm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; route those through the usage exit code instead."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    return code


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got '{text}'") from None
    return w, h


# ------------------------------------------------------------------ commands

def cmd_gen_data(a) -> int:
    from .synthdata import gen_dataset
    man = gen_dataset(a.seed, a.pairs, a.modes, a.out, a.size)
    print(f"wrote {len(man)} pairs to {Path(a.out) / 'manifest.txt'}")
    return EXIT_OK


def cmd_augment(a) -> int:
    from .augment import AugmentConfig, augment_pair, build_gt_matrix
    from .seeding import derive_seed
    from .synthdata import load_manifest, write_pgm
    man = load_manifest(a.manifest)
    cfg = AugmentConfig(crop_h=a.crop, crop_w=a.crop, mirror=a.mirror, flip=a.mirror, rot90=a.rot90,
                        rotate_deg=a.rotate_deg, noise=a.noise, mask=not a.no_mask, eq5_plus_one=not a.no_plus_one)
    idx = a.index if a.index else range(len(man))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in idx:
        e = man.entries[i]
        ap = augment_pair(man.load(i), cfg, derive_seed(a.seed, "augment", e.id))
        write_pgm(out / f"{e.id}_a.pgm", ap.I_a)
        write_pgm(out / f"{e.id}_b.pgm", ap.I_b)
        (out / f"{e.id}_a.chain").write_text(ap.chain_a.serialize())
        (out / f"{e.id}_b.chain").write_text(ap.chain_b.serialize())
        build_gt_matrix(ap).write(out / f"{e.id}.gt")
    print(f"augmented {len(idx)} pairs into {out}")
    return EXIT_OK


_STAGE_FLAGS = ("steps", "lr", "alpha", "beta", "lam", "n_q", "tau", "theta", "coarse_norm", "layers", "hidden",
                "heads", "m_top", "rotate_deg", "accum", "ckpt_every", "weight_decay")


def _stage_config(a, stage: str, x: str, y: str | None):
    from .trainer import load_config, stage_config_from
    values = load_config(a.config) if a.config else {}
    # flags > config file > defaults
    flags = {("lambda" if k == "lam" else k): getattr(a, k) for k in _STAGE_FLAGS if getattr(a, k) is not None}
    for k in ("A", "B", "C", "D", "E"):
        if getattr(a, f"ablate_{k}"):
            flags[f"ablate_{k}"] = True
    if a.manifest is not None:
        flags["manifest"] = a.manifest
    if a.full_data:
        flags["tenth"] = False
    values.update(flags)
    values.update(stage=stage, modality_a=x, seed=a.seed)
    if y is not None:
        values["modality_b"] = y
    return stage_config_from(values)


def _train(a, stage: str, x: str, y: str | None) -> int:
    from .plotting import plot_losses
    from .trainer import run_stage
    cfg = _stage_config(a, stage, x, y)
    out = Path(a.out)
    res = run_stage(cfg, out_dir=out, init_ckpt=a.init, log_path=out / f"{stage}.log" if a.log else None)
    if res.rows:
        plot_losses(res.rows, out / f"{stage}_loss.png", title=stage)
    last = res.rows[-1] if res.rows else {}
    print(json.dumps({"stage": stage, "checkpoint": str(res.checkpoint), "steps": len(res.rows),
                      "trainable": len(res.trainable), "total": last.get("total")}))
    return EXIT_OK


def cmd_pretrain(a) -> int:
    if a.stage == 3 and not a.modality_b:
        raise UsageError("pretrain --stage 3 needs --modality-b")
    if a.stage in (2, 3) and a.init is None and not a.ablate_D:
        from .trainer import PrerequisiteError
        raise PrerequisiteError(f"pretrain stage {a.stage} needs a stage-1 checkpoint (pass --init)")
    x = "OPT" if a.stage == 1 else a.modality
    return _train(a, f"pretrain-{a.stage}", x, a.modality_b if a.stage == 3 else None)


def cmd_finetune(a) -> int:
    if a.mode == "cross" and not a.modality_b:
        raise UsageError("finetune --mode cross needs --modality-b")
    return _train(a, f"finetune-{a.mode}", a.modality, a.modality_b if a.mode == "cross" else None)


def cmd_merge(a) -> int:
    from .model import load_checkpoint, save_checkpoint
    from .trainer import merge_checkpoints, split_checkpoint
    base = split_checkpoint(load_checkpoint(a.base))[0]
    parts = [split_checkpoint(load_checkpoint(p))[0] for p in a.parts]
    save_checkpoint(a.out, merge_checkpoints(base, *parts))
    print(f"merged {len(parts)} checkpoints into {a.out}")
    return EXIT_OK


def cmd_match(a) -> int:
    from .matching import match_pair
    from .model import model_from_checkpoint
    from .synthdata import load_manifest, read_pgm
    model = model_from_checkpoint(a.ckpt)
    kw = dict(theta=a.theta, window=a.window)
    if a.manifest:
        man = load_manifest(a.manifest)
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, e in enumerate(man.entries):
            p = man.load(i)
            _, fine = match_pair(model, p.image_a, p.image_b, (p.modality_a.value, p.modality_b.value), **kw)
            fine.write(out / f"{e.id}.matches")
        print(f"matched {len(man)} pairs into {out}")
        return EXIT_OK
    if not (a.a and a.b):
        raise UsageError("match needs --a and --b, or --manifest")
    coarse, fine = match_pair(model, read_pgm(a.a), read_pgm(a.b), (a.modality, a.modality_b or a.modality), **kw)
    (coarse if a.coarse else fine).write(a.out)
    print(f"{len(fine)} matches written to {a.out}")
    return EXIT_OK


def _eval_inputs(a):
    """-> (match sets, geometries, image size)."""
    from .matching import MatchSet
    from .synthdata import DataFormatError, load_manifest, parse_geometry
    if a.manifest:
        man = load_manifest(a.manifest)
        mdir = Path(a.matches_dir or "")
        if not a.matches_dir:
            raise UsageError("eval --manifest needs --matches-dir")
        sets, geoms = [], []
        for i, e in enumerate(man.entries):
            f = mdir / f"{e.id}.matches"
            if not f.exists():
                continue
            p = man.load(i)
            sets.append(MatchSet.read(f))
            geoms.append(p.geometry)
        if not sets:
            raise DataFormatError(f"no .matches files for this manifest in {mdir}")
        h, w = man.load(0).image_a.shape
        return sets, geoms, (w, h)
    if not a.matches or not a.gt:
        raise UsageError("eval needs --matches and --gt, or --manifest with --matches-dir")
    if len(a.matches) != len(a.gt):
        raise UsageError("eval: --matches and --gt need the same number of files")
    sets = [MatchSet.read(f) for f in a.matches]
    geoms = []
    for f in a.gt:
        if not Path(f).exists():
            raise DataFormatError(f"ground-truth file not found: {f}")
        geoms.append(parse_geometry(Path(f).read_text(), a.size))
    return sets, geoms, a.size


def cmd_eval(a) -> int:
    from . import evalkit
    from .plotting import plot_bars, plot_curve, plot_error_cdf
    sets, geoms, size = _eval_inputs(a)
    maps = [g.map_points for g in geoms]
    fig = None
    if a.metric == "mma":
        curve = evalkit.mma(sets, maps)
        rows = curve.rows()
        fig = lambda p: plot_curve(curve.thresholds, curve.values, p)  # noqa: E731
    elif a.metric == "auc":
        if not all(hasattr(g, "H") for g in geoms):
            from .synthdata import DataFormatError
            raise DataFormatError("auc needs homography ground truth")
        rep = evalkit.homography_auc(sets, [g.H for g in geoms], size)
        rows = rep.rows()
        fig = lambda p: plot_error_cdf(rep.errors, p)  # noqa: E731
    elif a.metric == "acc":
        acc = evalkit.threshold_accuracy(sets, maps)
        rows = [("acc", t, v) for t, v in acc.items()]
        fig = lambda p: plot_bars([f"<{t}px" for t in acc], list(acc.values()), p, ylabel="%")  # noqa: E731
    else:
        # residuals pooled over all files
        d = np.concatenate([m.pb - np.asarray(g(m.pa), dtype=np.float64).reshape(-1, 2) for m, g in zip(sets, maps)])
        hvs = evalkit.rmse_errors(d)
        rows = [("rmse", k, v) for k, v in zip(("H", "V", "HV"), hvs)]
        fig = lambda p: plot_bars(["H", "V", "HV"], list(hvs), p, ylabel="px")  # noqa: E731
    print(evalkit.format_table(rows))
    if a.metric == "rmse":
        print(" ".join(f"{v:.6f}" for _, _, v in rows))
    if a.out:
        path = evalkit.write_report(a.out, rows)
        fig(path.with_suffix(".png"))
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .checks import TOL, run_all
    res = run_all(a.instances, a.seed, model=not a.no_model)
    print(json.dumps({k: float(f"{v:.3e}") for k, v in res.items()}))
    bad = [k for k, v in res.items() if not v < TOL]
    if bad:
        return _fail(EXIT_NUMERIC, "gradcheck", f"relative error >= {TOL} for: {', '.join(bad)}")
    return EXIT_OK


def cmd_inspect(a) -> int:
    from .model import infer_config, load_checkpoint
    from .trainer import split_checkpoint
    state = load_checkpoint(a.ckpt)
    params, opt = split_checkpoint(state)
    for k, v in params.items():
        print(f"{k:<48} {str(tuple(v.shape)):<16} {v.dtype}")
    cfg = infer_config(params)
    n = sum(int(np.prod(v.shape)) for v in params.values())
    print(f"tensors {len(params)}  parameters {n}  optimizer-entries {len(opt)}")
    print(f"config L={cfg.L} d={cfg.d} d_ffn={cfg.d_ffn} d_fine={cfg.d_fine} enc={cfg.enc_channels}")
    return EXIT_OK


def cmd_smoke(a) -> int:
    from .smoke import pipeline_smoke
    print(pipeline_smoke(a.out, a.seed, a.steps))
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _train_flags(p):
    p.add_argument("--manifest", help="dataset directory or manifest file")
    p.add_argument("--config", help="key = value config file; flags override its keys")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--out", default="ckpt", help="checkpoint directory (default ckpt/)")
    p.add_argument("--log", action="store_true", help="append per-step losses to <out>/<stage>.log")
    p.add_argument("--full-data", action="store_true", help="fine-tune on all pairs instead of a tenth")
    for name, typ in (("steps", int), ("lr", float), ("alpha", float), ("beta", float), ("lam", float),
                      ("n-q", int), ("tau", float), ("theta", float), ("layers", int), ("hidden", int),
                      ("heads", int), ("m-top", int), ("rotate-deg", float), ("accum", int),
                      ("ckpt-every", int), ("weight-decay", float)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--coarse-norm", choices=("entries", "points"), default=None)
    for k, what in (("A", "augmentation"), ("B", "generic FFN"), ("C", "assistant FFN"),
                    ("D", "pre-trained init"), ("E", "fine-tuning")):
        p.add_argument(f"--ablate-{k}", action="store_true", help=f"switch off {what}")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="ufm", description="Multimodal image matching: data, training, matching, evaluation.")
    p.add_argument("--version", action="version", version=f"ufm {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic pair dataset")
    s.add_argument("--pairs", type=int, default=64)
    s.add_argument("--modes", default="opt:opt", help="comma list of modA:modB[@h|@tv]")
    s.add_argument("--size", type=int, default=96, help="image side in pixels")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("augment", parents=[common], help="augment manifest pairs; write PGMs, chains, GT matrices")
    s.add_argument("--manifest", required=True)
    s.add_argument("--index", type=int, nargs="*", help="pair indices (default all)")
    s.add_argument("--crop", type=int, default=64)
    s.add_argument("--rotate-deg", type=float, default=10.0)
    s.add_argument("--mirror", action="store_true")
    s.add_argument("--rot90", action="store_true")
    s.add_argument("--noise", type=float, default=8.0)
    s.add_argument("--no-mask", action="store_true")
    s.add_argument("--no-plus-one", action="store_true", help="exact patch index rounding")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_augment)

    s = sub.add_parser("pretrain", parents=[common], help="run one pre-training stage")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--modality", default="OPT")
    s.add_argument("--modality-b")
    _train_flags(s)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="fine-tune on same- or cross-modal pairs")
    s.add_argument("--mode", choices=("same", "cross"), required=True)
    s.add_argument("--modality", default="OPT")
    s.add_argument("--modality-b")
    _train_flags(s)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("merge", parents=[common], help="merge per-modality stage-2 checkpoints")
    s.add_argument("--base", required=True, help="stage-1 checkpoint")
    s.add_argument("--parts", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_merge)

    s = sub.add_parser("match", parents=[common], help="match one image pair or a whole manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--modality", default="OPT")
    s.add_argument("--modality-b")
    s.add_argument("--manifest")
    s.add_argument("--theta", type=float, default=0.2, help="coarse confidence threshold")
    s.add_argument("--window", type=int, default=None, help="fine search radius in fine cells (default global)")
    s.add_argument("--coarse", action="store_true", help="write coarse instead of refined matches")
    s.add_argument("--out", required=True, help="match file, or directory with --manifest")
    s.set_defaults(fn=cmd_match)

    s = sub.add_parser("eval", parents=[common], help="score match files against ground truth")
    s.add_argument("--metric", choices=("mma", "auc", "acc", "rmse"), required=True)
    s.add_argument("--matches", nargs="+")
    s.add_argument("--gt", nargs="+", help="geometry files, one per match file")
    s.add_argument("--manifest")
    s.add_argument("--matches-dir")
    s.add_argument("--size", type=_size, default=(96, 96), help="image WxH for corner errors")
    s.add_argument("--out", help="CSV report; a figure is written next to it")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of losses and model")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--no-model", action="store_true")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("inspect-ckpt", parents=[common], help="list checkpoint tensors")
    s.add_argument("ckpt")
    s.set_defaults(fn=cmd_inspect)

    for name in ("pipeline-smoke", "pipeline_smoke"):
        s = sub.add_parser(name, parents=[common], help="end-to-end smoke run" if name == "pipeline-smoke"
                           else argparse.SUPPRESS)
        s.add_argument("--out", default="smoke")
        s.add_argument("--steps", type=int, default=12)
        s.set_defaults(fn=cmd_smoke, seed=7)
    return p


def main(argv=None) -> int:
    from .augment import AugmentError
    from .evalkit import EvalError
    from .geometry import GeometryError
    from .model import RoutingError
    from .synthdata import DataFormatError
    from .trainer import ConfigError, MergeConflict, PrerequisiteError, TrainingAbort

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if not getattr(a, "command", None):
            raise UsageError("no command given (see ufm --help)")
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(a.threads)
    except ImportError:
        limit = nullcontext()
    try:
        with limit:
            return a.fn(a)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (TrainingAbort, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", f"non-finite value: {exc}")
    except PrerequisiteError as exc:
        return _fail(EXIT_DATA, "precondition", str(exc))
    except (DataFormatError, AugmentError, EvalError, GeometryError, MergeConflict, RoutingError,
            FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
