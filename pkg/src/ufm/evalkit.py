"""Evaluation protocols: MMA curves, homography AUC, threshold accuracy, RMSE triplet, CSV reports."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import GeometryError, corner_error, estimate_homography_ransac
from .matching import MatchSet

log = logging.getLogger(__name__)

MMA_THRESHOLDS = tuple(range(1, 11))
AUC_THRESHOLDS = (3, 5, 10)
ACC_THRESHOLDS = (1, 3, 5)
REPORT_HEADER = ("metric", "threshold", "value")


class EvalError(ValueError):
    pass


@dataclass
class MmaCurve:
    thresholds: tuple
    values: np.ndarray
    n_pairs: int = 0
    empty: bool = False  # warning flag: some pair had no matches
    out_of_frame: int = 0

    def rows(self, name: str = "mma") -> list[tuple]:
        return [(name, t, float(v)) for t, v in zip(self.thresholds, self.values)]


@dataclass
class AucReport:
    values: dict  # threshold -> percentage
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failures: int = 0

    def __getitem__(self, t):
        return self.values[t]

    def rows(self, name: str = "auc") -> list[tuple]:
        return [(name, t, float(v)) for t, v in sorted(self.values.items())]


def _gt_errors(matches: MatchSet, gt_map: Callable) -> tuple[np.ndarray, int]:
    """Per-match distance to the true b-side point; out-of-frame a-points are dropped and counted."""
    if len(matches) == 0:
        return np.zeros(0), 0
    truth = np.asarray(gt_map(matches.pa), dtype=np.float64).reshape(-1, 2)
    ok = np.isfinite(truth).all(axis=1)
    return np.linalg.norm(truth[ok] - matches.pb[ok], axis=1), int((~ok).sum())


def mma_from_errors(errors: Sequence[np.ndarray], thresholds=MMA_THRESHOLDS) -> MmaCurve:
    """Macro average: fraction below t per pair, then mean over pairs."""
    th = tuple(thresholds)
    if not errors:
        return MmaCurve(th, np.zeros(len(th)), 0, True)
    per, empty = [], False
    for e in errors:
        e = np.asarray(e, dtype=np.float64)
        if e.size == 0:
            empty = True
            per.append(np.zeros(len(th)))
        else:
            per.append(np.array([(e < t).mean() for t in th]))
    return MmaCurve(th, np.mean(per, axis=0), len(per), empty)


def mma(matches, gt_map, thresholds=MMA_THRESHOLDS) -> MmaCurve:
    """MMA for one MatchSet or a list of (MatchSet, gt_map) pairs."""
    if isinstance(matches, MatchSet):
        matches, gt_map = [matches], [gt_map]
    errs, lost = [], 0
    for m, g in zip(matches, gt_map):
        e, k = _gt_errors(m, g)
        errs.append(e)
        lost += k
    curve = mma_from_errors(errs, thresholds)
    curve.out_of_frame = lost
    if curve.empty:
        log.warning("mma: at least one pair has no matches")
    return curve


def auc_from_errors(errors, thresholds=AUC_THRESHOLDS) -> dict:
    """Area under the cumulative error curve on [0, t], normalized by t, in percent.

    For each error e the recall curve is the step 1[e <= s], whose integral over [0, t] is max(t - e, 0).
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if e.size == 0:
        return {t: 0.0 for t in thresholds}
    e = np.where(np.isfinite(e), e, np.inf)
    return {t: float(np.mean(np.clip(t - e, 0.0, None)) / t * 100.0) for t in thresholds}


def estimate_pair_error(matches: MatchSet, H_gt, size: tuple[int, int], seed: int = 0,
                        iters: int = 2000, thresh: float = 3.0) -> float:
    """Corner error of the RANSAC homography; inf when estimation fails."""
    w, h = size
    if len(matches) < 4:
        return np.inf
    try:
        H, _ = estimate_homography_ransac(matches.pa, matches.pb, iters=iters, inlier_thresh=thresh, seed=seed)
    except GeometryError:
        return np.inf
    err = corner_error(H, H_gt, w, h)
    return err if np.isfinite(err) else np.inf


def homography_auc(matches, H_gt, size, thresholds=AUC_THRESHOLDS, seed: int = 0) -> AucReport:
    """matches/H_gt may be single items or parallel lists; ``size`` = (width, height)."""
    if isinstance(matches, MatchSet):
        matches, H_gt = [matches], [H_gt]
    errs = np.array([estimate_pair_error(m, H, size, seed) for m, H in zip(matches, H_gt)])
    return AucReport(auc_from_errors(errs, thresholds), errs, int(np.isinf(errs).sum()))


def threshold_accuracy(matches, gt_map, thresholds=ACC_THRESHOLDS) -> dict:
    """Percentage of matches (pooled over pairs) with error below each threshold."""
    if isinstance(matches, MatchSet):
        matches, gt_map = [matches], [gt_map]
    e = np.concatenate([_gt_errors(m, g)[0] for m, g in zip(matches, gt_map)] or [np.zeros(0)])
    if e.size == 0:
        return {t: 0.0 for t in thresholds}
    return {t: float((e < t).mean() * 100.0) for t in thresholds}


def rmse_errors(matches, gt_map=None, prefilter: bool = True) -> tuple[float, float, float]:
    """(H, V, HV) root-mean-square errors over matches whose |dx| and |dy| are both below 1 px.

    ``matches`` is a MatchSet (with ``gt_map``) or an (n, 2) array of (dx, dy).
    """
    if isinstance(matches, MatchSet):
        truth = np.asarray(gt_map(matches.pa), dtype=np.float64).reshape(-1, 2)
        d = matches.pb - truth
    else:
        d = np.asarray(matches, dtype=np.float64).reshape(-1, 2)
    d = d[np.isfinite(d).all(axis=1)]
    if prefilter:
        d = d[(np.abs(d[:, 0]) < 1) & (np.abs(d[:, 1]) < 1)]
    if len(d) == 0:
        raise EvalError("rmse: no matches left after filtering")
    h2, v2 = float(np.mean(d[:, 0] ** 2)), float(np.mean(d[:, 1] ** 2))
    return float(np.sqrt(h2)), float(np.sqrt(v2)), float(np.sqrt(h2 + v2))


# --------------------------------------------------------------------- reports

def write_report(path, rows: Sequence[tuple]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(REPORT_HEADER)
        for m, t, v in rows:
            wr.writerow([m, t, f"{v:.6f}"])
    return p


def read_report(path) -> list[tuple[str, str, float]]:
    with Path(path).open() as fh:
        rd = csv.reader(fh)
        head = next(rd, None)
        if tuple(head or ()) != REPORT_HEADER:
            raise EvalError(f"{path}: not a metric report")
        return [(m, t, float(v)) for m, t, v in rd]


def format_table(rows: Sequence[tuple]) -> str:
    lines = [f"{'metric':<10} {'threshold':>9} {'value':>12}"]
    lines += [f"{m:<10} {str(t):>9} {v:>12.4f}" for m, t, v in rows]
    return "\n".join(lines)
