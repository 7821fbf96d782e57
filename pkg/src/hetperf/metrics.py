"""Point, ranking and calibration metrics plus the time/energy Pareto front."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import InsufficientData, InvalidArgument


@dataclass(frozen=True)
class RegressionScores:
    rmse: float
    mae: float
    mape: float
    r2: float


@dataclass(frozen=True)
class RankingScores:
    spearman: float
    kendall: float
    ndcg: float
    undefined: bool = False  # set when a correlation has no variance to work with


@dataclass(frozen=True)
class CalibrationScores:
    level: float
    pice: float
    mce: float
    picp: float
    mis: float
    sharpness: float
    bins: tuple[tuple[float, float, int, float], ...] = ()  # (unc lo, unc hi, count, hit rate)


def regression_metrics(y, yhat) -> RegressionScores:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise InvalidArgument("y and yhat differ in shape")
    if y.size < 2:
        raise InsufficientData("regression metrics need at least two samples")
    err = yhat - y
    nz = y != 0
    mape = float(np.mean(np.abs(err[nz] / y[nz]))) if nz.any() else math.nan
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else -math.inf
    return RegressionScores(float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), mape, r2)


def _ndcg(y: np.ndarray, yhat: np.ndarray, k: int) -> float:
    """Tie-aware NDCG where a lower target is more relevant.

    Items with equal predictions share the mean gain of their tie group, so
    the score does not depend on input order.
    """
    span = y.max() - y.min()
    gain = 1.0 / (1.0 + (y - y.min()) / span) if span > 0 else np.ones_like(y)
    k = min(k, y.size)
    disc = 1.0 / np.log2(np.arange(2, y.size + 2))
    order = np.argsort(yhat, kind="stable")
    ranked = gain[order].copy()
    sorted_pred = yhat[order]
    start = 0
    while start < y.size:
        stop = start
        while stop + 1 < y.size and sorted_pred[stop + 1] == sorted_pred[start]:
            stop += 1
        ranked[start : stop + 1] = ranked[start : stop + 1].mean()
        start = stop + 1
    dcg = float(np.sum(ranked[:k] * disc[:k]))
    ideal = float(np.sum(np.sort(gain)[::-1][:k] * disc[:k]))
    return dcg / ideal


def ranking_metrics(y, yhat, k: int = 10) -> RankingScores:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.size < 2 or y.shape != yhat.shape:
        raise InsufficientData("ranking metrics need two or more paired samples")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    ndcg = _ndcg(y, yhat, k)
    if np.all(y == y[0]) or np.all(yhat == yhat[0]):
        return RankingScores(math.nan, math.nan, ndcg, undefined=True)
    rho = float(stats.spearmanr(y, yhat).statistic)
    tau = float(stats.kendalltau(y, yhat, variant="b").statistic)
    return RankingScores(rho, tau, ndcg)


def interval_hits(y, lo, hi) -> np.ndarray:
    y, lo, hi = (np.asarray(a, dtype=float) for a in (y, lo, hi))
    return (y >= lo) & (y <= hi)


def calibration_metrics(y, lo, hi, uncertainty, level: float, bins: int = 10) -> CalibrationScores:
    """Binned interval coverage against the nominal level.

    Samples are split into equal-mass bins by predicted uncertainty; PICE is
    the mass-weighted mean of |hit rate - level| and MCE the largest gap.
    """
    y, lo, hi, unc = (np.asarray(a, dtype=float).ravel() for a in (y, lo, hi, uncertainty))
    n = y.size
    if n == 0:
        raise InsufficientData("no samples to calibrate against")
    if not 0.0 < level < 1.0:
        raise InvalidArgument("level must be in (0, 1)")
    if bins < 1:
        raise InvalidArgument("bins must be >= 1")
    if n < bins:
        reduced = max(1, n // 5)
        warnings.warn(f"{n} samples for {bins} bins; using {reduced} bins", RuntimeWarning, stacklevel=2)
        bins = reduced
    hits = interval_hits(y, lo, hi)
    # content-based tie break keeps bin membership independent of sample order
    order = np.lexsort((y, hi, lo, unc))
    pice, mce, table = 0.0, 0.0, []
    for idx in np.array_split(order, bins):
        if idx.size == 0:
            continue
        rate = float(hits[idx].mean())
        gap = abs(rate - level)
        pice += idx.size / n * gap
        mce = max(mce, gap)
        table.append((float(unc[idx].min()), float(unc[idx].max()), int(idx.size), rate))
    delta = 1.0 - level
    width = hi - lo
    score = width + (2.0 / delta) * np.maximum(lo - y, 0.0) + (2.0 / delta) * np.maximum(y - hi, 0.0)
    return CalibrationScores(
        level=level,
        pice=float(pice),
        mce=float(mce),
        picp=float(hits.mean()),
        mis=float(score.mean()),
        sharpness=float(width.mean()),
        bins=tuple(table),
    )


def expected_calibration_error(y, lo95, hi95, uncertainty, bins: int = 10) -> float:
    """ECE for regression: PICE of the 95% intervals over equal-mass bins."""
    return calibration_metrics(y, lo95, hi95, uncertainty, 0.95, bins).pice


# --------------------------------------------------------------------------
# Pareto front


def pareto_front(points) -> np.ndarray:
    """Non-dominated (time, energy) points, both minimized, sorted by time."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise InsufficientData("pareto front of no points")
    if np.any(pts <= 0):
        raise InvalidArgument("time and energy must be positive")
    pts = np.unique(pts, axis=0)  # sorted by time, then energy
    front = []
    best_energy = math.inf
    for t, e in pts:
        if e < best_energy:
            front.append((t, e))
            best_energy = e
    return np.asarray(front)


def pareto_auc(points) -> float:
    """Area under the front's staircase, normalized by the points' bounding box.

    The staircase holds each front energy until the next front point, out to
    the largest observed time; lower is better and the range is [0, 1].
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    front = pareto_front(pts)
    t_lo, t_hi = pts[:, 0].min(), pts[:, 0].max()
    e_lo, e_hi = pts[:, 1].min(), pts[:, 1].max()
    if t_hi == t_lo or e_hi == e_lo:
        return 0.0
    edges = np.append(front[1:, 0], t_hi)
    area = float(np.sum((front[:, 1] - e_lo) * (edges - front[:, 0])))
    return area / ((t_hi - t_lo) * (e_hi - e_lo))


def bootstrap_pareto_auc(points, n_resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mean and std of the normalized AUC over seeded resamples with replacement."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    aucs = np.empty(n_resamples)
    for b in range(n_resamples):
        aucs[b] = pareto_auc(pts[rng.integers(0, len(pts), len(pts))])
    return float(aucs.mean()), float(aucs.std())


# --------------------------------------------------------------------------
# report


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


@dataclass
class MetricReport:
    regression: dict[str, RegressionScores] = field(default_factory=dict)
    ranking: dict[str, RankingScores] = field(default_factory=dict)
    calibration: dict[str, dict[str, CalibrationScores]] = field(default_factory=dict)
    pareto_front: list[tuple[float, float]] = field(default_factory=list)
    pareto_auc: tuple[float, float] | None = None
    provenance: dict[str, object] = field(default_factory=dict)

    @property
    def ece(self) -> dict[str, float]:
        return {k: v["95"].pice for k, v in self.calibration.items() if "95" in v}

    def to_dict(self) -> dict:
        out = {
            "regression": {k: asdict(v) for k, v in self.regression.items()},
            "ranking": {k: asdict(v) for k, v in self.ranking.items()},
            "calibration": {k: {lv: {f: getattr(c, f) for f in ("level", "pice", "mce", "picp", "mis", "sharpness")} for lv, c in v.items()} for k, v in self.calibration.items()},
            "ece": self.ece,
            "pareto_front": [list(p) for p in self.pareto_front],
            "pareto_auc": None if self.pareto_auc is None else {"mean": self.pareto_auc[0], "std": self.pareto_auc[1]},
            "provenance": self.provenance,
        }
        # NaN/inf are not JSON; they become null next to an explicit marker
        out["non_finite"] = sorted(_non_finite_paths(out))
        return _clean(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def reliability_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "level", "bin", "unc_lo", "unc_hi", "count", "hit_rate"])
        for target in sorted(self.calibration):
            for lv in sorted(self.calibration[target]):
                for b, (ulo, uhi, cnt, rate) in enumerate(self.calibration[target][lv].bins):
                    w.writerow([target, lv, b, repr(ulo), repr(uhi), cnt, repr(rate)])
        return buf.getvalue()

    def pareto_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "energy"])
        for t, e in self.pareto_front:
            w.writerow([repr(float(t)), repr(float(e))])
        return buf.getvalue()


def _non_finite_paths(obj, prefix: str = "") -> list[str]:
    out = []
    if isinstance(obj, float) and not math.isfinite(obj):
        out.append(prefix)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            out.extend(_non_finite_paths(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.extend(_non_finite_paths(v, f"{prefix}[{i}]"))
    return out
