"""Correlation statistics and the benchmark runner.

Scores are oriented before correlating (lower-is-better metrics are negated)
so that a positive coefficient always means agreement with MOS.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import optimize, stats

from .data import DatasetSplit, PairCache, filter_ablation
from .metrics import ORIENTATION, LOWER_BETTER, BackboneWeights, canonical_metric, get_metric

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("dataset", "metric", "plcc", "srcc", "krcc", "n", "fit_a", "fit_b", "fit_c", "fit_d", "flags")

DEGENERATE = "degenerate"
LINEAR_FALLBACK = "linear_fallback"
TOO_FEW = "too_few_pairs"
LIMIT_LINEAR = "limit_linear"
LIMIT_STEP = "limit_step"
LIMIT_EXPONENTIAL = "limit_exponential"

FIT_RESTARTS = 5
MIN_FIT_PAIRS = 8


def _columns(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"score and MOS columns differ in length: {x.size} vs {y.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("scores and MOS must be finite")
    return x, y


def _constant(v: np.ndarray) -> bool:
    return bool(np.all(v == v[0]))


def srcc(scores, mos) -> float:
    """Spearman correlation (average ranks for ties); NaN for a constant column."""
    x, y = _columns(scores, mos)
    if x.size < 3:
        raise ValueError(f"SRCC needs at least 3 pairs, got {x.size}")
    if _constant(x) or _constant(y):
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


def krcc(scores, mos) -> float:
    """Kendall tau-b; NaN for a constant column."""
    x, y = _columns(scores, mos)
    if x.size < 3:
        raise ValueError(f"KRCC needs at least 3 pairs, got {x.size}")
    if _constant(x) or _constant(y):
        return float("nan")
    return float(stats.kendalltau(x, y, variant="b").statistic)


def logistic4(x, a, b, c, d):
    """``(a - b) / (1 + exp(-(x - c) / |d|)) + b``."""
    z = -(np.asarray(x, dtype=np.float64) - c) / abs(d)
    return (a - b) * 0.5 * (1.0 - np.tanh(z / 2.0)) + b


def _jac(x, a, b, c, d):
    s = logistic4(x, 1.0, 0.0, c, d)
    ds = s * (1.0 - s)
    ad = abs(d)
    sign = 1.0 if d >= 0 else -1.0
    return np.stack(
        [s, 1.0 - s, -(a - b) * ds / ad, -(a - b) * ds * (x - c) / (ad * ad) * sign],
        axis=1,
    )


@dataclass(frozen=True)
class LogisticFit:
    a: float
    b: float
    c: float
    d: float
    plcc: float
    sse: float
    flags: tuple[str, ...] = ()

    @property
    def params(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)


def _pearson(u: np.ndarray, v: np.ndarray) -> float:
    if _constant(u) or _constant(v):
        return float("nan")
    return float(stats.pearsonr(u, v).statistic)


def _profile_starts(z: np.ndarray, y: np.ndarray, keep: int = 6) -> list[tuple[float, float, float, float]]:
    """Best (c, d) cells of a grid scan, with (a, b) solved in closed form.

    For fixed (c, d) the logistic is linear in (a, b), so the residual
    surface over (c, d) can be scanned cheaply. Small noisy samples have many
    local minima (step-like fits at different thresholds); seeding the
    Levenberg-Marquardt runs from the best grid cells finds the global one.
    """
    zs = np.sort(z)
    cs = np.concatenate([np.linspace(z.min() - 0.5, z.max() + 0.5, 25), (zs[1:] + zs[:-1]) / 2])
    ds = np.geomspace(1e-3, 1e2, 31)
    s = logistic4(z[None, None, :], 1.0, 0.0, cs[:, None, None], ds[None, :, None])
    A = np.stack([s, 1.0 - s], axis=-1)  # (c, d, n, 2)
    AtA = np.einsum("cdni,cdnj->cdij", A, A) + 1e-12 * np.eye(2)
    Aty = np.einsum("cdni,n->cdi", A, y)
    coef = np.linalg.solve(AtA, Aty[..., None])[..., 0]
    resid = ((np.einsum("cdni,cdi->cdn", A, coef) - y) ** 2).sum(-1)
    out = []
    for k in np.argsort(resid, axis=None)[:keep]:
        i, j = np.unravel_index(k, resid.shape)
        out.append((float(coef[i, j, 0]), float(coef[i, j, 1]), float(cs[i]), float(ds[j])))
    return out


def _ls2(basis: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Least squares on two basis columns; returns (sse, fitted values)."""
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    fitted = basis @ coef
    return float(((fitted - y) ** 2).sum()), fitted


def _limit_fits(z: np.ndarray, y: np.ndarray) -> list[tuple[float, np.ndarray, str]]:
    """Best fits on the boundary of the logistic family.

    The four-parameter logistic has no minimiser when the data prefer a
    shape it only reaches in a limit: ``d -> inf`` (straight line),
    ``d -> 0`` (step), or ``c -> +-inf`` with ``d`` fixed (exponential tail,
    ``b + K exp(+-z / d)``). An optimiser creeping toward such a limit stops
    at an arbitrary point, so the limit fits are computed exactly and
    compete on residual.
    """
    ones = np.ones_like(z)
    out = [(*_ls2(np.stack([ones, z], 1), y), LIMIT_LINEAR)]

    zs = np.unique(z)
    best_step = None
    for t in (zs[1:] + zs[:-1]) / 2:
        cand = _ls2(np.stack([ones, (z > t).astype(float)], 1), y)
        if best_step is None or cand[0] < best_step[0]:
            best_step = cand
    # step whose threshold sits on a data value, which takes an intermediate level
    for v in zs[1:-1]:
        left, right, on = z < v, z > v, z == v
        lo_, hi_ = y[left].mean(), y[right].mean()
        mid = float(np.clip(y[on].mean(), min(lo_, hi_), max(lo_, hi_)))
        fitted = np.where(left, lo_, np.where(right, hi_, mid))
        cand = (float(((fitted - y) ** 2).sum()), fitted)
        if best_step is None or cand[0] < best_step[0]:
            best_step = cand
    if best_step is not None:
        out.append((*best_step, LIMIT_STEP))

    for sign in (1.0, -1.0):
        anchor = z.max() if sign > 0 else z.min()

        def sse(log_d, sign=sign, anchor=anchor):
            e = np.exp(sign * (z - anchor) / math.exp(log_d))
            return _ls2(np.stack([ones, e], 1), y)

        grid = np.linspace(math.log(1e-3), math.log(1e3), 61)
        vals = [sse(g)[0] for g in grid]
        k = int(np.argmin(vals))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(lambda g: sse(g)[0], bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        g = res.x if res.fun <= vals[k] else grid[k]
        out.append((*sse(g), LIMIT_EXPONENTIAL))
    return out


def plcc_fitted(scores, mos, restarts: int = FIT_RESTARTS, seed: int = 0) -> LogisticFit:
    """PLCC after a four-parameter logistic mapping of scores onto MOS.

    The fit runs on z-scored scores (so the result is invariant to affine
    rescaling of the metric) and the parameters are reported in the original
    score units. Initialisation: ``a = max mos``, ``b = min mos``, ``c = median``,
    ``d = std``, swapped ``a``/``b`` for decreasing data; ``restarts`` extra
    starts jitter ``c`` and ``d``, and a few more come from a coarse scan of
    the residual over ``(c, d)``. The lowest residual wins, including the
    family's limiting shapes (see :func:`_limit_fits`); a limit win is
    flagged (``limit_linear``, ``limit_step``, ``limit_exponential``) and the
    reported parameters are then those of the best finite fit. If no start
    converges to a finite fit, the PLCC of a linear fit is returned with a
    ``linear_fallback`` flag.
    """
    x, y = _columns(scores, mos)
    if x.size < MIN_FIT_PAIRS:
        raise ValueError(f"logistic fit needs at least {MIN_FIT_PAIRS} pairs, got {x.size}")
    nan = float("nan")
    if _constant(x) or _constant(y):
        return LogisticFit(nan, nan, nan, nan, nan, nan, (DEGENERATE,))

    mu, sd = float(x.mean()), float(x.std())
    z = (x - mu) / sd
    hi, lo = float(y.max()), float(y.min())
    if stats.spearmanr(z, y).statistic < 0:
        hi, lo = lo, hi
    rng = np.random.default_rng(seed)
    starts = [(hi, lo, float(np.median(z)), float(z.std()))]
    for _ in range(restarts):
        starts.append((hi, lo, starts[0][2] + rng.normal(0.0, 0.5), starts[0][3] * math.exp(rng.normal(0.0, 0.5))))
    starts.extend(_profile_starts(z, y))

    best = None
    for p0 in starts:
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            warnings.simplefilter("ignore")
            res = optimize.least_squares(lambda p: logistic4(z, *p) - y, p0, jac=lambda p: _jac(z, *p),
                                         method="lm", max_nfev=1000, ftol=1e-14, xtol=1e-14, gtol=1e-14)
        p = res.x
        if not np.all(np.isfinite(p)) or p[3] == 0:
            continue
        sse = float(((logistic4(z, *p) - y) ** 2).sum())
        if math.isfinite(sse) and (best is None or sse < best[1]):
            best = (p, sse)

    limit = min(_limit_fits(z, y), key=lambda t: t[0])
    flags: list[str] = []
    if best is None:
        # no finite fit converged: fall back to the best limiting shape
        sse, fitted = limit[0], limit[1]
        flags += [LINEAR_FALLBACK, limit[2]]
        a = b = cz = dz = nan
    else:
        (a, b, cz, dz), sse = best
        fitted = logistic4(z, a, b, cz, dz)
        if limit[0] < sse:
            sse, fitted = limit[0], limit[1]
            flags.append(limit[2])
    r = _pearson(fitted, y)
    if not math.isfinite(r):
        flags.append(DEGENERATE)
    return LogisticFit(float(a), float(b), mu + sd * float(cz), sd * abs(float(dz)), r, sse, tuple(flags))


@dataclass
class CorrelationReport:
    dataset: str
    metric: str
    plcc: float
    srcc: float
    krcc: float
    n: int
    fit: tuple[float, float, float, float] = (float("nan"),) * 4
    flags: tuple[str, ...] = ()

    def row(self) -> dict:
        a, b, c, d = self.fit
        return {
            "dataset": self.dataset,
            "metric": self.metric,
            "plcc": self.plcc,
            "srcc": self.srcc,
            "krcc": self.krcc,
            "n": self.n,
            "fit_a": a,
            "fit_b": b,
            "fit_c": c,
            "fit_d": d,
            "flags": ";".join(self.flags),
        }


def correlate(scores, mos, dataset: str, metric: str, orientation: str = LOWER_BETTER) -> CorrelationReport:
    """All three coefficients for one (metric, dataset) cell, scores oriented first."""
    x, y = _columns(scores, mos)
    if orientation == LOWER_BETTER:
        x = -x
    nan = float("nan")
    if x.size < 3:
        return CorrelationReport(dataset, metric, nan, nan, nan, int(x.size), flags=(TOO_FEW,))
    s, k = srcc(x, y), krcc(x, y)
    flags: list[str] = []
    if not (math.isfinite(s) and math.isfinite(k)):
        flags.append(DEGENERATE)
    if x.size < MIN_FIT_PAIRS:
        flags.append(TOO_FEW)
        return CorrelationReport(dataset, metric, nan, s, k, int(x.size), flags=tuple(flags))
    fit = plcc_fitted(x, y)
    flags.extend(f for f in fit.flags if f not in flags)
    return CorrelationReport(dataset, metric, fit.plcc, s, k, int(x.size), fit.params, tuple(flags))


# ------------------------------------------------------------------ benchmark

Scorer = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class MetricSpec:
    """A named scorer plus its orientation."""

    name: str
    scorer: Scorer
    orientation: str


def resolve_metric(
    name: str,
    weights: Optional[BackboneWeights] = None,
    checkpoints: Optional[str | Path] = None,
    allow_equal_weights: bool = False,
) -> MetricSpec:
    """``mae`` -> base metric; ``e-mae`` -> enhanced metric loaded from ``checkpoints``.

    Enhanced checkpoints are looked up as ``<dir>/e-<id>.miqm`` or
    ``<dir>/<id>/model.miqm``; ``checkpoints`` may also be a single file.
    """
    from .checkpoint import load_enhanced

    key = name.strip().lower()
    if key.startswith("e-"):
        base = canonical_metric(key[2:])
        if checkpoints is None:
            raise FileNotFoundError(f"{name}: enhanced metrics need a checkpoint directory")
        root = Path(checkpoints)
        candidates = [root] if root.is_file() else [root / f"e-{base}.miqm", root / base / "model.miqm"]
        path = next((p for p in candidates if p.is_file()), None)
        if path is None:
            raise FileNotFoundError(f"{name}: no checkpoint among {', '.join(map(str, candidates))}")
        E = load_enhanced(path, weights, allow_equal_weights=allow_equal_weights)
        return MetricSpec(f"e-{base}", lambda R, D: E(R, D).score, ORIENTATION[base])
    base = canonical_metric(key)
    fn = get_metric(base, weights, allow_equal_weights=allow_equal_weights)
    return MetricSpec(base, lambda R, D: fn(R, D).score, ORIENTATION[base])


def score_split(
    specs: Sequence[MetricSpec],
    split: DatasetSplit,
    short_side: Optional[int] = 224,
    progress: bool = False,
) -> dict[str, np.ndarray]:
    """Score every record with every metric on the same preprocessed pair."""
    cache = PairCache(short_side=short_side)
    out = {s.name: np.empty(len(split), dtype=np.float64) for s in specs}
    with torch.no_grad():
        for i, rec in enumerate(split.records):
            R, D = cache.pair(rec)
            R, D = R.unsqueeze(0), D.unsqueeze(0)
            for s in specs:
                out[s.name][i] = float(s.scorer(R, D).reshape(-1)[0])
            if progress and (i + 1) % 200 == 0:
                log.info("%s: scored %d/%d pairs", split.name, i + 1, len(split))
    return out


def benchmark(
    specs: Sequence[MetricSpec],
    datasets: Sequence[DatasetSplit],
    short_side: Optional[int] = 224,
    subsets: Optional[dict[str, Iterable]] = None,
) -> list[CorrelationReport]:
    """One :class:`CorrelationReport` per (metric, dataset), plus optional type subsets.

    ``subsets`` maps a suffix to distortion types/groups; e.g. ``{"noise": ["noise"]}``
    adds rows for ``tid2013:noise``.
    """
    reports = []
    for split in datasets:
        scores = score_split(specs, split, short_side)
        mos = np.array([r.mos for r in split.records])
        cells = [(split.name, np.arange(len(split)))]
        for suffix, types in (subsets or {}).items():
            sub = set(filter_ablation(split, types=types).records)
            idx = np.array([i for i, r in enumerate(split.records) if r in sub])
            cells.append((f"{split.name}:{suffix}", idx))
        for label, idx in cells:
            for s in specs:
                reports.append(correlate(scores[s.name][idx], mos[idx], label, s.name, s.orientation))
    return reports


def write_reports(reports: Sequence[CorrelationReport], path: str | Path, meta: Optional[dict] = None) -> dict[str, Path]:
    """CSV at ``path``, JSON next to it, and a bar-chart PNG."""
    from .plots import plot_correlations

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    js = path.with_suffix(".json")
    payload = {"meta": meta or {}, "reports": [r.row() for r in reports]}
    js.write_text(json.dumps(payload, indent=2, allow_nan=True), encoding="utf-8")
    png = plot_correlations(reports, path.with_suffix(".png"))
    return {"csv": path, "json": js, "png": png}


def read_reports(path: str | Path) -> list[CorrelationReport]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            fit = tuple(float(row[k]) for k in ("fit_a", "fit_b", "fit_c", "fit_d"))
            flags = tuple(x for x in row["flags"].split(";") if x)
            out.append(CorrelationReport(row["dataset"], row["metric"], float(row["plcc"]), float(row["srcc"]),
                                         float(row["krcc"]), int(row["n"]), fit, flags))
    return out
