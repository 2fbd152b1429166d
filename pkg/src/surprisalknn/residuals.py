"""Feature deviations: bootstrap lower bounds, hold-one-out residuals and their fixed-point iteration."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import Dataset, FeatureKind
from .engine import Model, aggregate, inverse_distance_weights, order_candidates, prefer_covering
from .errors import InfeasibleError, UsageError
from .metric import (
    NOMINAL_EPSILON,
    DeviationMode,
    DeviationVector,
    MetricConfig,
    combine_leave_one_out,
)

log = logging.getLogger(__name__)

DEFAULT_TOL = 0.05
DEFAULT_MAX_ITERS = 8
DEFAULT_CASE_CAP = 2000
DEGENERATE_SCALE = 1e-6


def _smallest_gap(values: np.ndarray, period: float | None = None) -> float:
    u = np.unique(values)
    if u.size < 2:
        return math.nan
    gaps = np.diff(u)
    if period is not None:
        gaps = np.append(gaps, period - (u[-1] - u[0]))
    gaps = gaps[gaps > 0]
    return float(gaps.min()) if gaps.size else math.nan


def _smoothed_identity(m: int) -> np.ndarray:
    return (np.eye(m) + NOMINAL_EPSILON) / (1.0 + m * NOMINAL_EPSILON)


def bootstrap_deviations(data: Dataset | Model) -> DeviationVector:
    """Initial deviations from the data alone.

    Numeric features take the smallest nonzero gap between observed values
    (circular gaps for cyclic features). A feature with fewer than two
    distinct values falls back to ``1e-6 * |value|`` (or ``1e-6``) and is
    flagged as degenerate. Nominal features start from a smoothed identity
    confusion matrix and a residual of one miss in ``n`` observations.
    """
    ds = data.dataset if isinstance(data, Model) else data
    residuals, confusion, degenerate = [], [], []
    for j, f in enumerate(ds.schema):
        col = ds.values[:, j]
        known = col[~np.isnan(col)]
        if f.kind is FeatureKind.NOMINAL:
            m = len(ds.symbols[j])
            confusion.append(_smoothed_identity(m))
            residuals.append(max(NOMINAL_EPSILON, 1.0 / max(known.size, 1)))
            degenerate.append(m < 2)
            continue
        confusion.append(None)
        gap = _smallest_gap(known, f.period if f.kind is FeatureKind.CYCLIC else None)
        if math.isnan(gap):
            ref = abs(float(known[0])) if known.size else 0.0
            gap = DEGENERATE_SCALE * ref if ref > 0 else DEGENERATE_SCALE
            degenerate.append(True)
            log.warning("feature %r has fewer than two distinct values; deviation fallback %g", f.name, gap)
        else:
            degenerate.append(False)
        residuals.append(gap)
    r = np.array(residuals, dtype=float)
    return DeviationVector(residuals=r, confusion=tuple(confusion), floor=r.copy(), degenerate=tuple(degenerate))


@dataclass(frozen=True, eq=False)
class ResidualReport:
    """Outcome of a hold-one-out pass.

    ``case_residuals`` holds the per-case absolute error (0/1 for nominal
    features) of every evaluated cell and NaN elsewhere; ``rows`` lists the
    evaluated case rows.
    """

    feature_names: tuple[str, ...]
    residuals: np.ndarray
    case_residuals: np.ndarray
    confusion: tuple[np.ndarray | None, ...]
    rows: np.ndarray
    unpredictable: tuple[str, ...] = ()
    trace: tuple[float, ...] = ()

    def deviations(self, previous: DeviationVector) -> DeviationVector:
        return previous.with_residuals(self.residuals, self.confusion)

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["feature", "residual"])
        for name, r in zip(self.feature_names, self.residuals):
            w.writerow([name, repr(float(r))])
        if self.trace:
            w.writerow([])
            w.writerow(["iteration", "max_relative_change"])
            for i, t in enumerate(self.trace, 1):
                w.writerow([i, repr(float(t))])
        return buf.getvalue()


def _prediction_error(kind: FeatureKind, period, actual: float, predicted: float) -> float:
    if kind is FeatureKind.NOMINAL:
        return float(actual != predicted)
    d = abs(actual - predicted)
    if kind is FeatureKind.CYCLIC:
        d = math.fmod(d, period)
        d = min(d, period - d)
    return d


def holdout_residuals(
    model: Model,
    *,
    strict: bool = True,
    case_cap: int = DEFAULT_CASE_CAP,
    seed: int = 0,
    rows=None,
) -> ResidualReport:
    """Hold each case out and predict each of its known features from its other known features.

    The global residual of a feature is the mean absolute error over the
    evaluated cases, clamped below by the bootstrap floor. Models larger
    than ``case_cap`` are estimated on a seeded uniform subsample. A feature
    that can never be predicted raises :class:`InfeasibleError` when
    ``strict``, otherwise it keeps its current deviation and is listed in
    ``unpredictable``.
    """
    ds = model.dataset
    n, xi = ds.n, ds.xi
    if n < model.k + 1:
        raise InfeasibleError(f"hold-one-out needs at least k+1={model.k + 1} cases, have {n}")
    if rows is None:
        if n > case_cap:
            rng = np.random.default_rng(seed)
            rows = np.sort(rng.choice(n, size=case_cap, replace=False))
        else:
            rows = np.arange(n)
    rows = np.asarray(rows, dtype=np.int64)
    values = ds.values
    known_all = ~np.isnan(values)
    w = model.weights
    errors = np.full((n, xi), np.nan)
    counts = [np.zeros((len(s), len(s))) if s is not None else None for s in ds.symbols]
    for c in rows:
        diffs = model.differences(values[c], range(xi))
        diffs[c, :] = np.nan
        loo = combine_leave_one_out(diffs, w, model.metric.p)
        for f in np.flatnonzero(known_all[c]):
            d = loo[:, f]
            usable = known_all[:, f].copy()
            usable[c] = False
            usable = prefer_covering(known_all, np.flatnonzero(known_all[c] & (np.arange(xi) != f)), usable, model.k)
            cand = order_candidates(d, ds.ids, usable)[: model.k]
            if cand.size == 0:
                continue
            pred = aggregate(model, f, cand, inverse_distance_weights(d[cand], model.alpha))
            feat = ds.schema[f]
            errors[c, f] = _prediction_error(feat.kind, feat.period, values[c, f], pred)
            if counts[f] is not None:
                counts[f][int(pred), int(values[c, f])] += 1
    residuals = model.deviations.residuals.copy()
    unpredictable = []
    confusion = []
    for f, feat in enumerate(ds.schema):
        e = errors[rows, f]
        e = e[~np.isnan(e)]
        if e.size == 0:
            if known_all[:, f].any():
                unpredictable.append(feat.name)
        else:
            residuals[f] = max(float(e.mean()), float(model.deviations.floor[f]))
        if counts[f] is None:
            confusion.append(None)
        else:
            confusion.append(_normalize_confusion(counts[f]))
    if unpredictable and strict:
        raise InfeasibleError(f"features never predictable from the others: {unpredictable}")
    return ResidualReport(
        feature_names=tuple(ds.feature_names),
        residuals=residuals,
        case_residuals=errors,
        confusion=tuple(confusion),
        rows=rows,
        unpredictable=tuple(unpredictable),
    )


def _normalize_confusion(counts: np.ndarray) -> np.ndarray:
    m = counts.shape[0]
    out = _smoothed_identity(m)
    totals = counts.sum(axis=1)
    seen = totals > 0
    out[seen] = (counts[seen] + NOMINAL_EPSILON) / (totals[seen, None] + m * NOMINAL_EPSILON)
    return out


class IterationResult(NamedTuple):
    deviations: DeviationVector
    trace: tuple[float, ...]
    converged: bool
    report: ResidualReport


def max_relative_change(old: np.ndarray, new: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / old)) if old.size else 0.0


def iterate_residuals(
    model: Model,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
    **holdout_kwargs,
) -> IterationResult:
    """Feed hold-one-out residuals back in as deviations until they settle.

    Stops once the largest relative change of any feature's residual falls
    below ``tol`` or after ``max_iters`` passes. Features that cannot be
    predicted keep their bootstrap deviation. Non-convergence is reported
    through ``converged``, never raised.
    """
    if max_iters < 1:
        raise UsageError("max_iters must be at least 1")
    holdout_kwargs.setdefault("strict", False)
    current = model
    trace: list[float] = []
    report = None
    for _ in range(max_iters):
        report = holdout_residuals(current, **holdout_kwargs)
        new = report.deviations(current.deviations)
        change = max_relative_change(current.deviations.residuals, new.residuals)
        trace.append(change)
        current = current.replace(deviations=new)
        if change < tol:
            break
    converged = trace[-1] < tol
    report = ResidualReport(
        report.feature_names, report.residuals, report.case_residuals, report.confusion, report.rows,
        report.unpredictable, tuple(trace),
    )
    return IterationResult(current.deviations, tuple(trace), converged, report)


def fit(
    dataset: Dataset,
    k: int | None = None,
    p: float = 0.0,
    mode: DeviationMode | str = DeviationMode.LK_NORMAL,
    alpha: float = 1.0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Model:
    """Build a model: bootstrap deviations, then iterate hold-one-out residuals."""
    model = Model(dataset, k=k, metric=MetricConfig(p=p, mode=mode), alpha=alpha)
    if dataset.n < model.k + 1:
        return model
    result = iterate_residuals(model, max_iters=max_iters, tol=tol)
    return model.replace(deviations=result.deviations)


def regional_residuals(model: Model, query: np.ndarray, columns, size: int) -> ResidualReport:
    """Hold-one-out residuals computed only over the ``size`` cases nearest to a coded query.

    The regional model uses ``min(k, size - 1)`` neighbors.
    """
    if size < 2:
        raise UsageError("regional residuals need at least two cases")
    if size > model.n:
        raise UsageError(f"region of {size} cases exceeds the model size {model.n}")
    d = model.distances(query, columns)
    rows = order_candidates(d, model.dataset.ids, np.ones(model.n, dtype=bool))[:size]
    region = model.replace(model.dataset.subset(rows), k=min(model.k, len(rows) - 1))
    return holdout_residuals(region, strict=False)
