"""Per-feature differences and their combination into Lebesgue-style distances.

The default distance is the ``p -> 0`` limit of the weighted power mean (a
weighted geometric mean) over per-feature *expected* differences, where each
continuous difference is replaced by the expected absolute difference of two
normal distributions centred on the observed values (the
Lukaszyk-Karmowski distance). This keeps identical values at a strictly
positive distance, which the geometric mean needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import erfc

from .data import FeatureKind, FeatureSchema
from .errors import InfeasibleError, UsageError

NOMINAL_EPSILON = 1e-6
# Floor applied to per-feature differences before the p=0 product; an
# implementation guard against underflow, not part of the semantics.
DIFFERENCE_FLOOR = 1e-300

_SQRT_PI = math.sqrt(math.pi)


class DeviationMode(str, Enum):
    NONE = "none"
    LK_NORMAL = "lk-normal"


@dataclass(frozen=True)
class MetricConfig:
    p: float = 0.0
    mode: DeviationMode = DeviationMode.LK_NORMAL

    def __post_init__(self):
        object.__setattr__(self, "mode", DeviationMode(self.mode))
        if not (self.p >= 0 and math.isfinite(self.p)):
            raise UsageError(f"Lebesgue parameter p must be a finite value >= 0, got {self.p}")


@dataclass(frozen=True, eq=False)
class DeviationVector:
    """Expected per-feature deviations of a model.

    ``residuals`` are in each feature's own units (misclassification rate
    for nominal features). ``confusion`` holds a row-stochastic matrix per
    nominal feature (``None`` elsewhere), indexed ``[predicted, actual]``:
    row ``a`` is the distribution of true values when ``a`` is predicted.
    ``floor`` is the bootstrap lower bound the residuals are clamped to.
    """

    residuals: np.ndarray
    confusion: tuple[np.ndarray | None, ...]
    floor: np.ndarray
    degenerate: tuple[bool, ...] = ()
    statistic: str = "mae"

    def __post_init__(self):
        r = np.array(self.residuals, dtype=float)
        floor = np.array(self.floor, dtype=float)
        if r.shape != floor.shape:
            raise ValueError("residuals and floor must have the same shape")
        if np.any(~(r > 0)) or np.any(~np.isfinite(r)):
            raise ValueError("every deviation must be a finite positive number")
        conf = []
        for c in self.confusion:
            if c is None:
                conf.append(None)
                continue
            c = np.array(c, dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ValueError("confusion matrices must be square")
            if c.size and not np.allclose(c.sum(axis=1), 1.0, atol=1e-9, rtol=0):
                raise ValueError("confusion matrix rows must sum to 1")
            c.flags.writeable = False
            conf.append(c)
        r.flags.writeable = False
        floor.flags.writeable = False
        object.__setattr__(self, "residuals", r)
        object.__setattr__(self, "floor", floor)
        object.__setattr__(self, "confusion", tuple(conf))
        degenerate = tuple(self.degenerate) or (False,) * r.size
        object.__setattr__(self, "degenerate", degenerate)

    def with_residuals(self, residuals, confusion=None) -> "DeviationVector":
        return DeviationVector(
            residuals=residuals,
            confusion=self.confusion if confusion is None else confusion,
            floor=self.floor,
            degenerate=self.degenerate,
            statistic=self.statistic,
        )

    def select(self, columns: Sequence[int]) -> "DeviationVector":
        columns = list(columns)
        return DeviationVector(
            residuals=self.residuals[columns],
            confusion=tuple(self.confusion[j] for j in columns),
            floor=self.floor[columns],
            degenerate=tuple(self.degenerate[j] for j in columns),
            statistic=self.statistic,
        )

    def scaled(self, factor: float) -> "DeviationVector":
        return self.with_residuals(self.residuals * factor)


def lk_expected_distance_normal(mu_xy, sigma):
    """Expected ``|X - Y|`` for two normals of equal ``sigma`` whose means differ by ``mu_xy``.

    Accepts scalars or arrays; returns the same shape.
    """
    mu = np.asarray(mu_xy, dtype=float)
    s = np.asarray(sigma, dtype=float)
    if np.any(~(s > 0)):
        raise UsageError("sigma must be positive")
    if np.any(mu < 0):
        raise UsageError("mu_xy must be non-negative")
    out = mu + (2.0 * s / _SQRT_PI) * np.exp(-(mu * mu) / (4.0 * s * s)) - mu * erfc(mu / (2.0 * s))
    return float(out) if out.ndim == 0 else out


def generalized_mean(values, weights, p: float) -> float:
    """Weighted power mean ``(sum w x^p)^(1/p)``; the geometric mean at ``p == 0``.

    Evaluated around the weighted mean log ``c`` as
    ``exp(c + log1p(sum w expm1(p (ln x - c))) / p)``, which stays accurate
    both as ``p`` approaches zero and when every ``x^p`` is tiny.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if x.shape != w.shape:
        raise UsageError("values and weights must have equal length")
    if x.size == 0:
        raise UsageError("generalized_mean of an empty list")
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise UsageError("generalized_mean requires non-negative values")
    if np.any(w <= 0):
        raise UsageError("weights must be positive")
    return float(combine(x[None, :], w / w.sum(), p)[0])


# below this exponent the power mean equals the geometric mean to double precision,
# and the expm1 form would underflow into subnormals
_GEOMETRIC_BELOW = 1e-100


def combine(diffs: np.ndarray, weights: np.ndarray, p: float) -> np.ndarray:
    """Row-wise power mean of a (rows, features) difference matrix.

    NaN cells are skipped and the weights renormalized over the remaining
    ones; rows with nothing known yield NaN.
    """
    diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
    p = 0.0 if p < _GEOMETRIC_BELOW else p
    known = ~np.isnan(diffs)
    d = np.where(known, diffs, 1.0)
    wm = np.where(known, np.asarray(weights, dtype=float), 0.0)
    wsum = wm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        center = (wm * np.log(np.maximum(d, DIFFERENCE_FLOOR))).sum(axis=1) / wsum
        if p == 0:
            out = np.where((known & (d == 0)).any(axis=1), 0.0, np.exp(center))
        else:
            # centering keeps one term >= 0, so log1p never sees a sum near -1
            shifted = p * (np.log(d) - center[:, None])
            mean = (wm * np.expm1(shifted)).sum(axis=1) / wsum
            out = np.exp(center + np.log1p(mean) / p)
    return np.where(wsum > 0, out, np.nan)


def combine_leave_one_out(diffs: np.ndarray, weights: np.ndarray, p: float) -> np.ndarray:
    """Distances with each feature left out in turn.

    Returns ``(rows, features)`` where column ``j`` is :func:`combine` over
    every feature except ``j``.
    """
    diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
    out = np.empty_like(diffs)
    for j in range(diffs.shape[1]):
        rest = diffs.copy()
        rest[:, j] = np.nan
        out[:, j] = combine(rest, weights, p)
    return out


def _nominal_same(codes: np.ndarray, confusion: np.ndarray | None) -> np.ndarray:
    if confusion is None:
        return np.full(codes.shape, NOMINAL_EPSILON)
    idx = codes.astype(np.int64)
    inside = (idx >= 0) & (idx < confusion.shape[0])
    diag = np.zeros(codes.shape)
    diag[inside] = np.diag(confusion)[idx[inside]]
    return np.maximum(NOMINAL_EPSILON, 1.0 - diag)


def feature_differences(
    schema: Sequence[FeatureSchema],
    query: np.ndarray,
    values: np.ndarray,
    deviations: DeviationVector | None,
    mode: DeviationMode = DeviationMode.LK_NORMAL,
    columns: Sequence[int] | None = None,
) -> np.ndarray:
    """Differences between one query row and every row of ``values``.

    Returns an array shaped like ``values[:, columns]``; a cell is NaN when
    either side is missing. ``query`` is indexed by schema position.
    """
    mode = DeviationMode(mode)
    columns = range(len(schema)) if columns is None else columns
    values = np.atleast_2d(values)
    out = np.full((values.shape[0], len(columns)), np.nan)
    uncertain = mode is DeviationMode.LK_NORMAL and deviations is not None
    for c, j in enumerate(columns):
        f = schema[j]
        q = query[j]
        if math.isnan(q):
            continue
        v = values[:, j]
        known = ~np.isnan(v)
        vk = v[known]
        if f.kind is FeatureKind.NOMINAL:
            if uncertain:
                same = _nominal_same(np.array([q]), deviations.confusion[j])[0]
                d = np.where(vk == q, same, 1.0)
            else:
                d = (vk != q).astype(float)
        else:
            d = np.abs(vk - q)
            if f.kind is FeatureKind.CYCLIC:
                d = np.mod(d, f.period)
                d = np.minimum(d, f.period - d)
            if uncertain:
                d = lk_expected_distance_normal(d, deviations.residuals[j])
        out[known, c] = d
    return out


def feature_difference(
    feature: FeatureSchema,
    a: float,
    b: float,
    deviation: float | None = None,
    confusion: np.ndarray | None = None,
    mode: DeviationMode = DeviationMode.NONE,
) -> float:
    """Difference between two known internal codes of one feature."""
    if math.isnan(a) or math.isnan(b):
        raise UsageError("feature_difference requires two known values")
    mode = DeviationMode(mode)
    uncertain = mode is DeviationMode.LK_NORMAL
    if feature.kind is FeatureKind.NOMINAL:
        if a != b:
            return 1.0
        if not uncertain:
            return 0.0
        return float(_nominal_same(np.array([a]), confusion)[0])
    d = abs(a - b)
    if feature.kind is FeatureKind.CYCLIC:
        d = math.fmod(d, feature.period)
        d = min(d, feature.period - d)
    if uncertain:
        if deviation is None:
            raise UsageError("lk-normal mode needs a deviation")
        return lk_expected_distance_normal(d, deviation)
    return d


def case_distance(
    x: np.ndarray,
    y: np.ndarray,
    schema: Sequence[FeatureSchema],
    config: MetricConfig,
    deviations: DeviationVector | None,
    features: Sequence[int] | None = None,
) -> float:
    """Distance between two coded cases over ``features`` (default: all).

    Only features known in both cases take part, with weights renormalized
    over them.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    columns = list(range(len(schema))) if features is None else list(features)
    if not columns:
        raise UsageError("feature subset must be non-empty")
    w = np.array([schema[j].weight for j in columns])
    diffs = feature_differences(schema, x, y[None, :], deviations, config.mode, columns)
    d = combine(diffs, w, config.p)[0]
    if math.isnan(d):
        raise InfeasibleError("cases share no known feature")
    return float(d)


def residual_norm(residuals: np.ndarray, weights: np.ndarray, p: float, columns=None) -> float:
    """Power-mean magnitude of a residual vector over ``columns``."""
    columns = slice(None) if columns is None else list(columns)
    return generalized_mean(np.asarray(residuals)[columns], np.asarray(weights)[columns], p)
