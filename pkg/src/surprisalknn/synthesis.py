"""Conditioned synthetic case generation controlled by a target prediction conviction.

Features are filled one at a time. Each new value is predicted from the
values fixed so far and then perturbed with a Laplace draw whose scale is
the feature's residual times ``(E[I] / conviction) ** xi``, so a higher
conviction target yields cases closer to what the model already expects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .conviction import expected_information, feature_prediction_convictions
from .data import Dataset, FeatureKind
from .engine import Model, _neighbors, aggregate, inverse_distance_weights
from .errors import InfeasibleError, SurprisalKNNError, UsageError
from .metric import NOMINAL_EPSILON
from .residuals import regional_residuals

MAX_REDRAWS = 100
ORDER_POLICIES = ("random", "by_feature_conviction")


def laplace_scales(model: Model, conviction: float, residuals: np.ndarray | None = None,
                   expected: float | None = None) -> np.ndarray:
    """Per-feature Laplace scale ``r_i * (E[I] / conviction) ** xi``."""
    if not conviction > 0:
        raise UsageError(f"conviction must be positive, got {conviction}")
    r = model.deviations.residuals if residuals is None else np.asarray(residuals, dtype=float)
    e = expected_information(model) if expected is None else expected
    return r * (e / conviction) ** model.xi


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def resample_continuous(center: float, scale: float, seed=None, bounds: tuple[float, float] | None = None) -> float:
    """Laplace draw around ``center``: a fair side choice then an exponential distance.

    Out-of-bounds draws are redrawn up to 100 times before clamping.
    """
    if scale < 0:
        raise UsageError("scale must be non-negative")
    rng = _rng(seed)
    value = center
    for _ in range(MAX_REDRAWS):
        side = 1.0 if rng.random() < 0.5 else -1.0
        value = center + side * rng.exponential(scale) if scale > 0 else center
        if bounds is None or bounds[0] <= value <= bounds[1]:
            return float(value)
    return float(min(max(value, bounds[0]), bounds[1]))


def resample_nominal(value: int, confusion: np.ndarray, seed=None) -> int:
    """Draw a symbol code from the confusion-matrix row of ``value``."""
    rng = _rng(seed)
    row = np.array(confusion[int(value)], dtype=float)
    if not np.all(np.isfinite(row)) or np.any(row < 0) or row.sum() <= 0:
        row = np.where(np.isfinite(row) & (row > 0), row, 0.0) + NOMINAL_EPSILON
    row = row / row.sum()
    return int(rng.choice(row.size, p=row))


@dataclass(frozen=True)
class SynthesisRequest:
    conditions: Mapping[str, object] = field(default_factory=dict)
    conviction: float = 1.0
    count: int = 1
    seed: int | None = None
    order: str = "random"

    def __post_init__(self):
        if not self.conviction > 0:
            raise UsageError(f"conviction must be positive, got {self.conviction}")
        if self.count < 1:
            raise UsageError("count must be a positive integer")
        if self.order not in ORDER_POLICIES:
            raise UsageError(f"order must be one of {ORDER_POLICIES}")


@dataclass(frozen=True)
class DrawRecord:
    feature: str
    center: float
    scale: float
    value: float


def _perturb(model: Model, j: int, center: float, scale: float, confusion, rng) -> float:
    f = model.schema[j]
    if f.kind is FeatureKind.NOMINAL:
        if confusion is None or confusion.shape[0] == 0:
            return center
        return float(resample_nominal(int(center), confusion, rng))
    if f.kind is FeatureKind.ORDINAL:
        v = resample_continuous(center, scale, rng)
        return float(min(max(round(v), 0), len(f.levels) - 1))
    if f.kind is FeatureKind.CYCLIC:
        return resample_continuous(center, scale, rng) % f.period
    return resample_continuous(center, scale, rng, f.bounds)


def _local_deviation(model: Model, query: np.ndarray, context: list[int], j: int):
    """Regional residual and confusion of feature ``j`` around the partial case, if a region of 2k exists."""
    size = 2 * model.k
    if model.n < size + 1:
        return None
    try:
        report = regional_residuals(model, query, context, size)
    except SurprisalKNNError:
        return None
    if model.schema[j].name in report.unpredictable:
        return None
    return report.residuals[j], report.confusion[j]


def synthesize_case(
    model: Model,
    conditions: Mapping[str, object] | None = None,
    conviction: float = 1.0,
    seed=None,
    order: str = "random",
    local_residuals: bool = True,
    trace: list | None = None,
) -> np.ndarray:
    """Generate one coded case, honoring ``conditions`` exactly.

    With no conditions a random feature of a uniformly chosen case is
    resampled to seed the chain. Remaining features are filled in random
    order or by descending feature prediction conviction. When ``trace`` is
    a list, one :class:`DrawRecord` per generated feature is appended.
    """
    if model.n == 0:
        raise InfeasibleError("cannot synthesize from an empty model")
    if order not in ORDER_POLICIES:
        raise UsageError(f"order must be one of {ORDER_POLICIES}")
    rng = _rng(seed)
    query, filled = model.encode_context(conditions or {})
    expected = expected_information(model)
    global_scales = laplace_scales(model, conviction, expected=expected)
    factor = (expected / conviction) ** model.xi
    values = model.dataset.values
    filled = list(filled)
    if conditions:
        for name in conditions:
            if math.isnan(query[model.dataset.feature_index(name)]):
                raise UsageError(f"condition on {name!r} must be a known value")
    if not filled:
        j = int(rng.integers(model.xi))
        rows = np.flatnonzero(~np.isnan(values[:, j]))
        if rows.size == 0:
            raise InfeasibleError(f"feature {model.schema[j].name!r} has no known values")
        r = int(rows[rng.integers(rows.size)])
        center = values[r, j]
        query[j] = _perturb(model, j, center, global_scales[j], model.deviations.confusion[j], rng)
        filled.append(j)
        if trace is not None:
            trace.append(DrawRecord(model.schema[j].name, float(center), float(global_scales[j]), float(query[j])))
    pending = [j for j in range(model.xi) if j not in filled]
    if order == "random":
        pending = [pending[i] for i in rng.permutation(len(pending))]
    else:
        conv = feature_prediction_convictions(model) if model.xi >= 2 else np.ones(model.xi)
        pending.sort(key=lambda j: (-conv[j], j))
    for j in pending:
        context = sorted(filled)
        rows, d = _neighbors(model, query, context, model.k, require_known=[j])
        center = aggregate(model, j, rows, inverse_distance_weights(d, model.alpha))
        scale, confusion = global_scales[j], model.deviations.confusion[j]
        if local_residuals:
            local = _local_deviation(model, query, context, j)
            if local is not None:
                scale = local[0] * factor
                confusion = local[1] if local[1] is not None else confusion
        query[j] = _perturb(model, j, center, scale, confusion, rng)
        filled.append(j)
        if trace is not None:
            trace.append(DrawRecord(model.schema[j].name, float(center), float(scale), float(query[j])))
    return query


def synthesize(model: Model, request: SynthesisRequest | None = None, **kwargs) -> Dataset:
    """Generate ``request.count`` cases as a dataset tagged ``synthesized``.

    Ids continue after the model's largest id. Keyword arguments build the
    request when none is given.
    """
    request = request or SynthesisRequest(**kwargs)
    rng = np.random.default_rng(request.seed)
    rows = [
        synthesize_case(model, request.conditions, request.conviction, rng, request.order)
        for _ in range(request.count)
    ]
    empty = model.dataset.subset([])
    return empty.append(np.array(rows), origin="synthesized", first_id=model.dataset.next_id)
