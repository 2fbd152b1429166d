"""Targetless kNN: exhaustive neighbor search, weighted prediction and local models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Dataset, FeatureKind
from .errors import InfeasibleError, UsageError
from .metric import DeviationMode, DeviationVector, MetricConfig, combine, feature_differences

DEFAULT_K = 8
DEFAULT_ALPHA = 1.0


def default_k(n: int) -> int:
    return max(1, min(DEFAULT_K, n - 1))


class Model:
    """A dataset together with its hyperparameters and deviations.

    Models are treated as immutable snapshots: operations that change cases
    build a new model, so derived statistics cached on an instance can never
    go stale. ``stale`` reports whether the cache is empty.
    """

    def __init__(
        self,
        dataset: Dataset,
        k: int | None = None,
        metric: MetricConfig | None = None,
        alpha: float = DEFAULT_ALPHA,
        deviations: DeviationVector | None = None,
    ):
        self.dataset = dataset
        self.metric = metric or MetricConfig()
        n = dataset.n
        self.k = default_k(n) if k is None else int(k)
        if self.k < 1:
            raise UsageError(f"k must be a positive integer, got {k}")
        if n >= 2 and self.k >= n:
            raise UsageError(f"k={self.k} must be smaller than the case count {n}")
        if not (alpha > 0 and math.isfinite(alpha)):
            raise UsageError(f"distance exponent alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        if deviations is None:
            from .residuals import bootstrap_deviations

            deviations = bootstrap_deviations(dataset)
        if deviations.residuals.shape != (dataset.xi,):
            raise UsageError("deviation vector does not match the schema")
        self.deviations = deviations
        self.cache: dict = {}

    # -- convenience -----------------------------------------------------

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def xi(self) -> int:
        return self.dataset.xi

    @property
    def schema(self):
        return self.dataset.schema

    @property
    def weights(self) -> np.ndarray:
        return self.dataset.weights

    @property
    def stale(self) -> bool:
        return not self.cache

    def replace(self, dataset: Dataset | None = None, *, k: int | None = None, deviations=None, metric=None,
                alpha=None) -> "Model":
        """A new model sharing every hyperparameter not overridden.

        ``k`` shrinks automatically when the new dataset is too small for it.
        """
        dataset = self.dataset if dataset is None else dataset
        if k is None:
            k = self.k if dataset.n < 2 else min(self.k, dataset.n - 1)
        return Model(
            dataset,
            k=max(1, k),
            metric=self.metric if metric is None else metric,
            alpha=self.alpha if alpha is None else alpha,
            deviations=self.deviations if deviations is None else deviations,
        )

    def columns_of(self, names: Iterable[str]) -> list[int]:
        return [self.dataset.feature_index(nm) for nm in names]

    def encode_context(self, context: Mapping[str, object] | Iterable[tuple[str, object]]) -> tuple[np.ndarray, list[int]]:
        """Turn ``{feature: external value}`` into a coded query row and its known columns."""
        items = list(context.items()) if isinstance(context, Mapping) else list(context)
        query = np.full(self.xi, np.nan)
        columns = []
        for name, value in items:
            j = self.dataset.feature_index(name)
            if j in columns:
                raise UsageError(f"feature {name!r} given twice in the context")
            query[j] = self.dataset.encode(j, value)
            if not math.isnan(query[j]):
                columns.append(j)
        return query, sorted(columns)

    def differences(self, query: np.ndarray, columns: Sequence[int]) -> np.ndarray:
        return feature_differences(
            self.schema, query, self.dataset.values, self.deviations, self.metric.mode, columns
        )

    def distances(self, query: np.ndarray, columns: Sequence[int]) -> np.ndarray:
        """Distance from a coded query to every case over ``columns``; NaN where nothing is shared."""
        columns = list(columns)
        if not columns:
            raise UsageError("context must contain at least one known feature")
        return combine(self.differences(query, columns), self.weights[columns], self.metric.p)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Ordered neighbors of a query with their normalized inverse-distance weights."""

    query: dict
    ids: np.ndarray
    rows: np.ndarray
    distances: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def inverse_distance_weights(distances: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """``d^-alpha`` normalized to one; zero distances share all the weight equally."""
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        return d
    zero = d == 0
    if zero.any():
        return zero / zero.sum()
    w = d ** (-alpha)
    return w / w.sum()


def order_candidates(distances: np.ndarray, ids: np.ndarray, usable: np.ndarray) -> np.ndarray:
    """Row indices of usable candidates by ascending distance, ties by lower id."""
    rows = np.flatnonzero(usable & ~np.isnan(distances))
    order = np.lexsort((ids[rows], distances[rows]))
    return rows[order]


def prefer_covering(known: np.ndarray, columns: Sequence[int], usable: np.ndarray, k: int) -> np.ndarray:
    """Narrow ``usable`` to candidates knowing every one of ``columns`` when at least ``k`` of them exist.

    Candidates that share only part of the query are compared over fewer
    features, which at small p lets a single close feature dominate; they are
    used only to make up a shortfall.
    """
    columns = list(columns)
    covering = usable & known[:, columns].all(axis=1) if columns else usable
    return covering if np.count_nonzero(covering) >= k else usable


def _neighbors(model: Model, query: np.ndarray, columns: Sequence[int], k: int,
               exclude_rows: np.ndarray | None = None, require_known: Sequence[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    d = model.distances(query, columns)
    known = ~np.isnan(model.dataset.values)
    usable = np.ones(model.n, dtype=bool)
    if exclude_rows is not None:
        usable[exclude_rows] = False
    for j in require_known:
        usable &= known[:, j]
    usable = prefer_covering(known, columns, usable, k)
    rows = order_candidates(d, model.dataset.ids, usable)[:k]
    if rows.size == 0:
        raise InfeasibleError("no candidate case shares a known feature with the query")
    return rows, d[rows]


def _exclusion_rows(model: Model, exclude: Iterable[int]) -> np.ndarray:
    exclude = set(int(e) for e in exclude)
    return np.flatnonzero(np.isin(model.dataset.ids, list(exclude))) if exclude else np.array([], dtype=np.int64)


def knn_query(model: Model, context, k: int | None = None, exclude: Iterable[int] = ()) -> Neighborhood:
    """The ``k`` nearest cases to ``context`` by exhaustive scan.

    Each candidate is compared over the context features it knows; cases
    listed in ``exclude`` (by id) are skipped.
    """
    query, columns = model.encode_context(context)
    k = model.k if k is None else int(k)
    if k < 1:
        raise UsageError("k must be positive")
    rows, d = _neighbors(model, query, columns, k, _exclusion_rows(model, exclude))
    return Neighborhood(
        query=_as_dict(context),
        ids=model.dataset.ids[rows].copy(),
        rows=rows,
        distances=d,
        weights=inverse_distance_weights(d, model.alpha),
    )


def aggregate(model: Model, column: int, rows: np.ndarray, weights: np.ndarray) -> float:
    """Weighted prediction of one feature's code from neighbor rows.

    Neighbors missing the feature are dropped and the weights renormalized.
    Means for continuous and ordinal (rounded to a level), circular mean for
    cyclic, weighted plurality for nominal with ties going to the
    lexicographically smallest symbol.
    """
    vals = model.dataset.values[rows, column]
    known = ~np.isnan(vals)
    if not known.any():
        raise InfeasibleError(f"no neighbor knows feature {model.schema[column].name!r}")
    vals = vals[known]
    w = np.asarray(weights, dtype=float)[known]
    total = w.sum()
    w = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
    f = model.schema[column]
    if f.kind is FeatureKind.NOMINAL:
        codes = vals.astype(np.int64)
        tally = np.bincount(codes, weights=w)
        best = tally.max()
        tied = np.flatnonzero(np.isclose(tally, best, rtol=1e-12, atol=0.0))
        symbols = model.dataset.symbols[column]
        return float(min(tied, key=lambda c: symbols[c]))
    if f.kind is FeatureKind.CYCLIC:
        angle = 2.0 * math.pi * vals / f.period
        c, s = float(w @ np.cos(angle)), float(w @ np.sin(angle))
        if math.hypot(c, s) < 1e-12:
            return float(vals[np.argmax(w)])
        return math.atan2(s, c) % (2.0 * math.pi) * f.period / (2.0 * math.pi)
    # clamp away rounding so a constant neighborhood predicts its constant exactly
    mean = min(max(float(w @ vals), float(vals.min())), float(vals.max()))
    if f.kind is FeatureKind.ORDINAL:
        return float(min(max(round(mean), 0), len(f.levels) - 1))
    return mean


@dataclass(frozen=True, eq=False)
class Reaction:
    """Predicted action values (external form) and the neighborhood used for each."""

    values: dict
    codes: dict
    neighborhoods: dict

    @property
    def neighborhood(self) -> Neighborhood:
        return next(iter(self.neighborhoods.values()))


def react(model: Model, context, actions: Sequence[str], k: int | None = None,
          exclude: Iterable[int] = ()) -> Reaction:
    """Predict each action feature from the context by inverse-distance weighting.

    Neighbors are drawn from the cases that know the action feature.
    """
    query, columns = model.encode_context(context)
    action_cols = model.columns_of(actions)
    if not action_cols:
        raise UsageError("at least one action feature is required")
    ctx_names = set(_as_dict(context))
    overlap = ctx_names.intersection(actions)
    if overlap:
        raise UsageError(f"action features overlap the context: {sorted(overlap)}")
    k = model.k if k is None else int(k)
    excl = _exclusion_rows(model, exclude)
    values, codes, hoods = {}, {}, {}
    for name, j in zip(actions, action_cols):
        rows, d = _neighbors(model, query, columns, k, excl, require_known=[j])
        w = inverse_distance_weights(d, model.alpha)
        code = aggregate(model, j, rows, w)
        codes[name] = code
        values[name] = model.dataset.decode(j, code)
        hoods[name] = Neighborhood(_as_dict(context), model.dataset.ids[rows].copy(), rows, d, w)
    return Reaction(values, codes, hoods)


def local_model(model: Model, context, count: int | None = None, radius: float | None = None) -> Dataset:
    """Cases nearest to ``context``, either the ``count`` closest or all within ``radius``.

    The returned dataset keeps the original case ids, ordered by distance.
    """
    if model.n == 0:
        raise InfeasibleError("local model of an empty model")
    if (count is None) == (radius is None):
        raise UsageError("give exactly one of count or radius")
    if count is not None and count <= 0:
        raise UsageError("local model count must be positive")
    if radius is not None and not radius > 0:
        raise UsageError("local model radius must be positive")
    query, columns = model.encode_context(context)
    d = model.distances(query, columns)
    rows = order_candidates(d, model.dataset.ids, np.ones(model.n, dtype=bool))
    if count is not None:
        rows = rows[:count]
    else:
        rows = rows[d[rows] <= radius]
    return model.dataset.subset(rows)


def _as_dict(context) -> dict:
    return dict(context.items()) if isinstance(context, Mapping) else dict(context)
