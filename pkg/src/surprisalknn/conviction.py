"""Surprisal and conviction over cases, features and whole models.

All information quantities are in nats. A case's self-information is its
distance contribution (harmonic mean of distances to its k nearest
neighbors) divided by the power-mean magnitude of the model's residual
vector; conviction is expected self-information over observed
self-information.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, check_compatible
from .engine import Model, order_candidates
from .errors import UsageError
from .metric import residual_norm


def harmonic_contribution(distances: np.ndarray, k: int, alpha: float) -> float:
    """Distance contribution from candidate distances sorted ascending.

    Exact duplicates (zero distances) form a group with the point itself; the
    group's contribution is taken against the nearest distinct neighbors and
    split equally among its members.
    """
    d = np.asarray(distances, dtype=float)
    dup = int(np.count_nonzero(d == 0))
    if dup == 0:
        nearest = d[:k]
        return float(1.0 / np.mean(nearest ** (-alpha))) if nearest.size else math.nan
    distinct = d[d > 0][:k]
    if distinct.size == 0:
        return 0.0
    return float(1.0 / np.mean(distinct ** (-alpha))) / (dup + 1)


def _columns(model: Model, features) -> list[int]:
    if features is None:
        return list(range(model.xi))
    cols = sorted({model.dataset.feature_index(f) if isinstance(f, str) else int(f) for f in features})
    if not cols:
        raise UsageError("feature subset must be non-empty")
    return cols


def _contribution(model: Model, query: np.ndarray, cols: list[int], self_row: int | None,
                  exclude_rows=None) -> tuple[float, list[int]]:
    known = [j for j in cols if not math.isnan(query[j])]
    if not known:
        return math.nan, known
    d = model.distances(query, known)
    usable = np.ones(model.n, dtype=bool)
    if self_row is not None:
        usable[self_row] = False
    if exclude_rows is not None:
        usable[exclude_rows] = False
    rows = order_candidates(d, model.dataset.ids, usable)
    return harmonic_contribution(d[rows], model.k, model.alpha), known


def _information(model: Model, phi: float, known: list[int]) -> float:
    if not known or math.isnan(phi):
        return math.nan
    norm = residual_norm(model.deviations.residuals, model.weights, model.metric.p, known)
    return phi / norm


def case_contributions(model: Model, features=None) -> np.ndarray:
    """Hold-one-out distance contribution of every case over ``features``."""
    cols = _columns(model, features)
    key = ("phi", tuple(cols))
    if key not in model.cache:
        out = np.empty(model.n)
        for r in range(model.n):
            out[r], _ = _contribution(model, model.dataset.values[r], cols, r)
        out.flags.writeable = False
        model.cache[key] = out
    return model.cache[key]


def case_information(model: Model, features=None) -> np.ndarray:
    """Hold-one-out self-information of every case, each over the features it knows."""
    cols = _columns(model, features)
    key = ("info", tuple(cols))
    if key not in model.cache:
        phi = case_contributions(model, cols)
        out = np.empty(model.n)
        for r in range(model.n):
            known = [j for j in cols if not math.isnan(model.dataset.values[r, j])]
            out[r] = _information(model, phi[r], known)
        out.flags.writeable = False
        model.cache[key] = out
    return model.cache[key]


def expected_information(model: Model, features=None) -> float:
    """Mean self-information over the model's cases (the model's expected surprisal)."""
    info = case_information(model, features)
    return float(np.nanmean(info))


def _resolve(model: Model, x):
    """Return (coded query, self row or None) for a case id or an external context."""
    if isinstance(x, (int, np.integer)):
        r = model.dataset.row_of(int(x))
        return model.dataset.values[r], r
    if isinstance(x, np.ndarray):
        return x, None
    query, _ = model.encode_context(x)
    return query, None


def distance_contribution(model: Model, x, k: int | None = None, alpha: float | None = None,
                          features=None) -> float:
    """Distance contribution of a case id (self excluded) or an external context."""
    query, self_row = _resolve(model, x)
    m = model if k is None and alpha is None else model.replace(k=k or model.k, alpha=alpha or model.alpha)
    phi, _ = _contribution(m, query, _columns(model, features), self_row)
    return phi


def self_information(model: Model, x, features=None) -> float:
    """Self-information ``phi / ||r||_p`` of a case id or an external context.

    Only the features the query knows (within ``features``) take part.
    """
    query, self_row = _resolve(model, x)
    cols = _columns(model, features)
    if self_row is not None:
        return float(case_information(model, cols)[self_row])
    phi, known = _contribution(model, query, cols, None)
    return _information(model, phi, known)


def information_probability(information: float) -> float:
    """Probability form ``exp(-I)`` of a self-information value."""
    return math.exp(-information)


def _conviction(expected: float, observed: float) -> float:
    if observed == 0:
        return math.inf
    return expected / observed


def prediction_conviction(model: Model, x, features=None) -> float:
    return _conviction(expected_information(model, features), self_information(model, x, features))


def prediction_convictions(model: Model, features=None) -> np.ndarray:
    cols = _columns(model, features)
    key = ("pi_p", tuple(cols))
    if key not in model.cache:
        info = case_information(model, cols)
        expected = float(np.nanmean(info))
        with np.errstate(divide="ignore"):
            out = np.where(info == 0, math.inf, expected / info)
        out.flags.writeable = False
        model.cache[key] = out
    return model.cache[key]


@dataclass(frozen=True, eq=False)
class PointProbabilityDistribution:
    ids: np.ndarray
    probabilities: np.ndarray

    def __getitem__(self, case_id: int) -> float:
        return float(self.probabilities[np.flatnonzero(self.ids == case_id)[0]])


def point_probabilities(model: Model) -> PointProbabilityDistribution:
    """Each case's share of the total distance contribution."""
    if model.n < 2:
        raise UsageError("point probabilities need at least two cases")
    phi = np.asarray(case_contributions(model), dtype=float)
    total = phi.sum()
    probs = phi / total if total > 0 else np.full(model.n, 1.0 / model.n)
    return PointProbabilityDistribution(model.dataset.ids.copy(), probs)


def replacement_divergences(probabilities: np.ndarray) -> np.ndarray:
    """KL(L || L') for every i, where L' sets entry i to 1/n and renormalizes.

    With ``Z = 1 - l_i + 1/n`` this reduces to ``ln Z + l_i ln(n l_i)``.
    """
    l = np.asarray(probabilities, dtype=float)
    n = l.size
    z = 1.0 - l + 1.0 / n
    with np.errstate(divide="ignore", invalid="ignore"):
        own = np.where(l > 0, l * np.log(n * l), 0.0)
    return np.maximum(np.log(z) + own, 0.0)


def familiarity_convictions(model: Model) -> np.ndarray:
    """Mean replacement divergence over a case's own divergence, for every case.

    A perfectly uniform distribution gives 1 everywhere; a case whose
    probability is already exactly ``1/n`` among non-uniform others is
    infinitely familiar.
    """
    if "pi_f" not in model.cache:
        kl = replacement_divergences(point_probabilities(model).probabilities)
        mean = float(kl.mean())
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(kl == 0, 1.0 if mean == 0 else math.inf, mean / kl)
        out.flags.writeable = False
        model.cache["pi_f"] = out
    return model.cache["pi_f"]


def familiarity_conviction(model: Model, case_id: int) -> float:
    return float(familiarity_convictions(model)[model.dataset.row_of(case_id)])


def _without(model: Model, i: int) -> list[int]:
    return [j for j in range(model.xi) if j != i]


def features_removed_information(model: Model) -> np.ndarray:
    """Expected self-information with each feature left out of distances and residual norms."""
    if model.xi < 2:
        raise UsageError("feature-level conviction needs at least two features")
    if "eI_minus" not in model.cache:
        out = np.array([expected_information(model, _without(model, i)) for i in range(model.xi)])
        out.flags.writeable = False
        model.cache["eI_minus"] = out
    return model.cache["eI_minus"]


def feature_prediction_contributions(model: Model) -> np.ndarray:
    """Relative drop in expected self-information caused by removing each feature."""
    full = expected_information(model)
    return (full - features_removed_information(model)) / full


def feature_prediction_contribution(model: Model, feature) -> float:
    i = model.dataset.feature_index(feature) if isinstance(feature, str) else int(feature)
    return float(feature_prediction_contributions(model)[i])


def feature_prediction_convictions(model: Model) -> np.ndarray:
    removed = features_removed_information(model)
    return removed.mean() / removed


def feature_prediction_conviction(model: Model, feature) -> float:
    i = model.dataset.feature_index(feature) if isinstance(feature, str) else int(feature)
    return float(feature_prediction_convictions(model)[i])


def case_surprisals(reference: Model, other: Dataset) -> np.ndarray:
    """Self-information of each of ``other``'s cases evaluated against ``reference``.

    A case that is literally one of the reference's cases (same id and same
    values) is evaluated hold-one-out, as the reference evaluates itself.
    """
    check_compatible(reference.schema, other.schema)
    codes = reference.dataset.reencode(other)
    cols = list(range(reference.xi))
    out = np.empty(other.n)
    ref_vals = reference.dataset.values
    for r in range(other.n):
        self_row = None
        hits = np.flatnonzero(reference.dataset.ids == other.ids[r])
        if hits.size and np.array_equal(ref_vals[hits[0]], codes[r], equal_nan=True):
            self_row = int(hits[0])
        phi, known = _contribution(reference, codes[r], cols, self_row)
        out[r] = _information(reference, phi, known)
    return out


def model_surprisal(reference: Model, other: Dataset) -> float:
    """Mean surprisal ``other``'s cases would bring to ``reference`` (cases are not inserted)."""
    if other.n == 0:
        raise UsageError("cannot measure the surprisal of an empty dataset")
    return float(np.nanmean(case_surprisals(reference, other)))


@dataclass(frozen=True, eq=False)
class ConvictionReport:
    """Tabular conviction results with a stable column order."""

    scope: str
    labels: list
    columns: dict
    expected_information: float

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        key = "case_id" if self.scope == "case" else "feature"
        w.writerow([key, *self.columns])
        cols = list(self.columns.values())
        for i, label in enumerate(self.labels):
            w.writerow([label, *(repr(float(c[i])) for c in cols)])
        w.writerow([])
        w.writerow(["expected_information", repr(float(self.expected_information))])
        return buf.getvalue()


def case_report(model: Model) -> ConvictionReport:
    return ConvictionReport(
        scope="case",
        labels=[int(i) for i in model.dataset.ids],
        columns={
            "distance_contribution": case_contributions(model),
            "self_information": case_information(model),
            "prediction_conviction": prediction_convictions(model),
            "familiarity_conviction": familiarity_convictions(model),
        },
        expected_information=expected_information(model),
    )


def feature_report(model: Model) -> ConvictionReport:
    return ConvictionReport(
        scope="feature",
        labels=model.dataset.feature_names,
        columns={
            "expected_information_without": features_removed_information(model),
            "prediction_contribution": feature_prediction_contributions(model),
            "prediction_conviction": feature_prediction_convictions(model),
        },
        expected_information=expected_information(model),
    )


def conditional_information(model: Model, rows) -> np.ndarray:
    """Hold-one-out self-information of the given case rows over just the features each one knows."""
    cols = list(range(model.xi))
    out = np.empty(len(rows))
    for i, r in enumerate(rows):
        phi, known = _contribution(model, model.dataset.values[r], cols, int(r))
        out[i] = _information(model, phi, known)
    return out
