"""Audit artifacts for a react decision: the cases behind it and how typical they are.

Every number in an :class:`ExplanationBundle` is recomputed from the model
snapshot and the query alone, so a bundle built at audit time from a saved
model matches the one produced when the decision was made.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .conviction import (
    case_contributions,
    familiarity_convictions,
    feature_prediction_contributions,
    prediction_convictions,
)
from .data import Dataset, FeatureKind
from .engine import Model, local_model, order_candidates, react
from .errors import InfeasibleError, UsageError
from .residuals import ResidualReport
from .residuals import regional_residuals as _regional

CF_RANKS = ("ratio", "nearest")


def _plain(x):
    """Convert numpy scalars and arrays into JSON-ready Python values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


@dataclass(frozen=True, eq=False)
class ExplanationBundle:
    """All explanation sections for one query, in a fixed order."""

    query: dict
    decision: dict
    neighborhood: dict
    counterfactuals: dict
    archetype: dict
    outside_range: dict
    local_residuals: dict
    action_probability: dict
    conviction_ratios: list
    less_similar_distance: float
    feature_contributions: dict

    def as_dict(self) -> dict:
        return {
            "query": self.query,
            "decision": self.decision,
            "neighborhood": self.neighborhood,
            "counterfactuals": self.counterfactuals,
            "archetype": self.archetype,
            "outside_range": self.outside_range,
            "local_residuals": self.local_residuals,
            "action_probability": self.action_probability,
            "conviction_ratios": self.conviction_ratios,
            "less_similar_distance": self.less_similar_distance,
            "feature_contributions": self.feature_contributions,
        }

    def to_text(self) -> str:
        return json.dumps(_plain(self.as_dict()), indent=2) + "\n"

    def referenced_ids(self) -> set[int]:
        ids = set()
        for hood in self.neighborhood.values():
            ids.update(e["id"] for e in hood)
        for cfs in self.counterfactuals.values():
            ids.update(e["id"] for e in cfs)
        ids.update(a["id"] for a in self.archetype.values() if a)
        ids.update(e["id"] for e in self.conviction_ratios)
        return ids


# -- individual artifacts ----------------------------------------------------


def _action_column(model: Model, action: str) -> int:
    return model.dataset.feature_index(action)


def _differs(model: Model, j: int, values: np.ndarray, suggested: float, tolerance: float) -> np.ndarray:
    if model.schema[j].kind is FeatureKind.NOMINAL:
        return values != suggested
    return np.abs(values - suggested) > tolerance


def _action_difference(model: Model, j: int, values: np.ndarray, suggested: float) -> np.ndarray:
    if model.schema[j].kind is FeatureKind.NOMINAL:
        return (values != suggested).astype(float)
    return np.abs(values - suggested) / model.deviations.residuals[j]


def counterfactuals(model: Model, context, action: str, suggested, count: int = 3,
                    rank: str = "ratio", tolerance: float | None = None) -> list[dict]:
    """The ``count`` nearest cases whose action value differs from ``suggested``.

    A numeric action differs when it is more than ``tolerance`` (default the
    feature's residual) away. With ``rank="ratio"`` the chosen cases are
    ordered by action difference over context distance, largest first, ties
    by distance; ``rank="nearest"`` keeps plain distance order.
    """
    if rank not in CF_RANKS:
        raise UsageError(f"counterfactual ranking must be one of {CF_RANKS}")
    if count < 1:
        raise UsageError("counterfactual count must be positive")
    query, cols = model.encode_context(context)
    j = _action_column(model, action)
    code = model.dataset.encode(j, suggested)
    tol = model.deviations.residuals[j] if tolerance is None else tolerance
    vals = model.dataset.values[:, j]
    usable = ~np.isnan(vals)
    usable[usable] = _differs(model, j, vals[usable], code, tol)
    d = model.distances(query, cols)
    rows = order_candidates(d, model.dataset.ids, usable)[:count]
    if rows.size == 0:
        raise InfeasibleError(f"no counterfactual exists: every case shares the suggested {action!r}")
    diff = _action_difference(model, j, vals[rows], code)
    with np.errstate(divide="ignore"):
        ratio = np.where(d[rows] > 0, diff / d[rows], math.inf)
    if rank == "ratio":
        order = np.lexsort((model.dataset.ids[rows], d[rows], -ratio))
        rows, ratio = rows[order], ratio[order]
    return [
        {
            "id": int(model.dataset.ids[r]),
            "distance": float(d[r]),
            "ratio": float(q),
            action: model.dataset.decode(j, vals[r]),
        }
        for r, q in zip(rows, ratio)
    ]


def archetype(model: Model, context, action: str, suggested, tolerance: float | None = None) -> dict:
    """The same-action case farthest from its nearest differing-action case.

    Cases are compared over the context features. Returns the case id and
    that max-min separation.
    """
    _, cols = model.encode_context(context)
    j = _action_column(model, action)
    code = model.dataset.encode(j, suggested)
    tol = model.deviations.residuals[j] if tolerance is None else tolerance
    vals = model.dataset.values[:, j]
    known = ~np.isnan(vals)
    differ = np.zeros(model.n, dtype=bool)
    differ[known] = _differs(model, j, vals[known], code, tol)
    same = known & ~differ
    if not same.any() or not differ.any():
        raise InfeasibleError(f"archetype needs cases both sharing and differing in {action!r}")
    best_row, best_sep = -1, -math.inf
    for r in np.flatnonzero(same):
        row = model.dataset.values[r]
        use = [c for c in cols if not math.isnan(row[c])]
        if not use:
            continue
        d = model.distances(row, use)[differ]
        sep = float(np.nanmin(d)) if np.any(~np.isnan(d)) else math.inf
        if sep > best_sep:
            best_row, best_sep = int(r), sep
    if best_row < 0:
        raise InfeasibleError("no same-action case shares a context feature")
    return {"id": int(model.dataset.ids[best_row]), "separation": best_sep}


def action_probability(local: Dataset, action: str, suggested, tolerance: float = 0.0,
                       weights: np.ndarray | None = None) -> float:
    """Share of the local cases agreeing with a suggested action.

    Nominal actions count cases with the same symbol. Numeric actions count
    cases within ``tolerance``, weighted by ``weights`` when given.
    """
    if local.n == 0:
        raise UsageError("local model is empty")
    j = local.feature_index(action)
    vals = local.values[:, j]
    known = ~np.isnan(vals)
    if not known.any():
        return 0.0
    code = local.encode(j, suggested)
    if local.schema[j].kind is FeatureKind.NOMINAL:
        return float(np.mean(vals[known] == code))
    hit = np.abs(vals[known] - code) <= tolerance
    w = np.ones(local.n) if weights is None else np.asarray(weights, dtype=float)
    w = w[known]
    return float(w[hit].sum() / w.sum()) if w.sum() > 0 else 0.0


def less_similar_distance(model: Model, context, *, count: int | None = None, radius: float | None = None,
                          density: float | None = None) -> float:
    """Distance to the nearest case left after excluding the closest ones.

    Exactly one policy applies: skip the ``count`` closest cases, skip every
    case within ``radius``, or walk outward skipping cases whose density
    (reciprocal distance contribution) is at least ``density``.
    """
    if sum(x is not None for x in (count, radius, density)) != 1:
        raise UsageError("choose exactly one of count, radius or density")
    query, cols = model.encode_context(context)
    d = model.distances(query, cols)
    rows = order_candidates(d, model.dataset.ids, np.ones(model.n, dtype=bool))
    if count is not None:
        if count < 0:
            raise UsageError("exclusion count must be non-negative")
        rest = rows[count:]
    elif radius is not None:
        rest = rows[d[rows] > radius]
    else:
        with np.errstate(divide="ignore"):
            dens = 1.0 / np.asarray(case_contributions(model))
        dense = dens[rows] >= density
        first = int(np.argmin(dense)) if not dense.all() else rows.size
        rest = rows[first:]
    if rest.size == 0:
        raise InfeasibleError("exclusion leaves no case")
    return float(d[rest[0]])


def _local_model(model: Model, local: Dataset) -> Model:
    if local.n < 2:
        raise UsageError("conviction ratios need a local model of at least two cases")
    return model.replace(local, k=min(model.k, local.n - 1))


def conviction_ratios(model: Model, local: Dataset) -> list[dict]:
    """Local over global prediction and familiarity conviction for each local case.

    A case is flagged as noise when it is surprising locally (local
    prediction conviction below 1) yet unremarkable globally (at least 1).
    """
    lm = _local_model(model, local)
    lp, lf = prediction_convictions(lm), familiarity_convictions(lm)
    gp, gf = prediction_convictions(model), familiarity_convictions(model)
    out = []
    for r, cid in enumerate(local.ids):
        g = model.dataset.row_of(int(cid))
        with np.errstate(divide="ignore", invalid="ignore"):
            rp = lp[r] / gp[g] if gp[g] != 0 else math.inf
            rf = lf[r] / gf[g] if gf[g] != 0 else math.inf
        out.append({
            "id": int(cid),
            "prediction_local": float(lp[r]),
            "prediction_global": float(gp[g]),
            "prediction_ratio": float(rp),
            "familiarity_local": float(lf[r]),
            "familiarity_global": float(gf[g]),
            "familiarity_ratio": float(rf),
            "noise": bool(lp[r] < 1.0 <= gp[g]),
        })
    return out


def regional_residuals(model: Model, context, size: int) -> ResidualReport:
    """Hold-one-out residuals over the ``size`` cases nearest to ``context``."""
    query, cols = model.encode_context(context)
    return _regional(model, query, cols, size)


def outside_range(model: Model, local: Dataset, context) -> dict:
    """Per context feature: is the value strictly outside what the local cases show?"""
    query, cols = model.encode_context(context)
    flags = {}
    for j in cols:
        f = model.schema[j]
        vals = local.values[:, j]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            flags[f.name] = True
        elif f.kind is FeatureKind.NOMINAL:
            flags[f.name] = bool(query[j] not in set(vals.tolist()))
        else:
            flags[f.name] = bool(query[j] < vals.min() or query[j] > vals.max())
    return flags


# -- the bundle -------------------------------------------------------------


def default_local_size(model: Model) -> int:
    return min(model.n, 2 * model.k)


def explain_react(
    model: Model,
    context: Mapping[str, object],
    actions: Sequence[str],
    k: int | None = None,
    *,
    local_size: int | None = None,
    cf_count: int = 3,
    cf_rank: str = "ratio",
    tolerance: float | None = None,
    exclusion: Mapping[str, float] | None = None,
) -> ExplanationBundle:
    """React to ``context`` and assemble every explanation artifact for the decision.

    The local model is the ``local_size`` nearest cases (default ``2k``);
    numeric action tolerance defaults to the action feature's residual; the
    less-similar distance excludes the ``k`` closest cases unless
    ``exclusion`` names another policy.
    """
    context = dict(context)
    reaction = react(model, context, actions, k)
    size = local_size or default_local_size(model)
    local = local_model(model, context, count=size)
    report = regional_residuals(model, context, size) if size >= 2 else None
    hoods, cfs, arch, prob = {}, {}, {}, {}
    for a in actions:
        j = _action_column(model, a)
        hood = reaction.neighborhoods[a]
        hoods[a] = [
            {"id": int(i), "distance": float(d), "weight": float(w)}
            for i, d, w in zip(hood.ids, hood.distances, hood.weights)
        ]
        suggested = reaction.values[a]
        tol = float(model.deviations.residuals[j]) if tolerance is None else tolerance
        try:
            cfs[a] = counterfactuals(model, context, a, suggested, cf_count, cf_rank, tol)
        except InfeasibleError:
            cfs[a] = []
        try:
            arch[a] = archetype(model, context, a, suggested, tol)
        except InfeasibleError:
            arch[a] = {}
        near = model.dataset.subset(hood.rows)
        prob[a] = action_probability(near, a, suggested, tol, hood.weights)
    excl = dict(exclusion) if exclusion else {"count": reaction.neighborhood.ids.size}
    try:
        less = less_similar_distance(model, context, **excl)
    except InfeasibleError:
        less = math.inf
    contributions = (
        dict(zip(model.dataset.feature_names, feature_prediction_contributions(model).tolist()))
        if model.xi >= 2 else {}
    )
    return ExplanationBundle(
        query={"context": context, "actions": list(actions), "k": int(k or model.k), "local_size": int(size)},
        decision=dict(reaction.values),
        neighborhood=hoods,
        counterfactuals=cfs,
        archetype=arch,
        outside_range=outside_range(model, local, context),
        local_residuals=dict(zip(model.dataset.feature_names, report.residuals.tolist())) if report else {},
        action_probability=prob,
        conviction_ratios=conviction_ratios(model, local) if local.n >= 2 else [],
        less_similar_distance=less,
        feature_contributions=contributions,
    )
