"""Anomaly detection and greedy surprisal-based pruning of cases and features."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .conviction import (
    case_information,
    familiarity_convictions,
    feature_prediction_contributions,
    feature_prediction_convictions,
    prediction_convictions,
)
from .data import normalize_weights
from .engine import Model
from .errors import InfeasibleError, UsageError

DEFAULT_ANOMALY_THRESHOLD = 0.5
DEFAULT_BATCH_FRACTION = 0.1


def detect_anomalies(model: Model, threshold: float = DEFAULT_ANOMALY_THRESHOLD,
                     require_unfamiliar: bool = False) -> list[int]:
    """Ids of cases whose prediction conviction is below ``threshold``, least convinced first.

    With ``require_unfamiliar`` a case must also have familiarity conviction
    below the threshold (unusual *and* hard to predict).
    """
    if not 0 < threshold <= 1:
        raise UsageError(f"anomaly threshold must lie in (0, 1], got {threshold}")
    pp = prediction_convictions(model)
    flagged = pp < threshold
    if require_unfamiliar:
        flagged &= familiarity_convictions(model) < threshold
    rows = np.flatnonzero(flagged)
    rows = rows[np.lexsort((model.dataset.ids[rows], pp[rows]))]
    return [int(model.dataset.ids[r]) for r in rows]


@dataclass
class RemovalLog:
    """One row per removed case: id and its surprisal/convictions at removal time."""

    entries: list = field(default_factory=list)

    def add(self, case_id, information, prediction, familiarity, reason="prune"):
        self.entries.append((int(case_id), float(information), float(prediction), float(familiarity), reason))

    @property
    def ids(self) -> list[int]:
        return [e[0] for e in self.entries]

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["case_id", "self_information", "prediction_conviction", "familiarity_conviction", "reason"])
        for cid, info, pp, pf, reason in self.entries:
            w.writerow([cid, repr(info), repr(pp), repr(pf), reason])
        return buf.getvalue()


def remove_cases(model: Model, case_ids, log: RemovalLog | None = None, reason: str = "prune") -> Model:
    """Drop cases by id, logging their statistics under the current model."""
    case_ids = list(case_ids)
    if log is not None and case_ids:
        info = case_information(model)
        pp = prediction_convictions(model)
        pf = familiarity_convictions(model) if model.n >= 2 else np.ones(model.n)
        for cid in case_ids:
            r = model.dataset.row_of(cid)
            log.add(cid, info[r], pp[r], pf[r], reason)
    return model.replace(model.dataset.without_ids(case_ids))


def prune_cases(model: Model, *, cap: int | None = None, count: int | None = None,
                floor: float | None = None, batch: int | None = None) -> tuple[Model, RemovalLog]:
    """Greedily remove the least surprising cases.

    Exactly one policy applies: keep at most ``cap`` cases, remove ``count``
    cases, or remove cases whose self-information is below ``floor``.
    Self-information is recomputed after every batch of removals; the batch
    defaults to a tenth of the planned removals. The surprisal floor stops
    early when only ``k + 1`` cases remain.
    """
    if sum(x is not None for x in (cap, count, floor)) != 1:
        raise UsageError("choose exactly one of cap, count or floor")
    log = RemovalLog()
    k = model.k
    if floor is None:
        total = model.n - cap if cap is not None else count
        if total < 0:
            raise UsageError("removal count must be non-negative")
        if model.n - total < k + 1:
            raise InfeasibleError(f"policy would leave {model.n - total} cases; at least k+1={k + 1} are needed")
        if total == 0:
            return model, log
        step = batch or max(1, math.ceil(DEFAULT_BATCH_FRACTION * total))
        remaining = total
        while remaining > 0:
            take = min(step, remaining)
            model = remove_cases(model, _lowest(model, take), log)
            remaining -= take
        return model, log
    while model.n > k + 1:
        info = np.asarray(case_information(model))
        below = int(np.count_nonzero(info < floor))
        if below == 0:
            break
        step = batch or max(1, math.ceil(DEFAULT_BATCH_FRACTION * below))
        take = min(step, below, model.n - (k + 1))
        model = remove_cases(model, _lowest(model, take), log)
    return model, log


def _lowest(model: Model, count: int) -> list[int]:
    info = np.asarray(case_information(model), dtype=float)
    info = np.where(np.isnan(info), np.inf, info)
    rows = np.lexsort((model.dataset.ids, info))[:count]
    return [int(model.dataset.ids[r]) for r in rows]


@dataclass
class FeatureLog:
    metric: str
    entries: list = field(default_factory=list)

    @property
    def dropped(self) -> list[str]:
        return [e[0] for e in self.entries]

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["feature", self.metric])
        for name, value in self.entries:
            w.writerow([name, repr(float(value))])
        return buf.getvalue()


def select_features(model: Model, columns) -> Model:
    """Restrict a model to ``columns`` with weights renormalized."""
    columns = list(columns)
    ds = model.dataset.select_features(columns)
    ds = ds.with_schema(normalize_weights(ds.schema))
    return model.replace(ds, deviations=model.deviations.select(columns))


def prune_features(model: Model, *, keep: int | None = None, conviction_floor: float | None = None,
                   by: str = "conviction") -> tuple[Model, FeatureLog]:
    """Drop features in ascending order of feature prediction conviction (or contribution).

    ``keep`` retains the top ``keep`` features; ``conviction_floor`` drops
    every feature scoring below it while always keeping at least one.
    """
    if (keep is None) == (conviction_floor is None):
        raise UsageError("choose exactly one of keep or conviction_floor")
    if by not in ("conviction", "contribution"):
        raise UsageError("by must be 'conviction' or 'contribution'")
    xi = model.xi
    if keep is not None and not 1 <= keep <= xi:
        raise InfeasibleError(f"cannot keep {keep} of {xi} features")
    log = FeatureLog(metric=f"prediction_{by}")
    if keep == xi:
        return model, log
    if xi < 2:
        raise InfeasibleError("feature pruning needs at least two features")
    scores = feature_prediction_convictions(model) if by == "conviction" else feature_prediction_contributions(model)
    order = sorted(range(xi), key=lambda j: (scores[j], j))
    if keep is not None:
        drop = order[: xi - keep]
    else:
        drop = [j for j in order if scores[j] < conviction_floor][: xi - 1]
    for j in drop:
        log.entries.append((model.schema[j].name, float(scores[j])))
    if not drop:
        return model, log
    return select_features(model, [j for j in range(xi) if j not in drop]), log


def reduce_model(model: Model, *, anomaly_threshold: float | None = DEFAULT_ANOMALY_THRESHOLD,
                 cap: int | None = None, floor: float | None = None, keep_features: int | None = None,
                 batch: int | None = None) -> tuple[Model, RemovalLog, FeatureLog | None]:
    """Anomaly removal, then case pruning, then feature pruning (each optional)."""
    log = RemovalLog()
    if anomaly_threshold is not None:
        anomalies = detect_anomalies(model, anomaly_threshold)
        removable = max(0, model.n - (model.k + 1))
        model = remove_cases(model, anomalies[:removable], log, reason="anomaly")
    if cap is not None or floor is not None:
        model, pruned = prune_cases(model, cap=cap, floor=floor, batch=batch)
        log.entries.extend(pruned.entries)
    feature_log = None
    if keep_features is not None:
        model, feature_log = prune_features(model, keep=keep_features)
    return model, log, feature_log
