"""Iterative imputation that fills the least surprising, least sparse cases first.

Each pass ranks incomplete cases by null count and then by their
self-information over the features they know, predicts the missing cells of
the leading batch from their neighbors and writes them back tagged as
imputed. The next pass sees the filled values, so knowledge accumulates.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .conviction import conditional_information, expected_information, feature_prediction_convictions
from .engine import Model, _neighbors, aggregate, inverse_distance_weights
from .errors import InfeasibleError, UsageError
from .synthesis import _perturb, laplace_scales

TERMINATIONS = ("complete", "ceiling", "sparsity")


@dataclass(frozen=True)
class ImputedCell:
    iteration: int
    case_id: int
    feature: str
    value: object
    code: float
    information: float


@dataclass
class ImputationLog:
    """Every imputed cell in the order it was written, plus run outcome."""

    entries: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    unfillable: list = field(default_factory=list)
    termination: str = ""
    passes: int = 0

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["iteration", "case_id", "feature", "value", "code", "self_information"])
        for e in self.entries:
            value = "" if e.value is None else (repr(e.value) if isinstance(e.value, float) else e.value)
            w.writerow([e.iteration, e.case_id, e.feature, value, repr(float(e.code)), repr(float(e.information))])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class ImputationResult:
    model: Model
    log: ImputationLog


def _rank(model: Model, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows ordered by (null count, conditional self-information, id) and their information."""
    nulls = np.isnan(model.dataset.values[rows]).sum(axis=1)
    info = conditional_information(model, rows)
    key = np.where(np.isnan(info), np.inf, info)
    order = np.lexsort((model.dataset.ids[rows], key, nulls))
    return rows[order], info[order]


def _fill_case(model: Model, row: int, order: list[int], sequential: bool, rng, scales) -> list[tuple[int, float]]:
    query = model.dataset.values[row].copy()
    known = [j for j in range(model.xi) if not math.isnan(query[j])]
    out = []
    for j in order:
        try:
            rows, d = _neighbors(model, query, known, model.k, np.array([row]), require_known=[j])
        except InfeasibleError:
            continue
        code = aggregate(model, j, rows, inverse_distance_weights(d, model.alpha))
        if rng is not None:
            code = _perturb(model, j, code, scales[j], model.deviations.confusion[j], rng)
        out.append((j, code))
        if sequential:
            query[j] = code
            known = sorted(known + [j])
    return out


def impute(
    model: Model,
    batch: int = 1,
    *,
    until: str = "complete",
    ceiling: float | None = None,
    sparsity: float | None = None,
    stochastic: bool = False,
    seed: int | None = None,
    feature_first: bool = False,
    threads: int = 1,
) -> ImputationResult:
    """Fill missing values until the termination condition holds.

    ``until`` is ``"complete"``, ``"ceiling"`` (stop once the least
    surprising incomplete case has self-information above ``ceiling``,
    default twice the starting expected self-information) or ``"sparsity"``
    (stop once the fraction of missing cells is at most ``sparsity``).

    Predictions are deterministic weighted neighbor aggregates; with
    ``stochastic`` they are perturbed as in synthesis at conviction 1, drawing
    from a generator keyed by ``(seed, iteration, case id)``. With
    ``feature_first`` a case's missing features are filled in descending
    order of feature prediction conviction, each one joining the context of
    the next. Deviations are held fixed for the whole run.
    """
    if batch < 1:
        raise UsageError("batch must be a positive integer")
    if until not in TERMINATIONS:
        raise UsageError(f"termination must be one of {TERMINATIONS}")
    if until == "sparsity" and (sparsity is None or not 0 <= sparsity < 1):
        raise UsageError("sparsity target must lie in [0, 1)")
    if stochastic and seed is None:
        raise UsageError("stochastic imputation needs a seed")
    missing = model.dataset.missing
    if not missing.any():
        raise UsageError("the model has no missing values to impute")
    empty = [model.schema[j].name for j in np.flatnonzero(missing.all(axis=0))]
    if empty:
        raise InfeasibleError(f"features with no known value cannot be imputed: {empty}")
    if until == "ceiling" and ceiling is None:
        ceiling = 2.0 * expected_information(model)

    log = ImputationLog()
    all_missing = missing.all(axis=1)
    log.skipped = [int(i) for i in model.dataset.ids[all_missing]]
    total_cells = model.n * model.xi
    feature_rank = None
    if feature_first and model.xi >= 2:
        conv = feature_prediction_convictions(model)
        feature_rank = {j: (-conv[j], j) for j in range(model.xi)}
    stuck: set[tuple[int, int]] = set()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    iteration = 0
    try:
        while True:
            missing = model.dataset.missing
            if until == "sparsity" and missing.sum() / total_cells <= sparsity:
                log.termination = "sparsity"
                break
            ids = model.dataset.ids
            open_cells = missing & ~missing.all(axis=1)[:, None]
            for r, j in np.argwhere(open_cells):
                if (int(ids[r]), int(j)) in stuck:
                    open_cells[r, j] = False
            rows = np.flatnonzero(open_cells.any(axis=1))
            if rows.size == 0:
                log.termination = "complete" if not (missing & ~missing.all(axis=1)[:, None]).any() else "stuck"
                break
            ranked, info = _rank(model, rows)
            if until == "ceiling" and np.nanmin(np.where(np.isnan(info), np.inf, info)) > ceiling:
                log.termination = "ceiling"
                break
            iteration += 1
            chosen = ranked[:batch]

            def work(i):
                row = int(chosen[i])
                order = [int(j) for j in np.flatnonzero(open_cells[row])]
                if feature_rank is not None:
                    order.sort(key=feature_rank.get)
                rng = np.random.default_rng([seed, iteration, int(ids[row])]) if stochastic else None
                scales = laplace_scales(model, 1.0) if stochastic else None
                return _fill_case(model, row, order, feature_rank is not None, rng, scales)

            results = list(pool.map(work, range(len(chosen)))) if pool else [work(i) for i in range(len(chosen))]
            cells = []
            for i, filled in enumerate(results):
                row = int(chosen[i])
                done = {j for j, _ in filled}
                for j in np.flatnonzero(open_cells[row]):
                    if int(j) not in done:
                        stuck.add((int(ids[row]), int(j)))
                for j, code in filled:
                    cells.append((row, j, code))
                    log.entries.append(ImputedCell(
                        iteration, int(ids[row]), model.schema[j].name,
                        model.dataset.decode(j, code), float(code), float(info[i]),
                    ))
            if cells:
                model = model.replace(model.dataset.with_cells(cells, origin="imputed"))
    finally:
        if pool:
            pool.shutdown()
    log.passes = iteration
    log.unfillable = sorted(stuck)
    return ImputationResult(model, log)


def replay_imputation(model: Model, log: ImputationLog) -> Model:
    """Reapply a log's cells, pass by pass, to the sparse model it was produced from."""
    passes: dict[int, list] = {}
    for e in log.entries:
        passes.setdefault(e.iteration, []).append(e)
    for it in sorted(passes):
        cells = [
            (model.dataset.row_of(e.case_id), model.dataset.feature_index(e.feature), e.code)
            for e in passes[it]
        ]
        model = model.replace(model.dataset.with_cells(cells, origin="imputed"))
    return model


def parse_log(text: str, delimiter: str = ",") -> ImputationLog:
    """Read back the text form written by :meth:`ImputationLog.to_text`."""
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = next(reader, None)
    if header != ["iteration", "case_id", "feature", "value", "code", "self_information"]:
        raise UsageError("not an imputation log")
    log = ImputationLog()
    for row in reader:
        if not row:
            continue
        it, cid, feat, value, code, info = row
        log.entries.append(ImputedCell(int(it), int(cid), feat, value or None, float(code), float(info)))
    return log
