"""Benchmark harness comparing distance configurations, plus rank-based significance tests.

The harness is targeted: each dataset names one feature to score, every other
feature is the context, and predictions come from the same targetless
engine used everywhere else.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, FeatureKind, FeatureSchema
from .engine import Model, _neighbors, aggregate, inverse_distance_weights
from .errors import InfeasibleError, UsageError
from .metric import DeviationMode, MetricConfig
from .residuals import fit

DEFAULT_FOLDS = 5
DEFAULT_EVAL_K = 8
EXACT_WILCOXON_MAX = 25
EXACT_MANN_WHITNEY_MAX = 20
MIN_WILCOXON_PAIRS = 6


# -- significance tests -------------------------------------------------------


def midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_term(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts.astype(float) ** 3 - counts))


def _normal_two_sided(z: float) -> float:
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def _two_sided_from_counts(counts: dict[int, int], observed: int) -> float:
    total = sum(counts.values())
    low = sum(c for s, c in counts.items() if s <= observed)
    high = sum(c for s, c in counts.items() if s >= observed)
    return min(1.0, 2.0 * min(low, high) / total)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. With at most 25 remaining pairs the exact
    null distribution of the positive rank sum is enumerated (midranks for
    ties); above that a normal approximation with tie correction is used.
    Fewer than six non-tied pairs, including all pairs tied, is an error.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired samples must be one-dimensional and of equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        raise UsageError("all pairs are tied; the signed-rank test is undefined")
    if n < MIN_WILCOXON_PAIRS:
        raise UsageError(f"need at least {MIN_WILCOXON_PAIRS} non-tied pairs, have {n}")
    ranks = midranks(np.abs(diff))
    if n <= EXACT_WILCOXON_MAX:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = {0: 1}
        for r in doubled:
            nxt = dict(counts)
            for s, c in counts.items():
                nxt[s + r] = nxt.get(s + r, 0) + c
            counts = nxt
        observed = int(doubled[diff > 0].sum())
        return _two_sided_from_counts(counts, observed)
    t_plus = float(ranks[diff > 0].sum())
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(np.abs(diff)) / 48.0
    if var <= 0:
        return 1.0
    return _normal_two_sided((t_plus - mean) / math.sqrt(var))


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Mann-Whitney U p-value for independent samples.

    Up to 20 observations in total the exact permutation distribution of the
    rank sum (with midranks) is enumerated; larger samples use the normal
    approximation with tie correction.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise UsageError("both samples must be non-empty")
    na, nb = a.size, b.size
    n = na + nb
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    if n <= EXACT_MANN_WHITNEY_MAX:
        doubled = np.rint(2 * ranks).astype(np.int64)
        # counts[c] maps a doubled rank sum to the number of c-subsets reaching it
        counts: list[dict[int, int]] = [{0: 1}] + [dict() for _ in range(na)]
        for r in doubled:
            for c in range(na, 0, -1):
                prev = counts[c - 1]
                cur = counts[c]
                for s, m in prev.items():
                    cur[s + r] = cur.get(s + r, 0) + m
        observed = int(doubled[:na].sum())
        return _two_sided_from_counts(counts[na], observed)
    u = float(ranks[:na].sum()) - na * (na + 1) / 2.0
    mean = na * nb / 2.0
    var = na * nb / 12.0 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return 1.0
    return _normal_two_sided((u - mean) / math.sqrt(var))


# -- scores -------------------------------------------------------------------


def r_squared(actual: np.ndarray, predicted: np.ndarray) -> float:
    """``1 - SSE/SST`` with SST about the mean of ``actual``; 0 when SST is 0."""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0:
        return 0.0
    return 1.0 - float(np.sum((actual - predicted) ** 2)) / sst


def accuracy(actual: np.ndarray, predicted: np.ndarray) -> float:
    actual = np.asarray(actual)
    return float(np.mean(actual == np.asarray(predicted))) if actual.size else 0.0


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Benchmark:
    name: str
    dataset: Dataset
    target: str

    @property
    def task(self) -> str:
        kind = self.dataset.schema[self.dataset.feature_index(self.target)].kind
        return "classification" if kind is FeatureKind.NOMINAL else "regression"


def _continuous(names) -> list[FeatureSchema]:
    return [FeatureSchema(nm, FeatureKind.CONTINUOUS, 1.0 / len(names)) for nm in names]


def _assemble(name: str, inputs: np.ndarray, target, nominal_target: bool) -> Benchmark:
    names = [f"x{i}" for i in range(inputs.shape[1])]
    schema = _continuous(names + ["y"])
    if nominal_target:
        schema[-1] = FeatureSchema("y", FeatureKind.NOMINAL, schema[-1].weight)
    rows = [list(map(float, r)) + [t if nominal_target else float(t)] for r, t in zip(inputs, target)]
    return Benchmark(name, Dataset.from_rows(schema, rows), "y")


def _regression_generators():
    """Each generator maps (rng, n) to (inputs, target); scales vary deliberately."""

    def linear(rng, n):
        x = rng.normal(size=(n, 3)) * [1.0, 10.0, 0.1]
        return x, x @ [1.0, 0.1, 10.0] + rng.normal(scale=0.3, size=n)

    def sine(rng, n):
        x = rng.uniform(-3, 3, size=(n, 2))
        x = np.c_[x, rng.normal(scale=50.0, size=n)]
        return x, np.sin(x[:, 0]) * 2 + 0.5 * x[:, 1] + rng.normal(scale=0.2, size=n)

    def product(rng, n):
        x = rng.uniform(0, 2, size=(n, 3))
        x[:, 2] *= 1000.0
        return x, x[:, 0] * x[:, 1] + rng.normal(scale=0.1, size=n)

    def quadratic(rng, n):
        x = rng.normal(size=(n, 4)) * [1.0, 1.0, 100.0, 0.01]
        return x, x[:, 0] ** 2 - x[:, 1] + rng.normal(scale=0.3, size=n)

    def absval(rng, n):
        x = rng.uniform(-5, 5, size=(n, 3))
        x[:, 1] *= 200.0
        return x, np.abs(x[:, 0]) + rng.normal(scale=0.3, size=n)

    def steps(rng, n):
        x = rng.uniform(0, 10, size=(n, 3))
        x[:, 2] = rng.normal(scale=0.001, size=n)
        return x, np.floor(x[:, 0] / 2) + 0.3 * x[:, 1] + rng.normal(scale=0.2, size=n)

    def exponential(rng, n):
        x = rng.uniform(0, 2, size=(n, 3)) * [1.0, 1.0, 500.0]
        return x, np.exp(x[:, 0]) - x[:, 1] + rng.normal(scale=0.3, size=n)

    def ratio(rng, n):
        x = rng.uniform(1, 3, size=(n, 4)) * [1.0, 1.0, 1e3, 1e-3]
        return x, x[:, 0] / x[:, 1] + rng.normal(scale=0.05, size=n)

    def mixed_noise(rng, n):
        x = np.c_[rng.normal(size=n), rng.normal(scale=30.0, size=(n, 3))]
        return x, 3 * x[:, 0] + rng.normal(scale=0.5, size=n)

    def friedman(rng, n):
        x = rng.uniform(0, 1, size=(n, 5))
        x[:, 4] *= 100.0
        y = 10 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 20 * (x[:, 2] - 0.5) ** 2 + 10 * x[:, 3]
        return x, y + rng.normal(scale=0.5, size=n)

    return [linear, sine, product, quadratic, absval, steps, exponential, ratio, mixed_noise, friedman]


def _classification_generators():
    def threshold(rng, n):
        x = rng.normal(size=(n, 3)) * [1.0, 20.0, 1.0]
        return x, np.where(x[:, 0] + 0.05 * x[:, 1] > 0, "pos", "neg")

    def disc(rng, n):
        x = rng.uniform(-1, 1, size=(n, 3))
        x[:, 2] *= 100.0
        return x, np.where(x[:, 0] ** 2 + x[:, 1] ** 2 < 0.5, "in", "out")

    def xor(rng, n):
        x = rng.uniform(-1, 1, size=(n, 3))
        return x, np.where(x[:, 0] * x[:, 1] > 0, "same", "diff")

    def bands(rng, n):
        x = rng.uniform(0, 9, size=(n, 2))
        x = np.c_[x, rng.normal(scale=1e3, size=n)]
        return x, np.array(["a", "b", "c"])[(x[:, 0] // 3).astype(int)]

    def blobs(rng, n):
        centers = np.array([[0, 0], [3, 3], [0, 4]])
        lab = rng.integers(3, size=n)
        x = centers[lab] + rng.normal(size=(n, 2))
        x = np.c_[x, rng.normal(scale=10.0, size=n)]
        return x, np.array(["r", "g", "b"])[lab]

    def diagonal(rng, n):
        x = rng.uniform(0, 1, size=(n, 4)) * [1.0, 1.0, 1e-3, 1e3]
        return x, np.where(x[:, 0] > x[:, 1], "above", "below")

    def noisy_threshold(rng, n):
        x = rng.normal(size=(n, 3))
        flip = rng.random(n) < 0.1
        return x, np.where((x[:, 0] > 0) ^ flip, "yes", "no")

    def ring(rng, n):
        r = rng.uniform(0, 2, size=n)
        t = rng.uniform(0, 2 * np.pi, size=n)
        x = np.c_[r * np.cos(t), r * np.sin(t), rng.normal(scale=5.0, size=n)]
        return x, np.where(r > 1, "outer", "inner")

    def product_sign(rng, n):
        x = rng.normal(size=(n, 3)) * [1.0, 1.0, 50.0]
        return x, np.where(x[:, 0] * x[:, 1] + 0.3 * x[:, 0] > 0, "p", "n")

    def quartiles(rng, n):
        x = rng.normal(size=(n, 3)) * [2.0, 0.01, 1.0]
        q = np.digitize(x[:, 0] + x[:, 2], [-1.5, 0, 1.5])
        return x, np.array(["q1", "q2", "q3", "q4"])[q]

    return [threshold, disc, xor, bands, blobs, diagonal, noisy_threshold, ring, product_sign, quartiles]


def regression_suite(count: int = 10, seed: int = 0, n: int = 120) -> list[Benchmark]:
    """Bundled synthetic regression benchmarks with mixed feature scales and irrelevant features."""
    gens = _regression_generators()
    rng = np.random.default_rng(seed)
    return [
        _assemble(f"reg_{gens[i % len(gens)].__name__}_{i}", *gens[i % len(gens)](rng, n), nominal_target=False)
        for i in range(count)
    ]


def classification_suite(count: int = 10, seed: int = 0, n: int = 120) -> list[Benchmark]:
    """Bundled synthetic classification benchmarks."""
    gens = _classification_generators()
    rng = np.random.default_rng(seed)
    return [
        _assemble(f"cls_{gens[i % len(gens)].__name__}_{i}", *gens[i % len(gens)](rng, n), nominal_target=True)
        for i in range(count)
    ]


def linear_suite(count: int = 10, seed: int = 0, n: int = 200) -> list[Dataset]:
    """Complete datasets whose features are noisy linear views of one or two shared latent factors."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        xi = 3 + i % 3
        latent = rng.normal(size=(n, 1 + i % 2))
        loading = rng.uniform(0.5, 2.0, size=(latent.shape[1], xi)) * rng.choice([-1, 1], size=(latent.shape[1], xi))
        scale = 10.0 ** rng.integers(-2, 3, size=xi)
        x = (latent @ loading + rng.normal(scale=0.3, size=(n, xi))) * scale
        out.append(Dataset.from_rows(_continuous([f"f{j}" for j in range(xi)]), x.tolist()))
    return out


# -- harness ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    label: str
    p: float
    mode: DeviationMode
    standardize: bool = False
    fit_residuals: bool = False


CONFIGS = {
    "classic": EvalConfig("classic", 2.0, DeviationMode.NONE, standardize=True),
    "fractional": EvalConfig("fractional", 0.5, DeviationMode.NONE),
    "lk0": EvalConfig("lk0", 0.0, DeviationMode.LK_NORMAL, fit_residuals=True),
}


@dataclass
class EvalResult:
    """Scores per (benchmark, configuration) plus aggregate and pairwise views."""

    benchmarks: list
    configs: list
    scores: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)

    def column(self, label: str) -> np.ndarray:
        return np.array([self.scores[(b, label)] for b in self.benchmarks])

    def mean(self, label: str) -> float:
        return float(self.column(label).mean())

    def wilcoxon(self, a: str, b: str) -> float:
        return wilcoxon_signed_rank(self.column(a), self.column(b))

    def to_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["benchmark", "task", "config", "p", "mode", "standardized", "score"])
        for b in self.benchmarks:
            for c in self.configs:
                cfg = CONFIGS.get(c)
                w.writerow([b, self.tasks[b], c, cfg.p if cfg else "", cfg.mode.value if cfg else "",
                            cfg.standardize if cfg else "", repr(float(self.scores[(b, c)]))])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'config':<12}{'mean score':>12}"]
        for c in self.configs:
            lines.append(f"{c:<12}{self.mean(c):>12.4f}")
        pairs = [(a, b) for i, a in enumerate(self.configs) for b in self.configs[i + 1 :]]
        for a, b in pairs:
            try:
                p = self.wilcoxon(a, b)
                lines.append(f"wilcoxon {a} vs {b}: p = {p:.4g}")
            except UsageError as exc:
                lines.append(f"wilcoxon {a} vs {b}: {exc}")
        return "\n".join(lines) + "\n"


def _standardize(train: Dataset, test: Dataset, skip: int) -> tuple[Dataset, Dataset]:
    tv, sv = train.values.copy(), test.values.copy()
    for j, f in enumerate(train.schema):
        if j == skip or f.kind is not FeatureKind.CONTINUOUS:
            continue
        mu = np.nanmean(tv[:, j])
        sd = np.nanstd(tv[:, j])
        sd = sd if sd > 0 else 1.0
        tv[:, j] = (tv[:, j] - mu) / sd
        sv[:, j] = (sv[:, j] - mu) / sd
    rebuild = lambda d, v: Dataset(d.schema, v, d.ids, d.origins, d.sessions, d.symbols, d.imputed)
    return rebuild(train, tv), rebuild(test, sv)


def predict_feature(model: Model, codes: np.ndarray, target: int) -> np.ndarray:
    """Predict one feature's code for each coded row from all its other known features."""
    out = np.empty(codes.shape[0])
    for r, row in enumerate(codes):
        cols = [j for j in range(model.xi) if j != target and not math.isnan(row[j])]
        rows, d = _neighbors(model, row, cols, model.k, require_known=[target])
        out[r] = aggregate(model, target, rows, inverse_distance_weights(d, model.alpha))
    return out


def _score_cell(bench: Benchmark, config: EvalConfig, folds: list[np.ndarray], k: int) -> float:
    ds = bench.dataset
    t = ds.feature_index(bench.target)
    nominal = ds.schema[t].kind is FeatureKind.NOMINAL
    scores = []
    everything = np.arange(ds.n)
    for test_rows in folds:
        train_rows = np.setdiff1d(everything, test_rows)
        train, test = ds.subset(train_rows), ds.subset(test_rows)
        if config.standardize:
            train, test = _standardize(train, test, t)
        kk = min(k, train.n - 1)
        metric = MetricConfig(p=config.p, mode=config.mode)
        if config.fit_residuals:
            model = fit(train, k=kk, p=config.p, mode=config.mode)
        else:
            model = Model(train, k=kk, metric=metric)
        query = test.values.copy()
        query[:, t] = np.nan
        pred = predict_feature(model, query, t)
        actual = test.values[:, t]
        scores.append(accuracy(actual, pred) if nominal else r_squared(actual, pred))
    return float(np.mean(scores))


def fold_assignment(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def evaluate(
    benchmarks: Sequence[Benchmark],
    configs: Sequence[str | EvalConfig] = ("classic", "fractional", "lk0"),
    *,
    folds: int = DEFAULT_FOLDS,
    train_fraction: float | None = None,
    k: int = DEFAULT_EVAL_K,
    seed: int = 0,
    threads: int = 1,
) -> EvalResult:
    """Cross-validated score of every benchmark under every configuration.

    Regression benchmarks score r-squared and classification benchmarks
    accuracy, averaged over folds. With ``train_fraction`` a single seeded
    split replaces cross-validation. Fold assignment depends only on the
    seed and the benchmark size.
    """
    cfgs = []
    for c in configs:
        if isinstance(c, EvalConfig):
            cfgs.append(c)
        elif c in CONFIGS:
            cfgs.append(CONFIGS[c])
        else:
            raise UsageError(f"unknown configuration {c!r}; choose from {sorted(CONFIGS)}")
    splits = {}
    for b in benchmarks:
        n = b.dataset.n
        if train_fraction is not None:
            if not 0 < train_fraction < 1:
                raise UsageError("train fraction must lie in (0, 1)")
            perm = np.random.default_rng(seed).permutation(n)
            cut = int(round(train_fraction * n))
            parts = [np.sort(perm[cut:])]
            if cut < 2 or cut >= n:
                raise InfeasibleError(f"benchmark {b.name!r} is too small for the split")
        else:
            if folds < 2 or n < 2 * folds:
                raise InfeasibleError(f"benchmark {b.name!r} with {n} cases is too small for {folds} folds")
            parts = fold_assignment(n, folds, seed)
        splits[b.name] = parts
    result = EvalResult([b.name for b in benchmarks], [c.label for c in cfgs])
    result.tasks = {b.name: b.task for b in benchmarks}
    cells = [(b, c) for b in benchmarks for c in cfgs]
    work = lambda cell: _score_cell(cell[0], cell[1], splits[cell[0].name], k)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = list(pool.map(work, cells))
    else:
        values = [work(cell) for cell in cells]
    for (b, c), v in zip(cells, values):
        result.scores[(b.name, c.label)] = v
    return result


def load_benchmarks(paths: Sequence[str], target: str | None = None, delimiter: str = ",") -> list[Benchmark]:
    """User-supplied benchmark files; the target defaults to each file's last column."""
    from pathlib import Path

    from .data import infer_schema, parse_table

    out = []
    for p in paths:
        text = Path(p).read_text()
        ds = parse_table(text, infer_schema(text, delimiter), delimiter)
        out.append(Benchmark(Path(p).stem, ds, target or ds.feature_names[-1]))
    return out
