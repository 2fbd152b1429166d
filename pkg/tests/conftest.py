import numpy as np
import pytest

from surprisalknn.data import Dataset, FeatureKind, FeatureSchema


def continuous_dataset(values, names=None) -> Dataset:
    """Dataset of continuous features from a 2-D array-like (NaN = missing)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    names = names or [f"f{j}" for j in range(arr.shape[1])]
    schema = [FeatureSchema(nm, FeatureKind.CONTINUOUS) for nm in names]
    rows = [[None if np.isnan(v) else float(v) for v in r] for r in arr]
    return Dataset.from_rows(schema, rows)


def grid_dataset(side: int, extra=()) -> Dataset:
    pts = [(float(i), float(j)) for i in range(side) for j in range(side)]
    return continuous_dataset(pts + list(extra), ["x", "y"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns whether the check and its time budget both held."""

    def record(number: int, title: str, ok: bool, elapsed: float, budget: float, detail: str = "") -> bool:
        passed = bool(ok) and elapsed < budget
        line = f"ACCEPTANCE {number:02d} {'PASS' if passed else 'FAIL'}  {title}  [{elapsed:.3g} s < {budget:g} s]"
        if detail:
            line += f"  {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE].append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
