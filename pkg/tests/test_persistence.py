import numpy as np
import pytest

from conftest import continuous_dataset
from surprisalknn.data import Dataset, FeatureKind, FeatureSchema
from surprisalknn.engine import Model
from surprisalknn.errors import CorruptionError
from surprisalknn.explain import explain_react
from surprisalknn.metric import MetricConfig
from surprisalknn.persistence import MAGIC, from_bytes, load, save, to_bytes
from surprisalknn.residuals import fit


@pytest.fixture
def mixed_model(rng):
    schema = [
        FeatureSchema("x", weight=0.3, bounds=(-10.0, 10.0)),
        FeatureSchema("h", FeatureKind.CYCLIC, weight=0.2, period=24.0),
        FeatureSchema("o", FeatureKind.ORDINAL, weight=0.2, levels=("lo", "mid", "hi")),
        FeatureSchema("c", FeatureKind.NOMINAL, weight=0.3),
    ]
    rows = [
        (float(rng.normal()), float(rng.uniform(0, 24)), ["lo", "mid", "hi"][i % 3], ["red", "blue"][i % 2])
        for i in range(30)
    ]
    rows[4] = (None, rows[4][1], rows[4][2], rows[4][3])
    return fit(Dataset.from_rows(schema, rows), k=5, p=0.5)


class TestRoundTrip:
    def test_fields_survive(self, mixed_model):
        back = from_bytes(to_bytes(mixed_model))
        assert back.schema == mixed_model.schema
        assert np.array_equal(back.dataset.values, mixed_model.dataset.values, equal_nan=True)
        assert back.dataset.symbols == mixed_model.dataset.symbols
        assert (back.k, back.alpha, back.metric) == (mixed_model.k, mixed_model.alpha, mixed_model.metric)
        assert np.array_equal(back.deviations.residuals, mixed_model.deviations.residuals)
        assert np.array_equal(back.deviations.confusion[3], mixed_model.deviations.confusion[3])
        assert back.stale

    def test_save_load_save_identical(self, mixed_model, tmp_path):
        a, b = tmp_path / "a.snap", tmp_path / "b.snap"
        save(mixed_model, a)
        save(load(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_canonical_case_order(self, rng):
        x = rng.normal(size=(10, 2))
        ds = continuous_dataset(x)
        shuffled = ds.subset(rng.permutation(10))
        assert to_bytes(Model(ds)) == to_bytes(Model(shuffled))

    def test_provenance_kept(self, rng):
        ds = continuous_dataset(rng.normal(size=(8, 2)))
        ds = ds.with_cells([(2, 1, 0.5)], origin="imputed")
        back = from_bytes(to_bytes(Model(ds)))
        assert back.dataset.imputed[2, 1]
        assert back.dataset.origins[2] == "imputed"

    def test_bundle_matches_live(self, mixed_model):
        back = from_bytes(to_bytes(mixed_model))
        for ctx in ({"x": 0.3, "h": 23.0}, {"o": "mid", "c": "red"}):
            assert explain_react(mixed_model, ctx, ["x" if "x" not in ctx else "o"]).to_text() == \
                explain_react(back, ctx, ["x" if "x" not in ctx else "o"]).to_text()


class TestCorruption:
    def test_truncated(self, mixed_model):
        data = to_bytes(mixed_model)
        for cut in (5, len(MAGIC) + 3, len(data) // 2, len(data) - 1):
            with pytest.raises(CorruptionError):
                from_bytes(data[:cut])

    def test_flipped_byte(self, mixed_model):
        data = bytearray(to_bytes(mixed_model))
        data[-10] ^= 0xFF
        with pytest.raises(CorruptionError, match="digest"):
            from_bytes(bytes(data))

    def test_version_mismatch(self, mixed_model):
        data = to_bytes(mixed_model).replace(b"version 1\n", b"version 9\n", 1)
        with pytest.raises(CorruptionError, match="version"):
            from_bytes(data)

    def test_not_a_snapshot(self):
        with pytest.raises(CorruptionError):
            from_bytes(b"hello\nworld\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorruptionError):
            load(tmp_path / "absent.snap")

    def test_atomic_save_leaves_no_temp(self, mixed_model, tmp_path):
        save(mixed_model, tmp_path / "m.snap")
        assert [p.name for p in tmp_path.iterdir()] == ["m.snap"]
