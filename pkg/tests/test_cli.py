import shlex

import numpy as np
import pytest

from surprisalknn import cli


@pytest.fixture
def table(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.normal(size=40)
    lines = ["x,y,color"] + [
        f"{a!r},{2 * a + 0.1 * e!r},{'red' if a > 0 else 'blue'}" for a, e in zip(x.tolist(), rng.normal(size=40).tolist())
    ]
    path = tmp_path / "data.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def snapshot(table, tmp_path, capsys):
    out = tmp_path / "model.snap"
    assert cli.main(["--seed", "1", "ingest", str(table), "-o", str(out)]) == 0
    capsys.readouterr()
    return out


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestCommands:
    def test_ingest_reports_residuals(self, capsys, table, tmp_path):
        code, out, err = run(capsys, "--seed", 0, "ingest", table, "-o", tmp_path / "m.snap")
        assert code == 0
        assert out.startswith("feature,residual")
        assert "saved 40 cases x 3 features" in err

    def test_analyze(self, capsys, snapshot):
        code, out, _ = run(capsys, "--seed", 0, "analyze", snapshot)
        assert code == 0 and out.startswith("case_id,")
        code, out, _ = run(capsys, "--seed", 0, "analyze", snapshot, "--per-feature")
        assert out.startswith("feature,")

    def test_react_and_explain(self, capsys, snapshot):
        code, out, _ = run(capsys, "--seed", 0, "react", snapshot, "--context", "x=0.5", "--action", "y,color")
        assert code == 0
        assert out.splitlines()[1] == "color=red"
        code, live, _ = run(capsys, "--seed", 0, "react", snapshot, "--context", "x=0.5", "--action", "y", "--explain")
        code, audit, _ = run(capsys, "--seed", 0, "explain", "--audit", snapshot, "--context", "x=0.5", "--action", "y")
        assert code == 0
        assert live == audit

    def test_impute(self, capsys, tmp_path):
        data = tmp_path / "sparse.csv"
        data.write_text("a,b\n1,2\n2,4\n3,6\n4,\n5,10\n6,12\n")
        snap = tmp_path / "s.snap"
        run(capsys, "--seed", 0, "ingest", data, "-o", snap)
        code, out, err = run(capsys, "--seed", 0, "impute", snap, "--batch", 1, "-o", tmp_path / "f.snap")
        assert code == 0
        assert out.splitlines()[0] == "iteration,case_id,feature,value,code,self_information"
        assert "termination: complete" in err

    def test_reduce(self, capsys, snapshot, tmp_path):
        code, out, err = run(capsys, "--seed", 0, "reduce", snapshot, "--cap", 30, "-o", tmp_path / "r.snap")
        assert code == 0
        assert "kept 30 cases" in err

    def test_synth_default_balanced(self, capsys, snapshot):
        code, out, err = run(capsys, "--seed", 4, "synth", snapshot, "--count", 3)
        assert code == 0
        assert "--conviction 1.0" in err
        assert len(out.strip().splitlines()) == 4

    def test_compare_symmetric(self, capsys, snapshot):
        code, out, _ = run(capsys, "--seed", 0, "compare", snapshot, snapshot)
        a, b = (line.split(",")[1] for line in out.splitlines())
        assert code == 0 and a == b

    def test_eval_suite_dir(self, capsys, tmp_path):
        suite = tmp_path / "suite"
        suite.mkdir()
        rng = np.random.default_rng(0)
        for name in ("one", "two"):
            x = rng.normal(size=30)
            (suite / f"{name}.csv").write_text("x,t\n" + "".join(f"{a!r},{3 * a!r}\n" for a in x.tolist()))
        code, out, _ = run(capsys, "--seed", 0, "eval", "--suite", suite, "--configs", "fractional,lk0", "--folds", 3)
        assert code == 0
        assert "fractional" in out and "lk0" in out


class TestReproducibility:
    def test_unset_seed_is_printed_and_replayable(self, capsys, snapshot):
        code, first, err = run(capsys, "synth", snapshot, "--count", 2)
        assert code == 0
        assert err.splitlines()[0].startswith("seed: ")
        invocation = err.splitlines()[1].split()
        assert invocation[0] == "surprisalknn"
        code, second, _ = run(capsys, *shlex.split(err.splitlines()[1])[1:])
        assert first == second

    def test_threads_env(self, capsys, snapshot, monkeypatch):
        monkeypatch.setenv(cli.THREADS_ENV, "3")
        _, _, err = run(capsys, "--seed", 0, "analyze", snapshot)
        assert "--threads 3" in err


class TestExitCodes:
    def test_unknown_feature(self, capsys, snapshot):
        code, _, err = run(capsys, "--seed", 0, "react", snapshot, "--context", "q=1", "--action", "y")
        assert code == 2
        assert "'q'" in err

    def test_bad_flag(self, capsys, snapshot):
        code, _, _ = run(capsys, "analyze", snapshot, "--bogus")
        assert code == 2

    def test_data_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n3\n")
        code, _, _ = run(capsys, "--seed", 0, "ingest", bad, "-o", tmp_path / "x.snap")
        assert code == 3

    def test_infeasible(self, capsys, snapshot):
        code, _, _ = run(capsys, "--seed", 0, "reduce", snapshot, "--anomaly-threshold", 0, "--cap", 2)
        assert code == 4

    def test_corruption(self, capsys, snapshot):
        snapshot.write_bytes(snapshot.read_bytes()[:-7])
        code, _, err = run(capsys, "--seed", 0, "analyze", snapshot)
        assert code == 5
        assert err.strip().endswith("(file corrupted or truncated)")
