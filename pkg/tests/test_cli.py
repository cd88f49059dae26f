import csv

import pytest

from ikfcg.cli import EXIT_CONVERGENCE, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main, read_predictions


def rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


def test_simulate_row_count_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    flags = ["simulate", "--model", "unnormalized-vicsek", "--np", 100, "--ntau", 10, "--sigma0", 0.1, "--seed", 7]
    assert run(*flags, "--out", a) == EXIT_OK
    assert run(*flags, "--out", b) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert len(rows(a)) == 100 * 11
    assert b"\r" not in a.read_bytes()
    assert "100" in capsys.readouterr().out


def test_simulate_large_frame(tmp_path):
    out = tmp_path / "big.csv"
    assert run("simulate", "--np", 900, "--ntau", 10, "--out", out) == EXIT_OK
    assert len(rows(out)) == 9_900


def test_modified_model_round_trip(tmp_path):
    traj, params, preds = tmp_path / "t.csv", tmp_path / "p.txt", tmp_path / "pred.csv"
    assert run("simulate", "--model", "modified-vicsek", "--np", 60, "--ntau", 4, "--seed", 1, "--out", traj) == 0
    assert run("estimate", "--trajectory", traj, "--model", "modified-vicsek", "--radii", 0.5,
               "--ratios", "100,1000", "--gammas", "0.5,1", "--out", params) == EXIT_OK
    assert run("predict", "--trajectory", traj, "--params", params, "--out", preds) == EXIT_OK
    table = read_predictions(preds)
    assert sorted(table) == [1, 2] and all(t["mean"].size == 200 for t in table.values())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    paths = {k: d / f"{k}" for k in ("traj.csv", "params.txt", "pred.csv", "metrics.csv", "plot.svg")}
    assert run("simulate", "--np", 100, "--ntau", 10, "--sigma0", 0.1, "--seed", 0, "--out", paths["traj.csv"]) == 0
    assert run("estimate", "--trajectory", paths["traj.csv"], "--out", paths["params.txt"]) == 0
    assert run("predict", "--trajectory", paths["traj.csv"], "--params", paths["params.txt"], "--grid=-1:1",
               "--out", paths["pred.csv"], "--plot", paths["plot.svg"]) == 0
    assert run("evaluate", "--predictions", paths["pred.csv"], "--params", paths["params.txt"],
               "--out", paths["metrics.csv"]) == 0
    return paths


def test_round_trip_meets_recovery_thresholds(pipeline):
    m = rows(pipeline["metrics.csv"])
    assert list(m[0]) == ["interaction", "nrmse", "len95", "cov95", "n_test"]
    assert float(m[0]["nrmse"]) <= 0.05
    assert 0.85 <= float(m[0]["cov95"]) <= 1.0
    assert int(m[0]["n_test"]) == 200


def test_predictions_schema_and_plot(pipeline):
    p = rows(pipeline["pred.csv"])
    assert list(p[0]) == ["interaction", "d_star", "mean", "var", "ci_lo", "ci_hi"]
    assert len(p) == 200
    assert float(p[0]["d_star"]) == -1.0 and float(p[-1]["d_star"]) == 1.0
    assert pipeline["plot.svg"].read_text().startswith("<svg")


def test_evaluate_identical_files_gives_zero(pipeline, tmp_path):
    out = tmp_path / "m.csv"
    assert run("evaluate", "--predictions", pipeline["pred.csv"], "--truth", pipeline["pred.csv"], "--out", out) == 0
    assert all(float(r["nrmse"]) == 0.0 for r in rows(out))


def test_outputs_are_reproducible(pipeline, tmp_path):
    out = tmp_path / "again.csv"
    assert run("predict", "--trajectory", pipeline["traj.csv"], "--params", pipeline["params.txt"],
               "--grid=-1:1", "--out", out) == 0
    assert out.read_bytes() == pipeline["pred.csv"].read_bytes()


def test_verify_passes_and_detects_perturbation(capsys):
    assert run("verify", "--seed", 3) == EXIT_OK
    report = capsys.readouterr().out
    for name in ("sigma_matvec", "cholesky_entry", "jitter", "cg", "predictive"):
        assert name in report
    assert run("verify", "--perturb", 1e-3) == EXIT_VERIFY


def test_bench_marks_dense_as_skipped(tmp_path, monkeypatch):
    monkeypatch.setenv("IKFCG_ORACLE_CAP", "1500")
    out = tmp_path / "bench.csv"
    assert run("bench", "--sizes", "1000,2000", "--repeats", 1, "--out", out, "--plot", tmp_path / "b.svg") == 0
    table = rows(out)
    assert [(r["N"], r["method"]) for r in table] == [("1000", "ikf"), ("1000", "direct"),
                                                      ("2000", "ikf"), ("2000", "direct")]
    assert table[3]["seconds"] == "skipped" and float(table[2]["seconds"]) > 0


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--np", "zero")
    assert exc.value.code == EXIT_USAGE
    assert run("estimate", "--trajectory", tmp_path / "missing.csv") == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--predictions", "x", "--truth", "a", "--params", "b")
    assert exc.value.code == EXIT_USAGE
    assert run("simulate", "--sigma0", -1, "--out", tmp_path / "x.csv") == EXIT_USAGE


def test_convergence_failure_exit_code(pipeline, tmp_path):
    out = tmp_path / "p.csv"
    assert run("predict", "--trajectory", pipeline["traj.csv"], "--params", pipeline["params.txt"],
               "--cg-max-iter", 1, "--out", out) == EXIT_CONVERGENCE
