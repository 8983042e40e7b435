import json

import numpy as np
import pytest
import scipy.linalg as sla

from arlmm.cli import main
from arlmm.datagen import SimConfig, simulate
from arlmm.errors import DataError
from arlmm.fileio import read_dataset, read_matrix, write_dataset, write_matrix
from arlmm.oracle import frobenius_fit_oracle, intercept_exact, naive_kernel, primal_beta_exact


def _sim(tmp_path, *args):
    out = tmp_path / "data"
    assert main(["simulate", *args, "--out", str(out)]) == 0
    return out


def _fit(tmp_path, data_dir, *args, name="fit.json"):
    out = tmp_path / name
    code = main(["fit", "--data", str(data_dir), "--out", str(out), *args])
    return code, (json.loads(out.read_text()) if code == 0 else None)


def test_simulate_low_preset(tmp_path, capsys):
    d = _sim(tmp_path, "--preset", "LOW", "--seed", "1")
    assert read_matrix(d / "x.bin").shape == (100, 1000)
    data = read_dataset(d)
    assert (data.n, data.p, data.d, data.m) == (100, 1000, 5, 3)
    assert "x " in capsys.readouterr().out


def test_simulate_digests_repeat(tmp_path, capsys):
    _sim(tmp_path, "--n", "40", "--p", "20", "--d", "2", "--m", "2", "--seed", "4")
    first = capsys.readouterr().out.splitlines()[:-1]
    (tmp_path / "b").mkdir()
    _sim(tmp_path / "b", "--n", "40", "--p", "20", "--d", "2", "--m", "2", "--seed", "4")
    second = capsys.readouterr().out.splitlines()[:-1]
    assert first == second and len(first) >= 4


def test_simulate_infeasible(tmp_path, capsys):
    code = main(["simulate", "--n", "5", "--p", "3", "--d", "4", "--m", "2", "--out", str(tmp_path)])
    assert code != 0
    assert "infeasible" in capsys.readouterr().err


def test_simulate_needs_dimensions(tmp_path):
    assert main(["simulate", "--n", "5", "--out", str(tmp_path)]) == 1


def test_fit_em_on_low_preset_converges(tmp_path):
    d = _sim(tmp_path, "--preset", "LOW")
    code, rec = _fit(tmp_path, d, "--method", "em")
    assert code == 0
    assert rec["iterations"] <= 500
    assert rec["converged"] is True


def _oracle_exact_fit(data):
    """AVCs by least squares, PSD repair by eigenvalue clipping, then the primal solve."""
    phi = np.ones(data.p)
    k = naive_kernel(data.x, phi)
    r = data.y - data.y.mean()
    s = np.outer(r, r) - k
    vc, _ = frobenius_fit_oracle(s, data.z_blocks, "blocked")
    lam, vec = np.linalg.eigh(vc.h)
    h = (vec * np.clip(lam, 0, None)) @ vec.T
    assert vc.sigma2 > 0
    z = sla.block_diag(*data.z_blocks)
    v = z @ np.kron(np.eye(data.m), h) @ z.T + vc.sigma2 * np.eye(data.n)
    beta = primal_beta_exact(data.x, phi, v, data.y)
    return beta, intercept_exact(v, data.x, beta, data.y)


def test_fit_exact_matches_oracle(tmp_path):
    d = _sim(tmp_path, "--n", "30", "--p", "100", "--d", "2", "--m", "2", "--seed", "0")
    code, rec = _fit(tmp_path, d, "--method", "exact")
    assert code == 0
    beta, c = _oracle_exact_fit(read_dataset(d))
    got = np.asarray(rec["beta"])
    assert np.linalg.norm(got - beta) <= 1e-8 * np.linalg.norm(beta)
    assert abs(rec["intercept"] - c) <= 1e-8 * (1 + abs(c))
    assert rec["flags"].get("lambda_projected")
    assert rec["config"]["method"] == "exact"


def test_fit_unknown_method(tmp_path, capsys):
    d = _sim(tmp_path, "--n", "30", "--p", "10", "--d", "2", "--m", "2")
    code, _ = _fit(tmp_path, d, "--method", "lasso")
    assert code == 1
    assert "unknown method" in capsys.readouterr().err


def test_fit_bad_epsilon(tmp_path):
    d = _sim(tmp_path, "--n", "30", "--p", "10", "--d", "2", "--m", "2")
    assert _fit(tmp_path, d, "--epsilon", "1.5")[0] == 1


def test_fit_record_reproduces(tmp_path):
    d = _sim(tmp_path, "--n", "40", "--p", "300", "--d", "2", "--m", "2", "--seed", "3")
    _, a = _fit(tmp_path, d, "--method", "avc", "--epsilon", "0.9", "--seed", "5", name="a.json")
    cfg = a["config"]
    _, b = _fit(tmp_path, d, "--method", cfg["method"], "--epsilon", str(cfg["epsilon"]),
                "--seed", str(cfg["seed"]), "--tau", str(cfg["tau"]), name="b.json")
    assert a["beta"] == b["beta"] and a["intercept"] == b["intercept"]
    assert len(a["beta"]) == 300


def test_fit_dimension_mismatch_reported(tmp_path, capsys):
    d = _sim(tmp_path, "--n", "30", "--p", "10", "--d", "2", "--m", "2")
    write_matrix(d / "y.bin", np.zeros(29))
    assert _fit(tmp_path, d)[0] == 2
    assert "y has 29" in capsys.readouterr().err


def test_verify_theorem2(capsys):
    assert main(["verify", "--theorem", "2", "--trials", "200", "--epsilon", "0.5"]) == 0
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["passed"] and rec["trials"] == 200


def test_verify_oracle_records(capsys):
    assert main(["verify", "--theorem", "oracle"]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert all(r["passed"] for r in lines) and len(lines) == 2


def test_eval_reports_correlation(tmp_path, capsys):
    d = _sim(tmp_path, "--n", "60", "--p", "50", "--d", "2", "--m", "2", "--sparsity", "5")
    _fit(tmp_path, d)
    out = tmp_path / "eval.json"
    assert main(["eval", "--data", str(d), "--result", str(tmp_path / "fit.json"),
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert -1 <= rep["correlation"] <= 1 and rep["signal_recovery"] is not None


def test_bench_two_rows(capsys):
    assert main(["bench", "--grid", "n=64", "p=4096,8192", "--repeats", "1",
                 "--max-iter", "5"]) == 0
    lines = [x for x in capsys.readouterr().out.strip().splitlines() if x]
    assert len(lines) == 3 and lines[0].startswith("n,p,")


def test_bench_bad_grid():
    assert main(["bench", "--grid", "n=64"]) == 1
    assert main(["bench", "--grid", "q=3", "n=4", "p=8"]) == 1


def test_matrix_roundtrip_bitwise(tmp_path, rng):
    m = rng.standard_normal((7, 5))
    m[0, 0] = np.nextafter(0.0, 1.0)
    write_matrix(tmp_path / "m.bin", m)
    assert read_matrix(tmp_path / "m.bin").tobytes() == m.tobytes()
    write_matrix(tmp_path / "m.csv", m)
    assert read_matrix(tmp_path / "m.csv").tobytes() == m.tobytes()


def test_matrix_file_errors(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC" + bytes(40))
    with pytest.raises(DataError, match="magic"):
        read_matrix(bad)
    write_matrix(tmp_path / "t.bin", np.ones((2, 2)))
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="payload"):
        read_matrix(tmp_path / "t.bin")
    (tmp_path / "r.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="r.csv:3"):
        read_matrix(tmp_path / "r.csv")


def test_csv_dataset_roundtrip(tmp_path):
    data, truth = simulate(SimConfig(n=20, p=6, d=2, m=2, seed=1))
    write_dataset(tmp_path, data, truth, fmt="csv")
    back = read_dataset(tmp_path)
    np.testing.assert_array_equal(back.x, data.x)
    assert back.group_sizes == data.group_sizes


def test_threads_env(tmp_path, monkeypatch):
    d = _sim(tmp_path, "--n", "30", "--p", "40", "--d", "2", "--m", "2")
    _, a = _fit(tmp_path, d, name="a.json")
    monkeypatch.setenv("ARLMM_THREADS", "3")
    _, b = _fit(tmp_path, d, name="b.json")
    assert a["beta"] == b["beta"]
    monkeypatch.setenv("ARLMM_THREADS", "many")
    assert _fit(tmp_path, d, name="c.json")[0] == 1
