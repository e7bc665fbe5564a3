from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from ghm import cli


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    rc = cli.main(["simulate", "--kind", "gaussian", "--scenario", "II", "--m", "20", "--n", "80",
                   "--seed", "7", "--out", str(d / "data.csv"), "--truth", str(d / "truth.json")])
    assert rc == 0
    return d


def _fit_args(d, *extra):
    return ["fit", "--data", str(d / "data.csv"), "--covariates", "x1,x2", *extra]


def test_simulate_is_deterministic(scenario, tmp_path):
    rc = cli.main(["simulate", "--scenario", "II", "--m", "20", "--n", "80", "--seed", "7",
                   "--out", str(tmp_path / "b.csv"), "--truth", str(tmp_path / "b.json")])
    assert rc == 0
    assert (tmp_path / "b.csv").read_bytes() == (scenario / "data.csv").read_bytes()
    assert (tmp_path / "b.json").read_bytes() == (scenario / "truth.json").read_bytes()


def test_fit_happy_path(scenario, tmp_path):
    out = tmp_path / "fit.json"
    rc = cli.main(_fit_args(scenario, "--G", "2", "--L", "2", "--out", str(out)))
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "ghm-fit/1"
    assert len(doc["groups"]) == 20 and len(doc["gamma"]) == 20
    assert doc["converged"] is True


def test_fit_missing_column(scenario, capsys):
    rc = cli.main(["fit", "--data", str(scenario / "data.csv"), "--response", "crimes",
                   "--covariates", "x1,x2"])
    assert rc == 1
    assert "crimes" in capsys.readouterr().err


def test_fit_bad_usage_exits_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["fit", "--G", "two"])
    assert e.value.code == 1
    assert cli.main(["fit"]) == 1
    assert "--data" in capsys.readouterr().err


def test_penalized_fit_records_xi_and_penalty(scenario, tmp_path):
    s = np.zeros((20, 20))
    s[:10, :10] = s[10:, 10:] = 1
    np.fill_diagonal(s, 0)
    np.savetxt(tmp_path / "sim.csv", s, delimiter=",", fmt="%g")
    out = tmp_path / "fit.json"
    rc = cli.main(_fit_args(scenario, "--G", "2", "--L", "2", "--xi", "0.2",
                            "--similarity", str(tmp_path / "sim.csv"), "--out", str(out)))
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["xi"] == 0.2
    g = np.array(doc["gamma"])
    expected = sum(s[i, j] for i in range(20) for j in range(i + 1, 20) if g[i] == g[j])
    assert np.isclose(doc["penalty"], expected)
    assert np.isclose(doc["penalized_objective"], doc["loglik"] + 0.2 * doc["penalty"])


def test_nonconverged_exit_2_still_writes(scenario, tmp_path):
    out = tmp_path / "fit.json"
    rc = cli.main(_fit_args(scenario, "--G", "2", "--L", "2", "--max-iter", "1", "--out", str(out)))
    assert rc == 2
    assert json.loads(out.read_text())["converged"] is False


def test_evaluate_truth_against_itself(scenario, capsys):
    t = str(scenario / "truth.json")
    assert cli.main(["evaluate", "--fit", t, "--truth", t]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mise"] == 0.0 and res["scale"] == 10.0


def test_evaluate_fit_output(scenario, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert cli.main(_fit_args(scenario, "--G", "2", "--L", "2", "--out", str(out))) == 0
    assert cli.main(["evaluate", "--fit", str(out), "--truth", str(scenario / "truth.json")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0 < res["mise"] < 0.05
    assert np.isclose(res["scaled_sqrt_mise"], 10 * np.sqrt(res["mise"]))


def test_select_single_cell(scenario, tmp_path):
    table = tmp_path / "ic.csv"
    rc = cli.main(["select", "--data", str(scenario / "data.csv"), "--covariates", "x1,x2",
                   "--G", "1", "--L", "1", "--table", str(table), "--out", str(tmp_path / "s.json")])
    assert rc == 0
    rows = table.read_text().strip().splitlines()
    assert rows[0] == "G,L=1" and len(rows) == 2


def test_select_full_grid_and_bitwise_rerun(tmp_path):
    assert cli.main(["simulate", "--m", "8", "--n", "40", "--seed", "3",
                     "--out", str(tmp_path / "d.csv"), "--truth", str(tmp_path / "t.json")]) == 0
    outs = []
    for k in range(2):
        args = ["select", "--data", str(tmp_path / "d.csv"), "--covariates", "x1,x2",
                "--G", "1..8", "--L", "2..4", "--max-iter", "100", "--seed", "5",
                "--table", str(tmp_path / f"ic{k}.csv"), "--out", str(tmp_path / f"s{k}.json")]
        assert cli.main(args) in (0, 2)
        outs.append(((tmp_path / f"ic{k}.csv").read_bytes(), (tmp_path / f"s{k}.json").read_bytes()))
    assert outs[0] == outs[1]
    rows = outs[0][0].decode().strip().splitlines()
    assert rows[0] == "G,L=2,L=3,L=4"
    assert len(rows) == 9
    assert sum(len(r.split(",")) - 1 for r in rows[1:]) == 24


def test_config_file_and_precedence(scenario, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# test config\ndata = {scenario / 'data.csv'}\ncovariates = x1,x2\n"
                   "G = 2\nL = 2\nmax-iter = 1\n")
    out = tmp_path / "a.json"
    assert cli.main(["fit", "--config", str(cfg), "--out", str(out)]) == 2
    # command line overrides the file
    assert cli.main(["fit", "--config", str(cfg), "--max-iter", "500", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["G"] == 2 and doc["max_iter"] == 500


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    with pytest.raises(SystemExit) as e:
        cli.main(["fit", "--config", str(cfg)])
    assert e.value.code == 1


def test_replicate_table(tmp_path):
    out, man = tmp_path / "r.csv", tmp_path / "m.json"
    rc = cli.main(["replicate", "--scenario", "II", "--m", "6", "--n", "30", "--R", "2",
                   "--methods", "GHM,GM,LM", "--G-max", "3", "--L-candidates", "1..2",
                   "--seed", "4", "--out", str(out), "--manifest", str(man)])
    assert rc == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["scenario", "m", "n", "GHM", "GM", "LM", "G", "L"]
    assert len(rows) == 2
    assert len(json.loads(man.read_text())["replication_seeds"]) == 2
