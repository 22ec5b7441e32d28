import configparser
import csv
import json

import numpy as np
import pytest

from arena_fixture import STAR, write_log
from pairinfer.arena import PersistedModel, ingest, parse_named_target, run_inference
from pairinfer.cli import EXIT_NUMERIC, EXIT_OK, EXIT_PARSE, echo_config, main
from pairinfer.fitting import FitConfig
from pairinfer.simlab import SimConfig


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, model = root / "battles.csv", root / "model.json"
    write_log(data, n=5000, d=8)
    assert main(["fit", "--data", str(data), "--rank", "2", "--clip-bound", "5", "-o", str(model)]) == EXIT_OK
    return root, data, model


def test_fit_writes_model(fitted):
    _, _, model = fitted
    m = PersistedModel.load(model)
    assert m.rank == 2 and m.metadata["clip_bound"] == 5.0


def test_fit_is_deterministic(fitted, tmp_path):
    _, data, model = fitted
    again = tmp_path / "again.json"
    main(["fit", "--data", str(data), "--rank", "2", "--clip-bound", "5", "-o", str(again)])
    assert again.read_bytes() == model.read_bytes()


def test_infer_matches_library(fitted, tmp_path):
    _, data, model = fitted
    report = tmp_path / "r.json"
    target = f"entry:{STAR}:math"
    code = main(["infer", "--model", str(model), "--data", str(data), "--target", target, "--folds", "3",
                 "--seed", "4", "--report", str(report)])
    assert code == EXIT_OK
    doc = json.loads(report.read_text())
    d = ingest(data)
    rep = run_inference(d, parse_named_target(target, d), "efficient", FitConfig(rank=2, clip_bound=5.0), 3, 4)
    assert doc["estimate"] == rep.estimate and doc["se"] == rep.standard_error
    assert doc["ci"] == [rep.ci_low, rep.ci_high]


def test_leaderboard_csv(fitted, tmp_path, capsys):
    _, data, model = fitted
    out = tmp_path / "lb.csv"
    assert main(["leaderboard", "--model", str(model), "--data", str(data), "--folds", "3", "--csv", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["category", "rank", "model", "score", "se", "ci_low", "ci_high"]
    assert "== math ==" in capsys.readouterr().out


def test_config_file_and_echo(fitted, tmp_path):
    _, data, model = fitted
    ini = tmp_path / "run.ini"
    ini.write_text(f"[data]\ndata = {data}\n[fit]\nrank = 2\nclip_bound = 5\n[infer]\nmodel = {model}\n"
                   f"target = entry:{STAR}:math\nmethod = naive\n")
    echo = tmp_path / "echo.ini"
    assert main(["--config", str(ini), "--echo-config", str(echo), "infer", "--level", "0.9"]) == EXIT_OK
    cp = configparser.ConfigParser()
    cp.read(echo)
    assert cp.get("infer", "method") == "naive" and cp.getfloat("infer", "level") == 0.9
    # the echoed file reproduces the same run
    assert main(["--config", str(echo), "infer"]) == EXIT_OK


def test_echo_config_roundtrip():
    opts = {"rank": 3, "clip_bound": 7.0, "method": "efficient", "target": "entry:a:b", "data": None}
    cp = configparser.ConfigParser()
    cp.read_string(echo_config(opts))
    assert cp.getint("fit", "rank") == 3 and cp.getfloat("fit", "clip_bound") == 7.0
    assert cp.get("infer", "target") == "entry:a:b" and not cp.has_option("data", "data")


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["fit"],
    ["infer", "--model", "missing.json", "--data", "x.csv", "--target", "entry:a:b"],
    ["simulate", "--d1", "4", "--d2", "2", "--rank", "1", "--target", "entry:9,0", "-o", "x.csv"],
])
def test_parse_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_PARSE


def test_unknown_model_name_exit_2(fitted, capsys):
    _, data, model = fitted
    assert main(["infer", "--model", str(model), "--data", str(data), "--target", "entry:model-sta:math"]) == EXIT_PARSE
    assert "did you mean" in capsys.readouterr().err


def test_numerical_failure_exit_3(fitted, tmp_path):
    _, data, _ = fitted
    # rank above the number of categories cannot be fitted
    assert main(["fit", "--data", str(data), "--rank", "9", "-o", str(tmp_path / "m.json")]) in (EXIT_PARSE,
                                                                                                 EXIT_NUMERIC)


def test_help_exit_0():
    assert main(["--help"]) == EXIT_OK


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--d1", "6", "--d2", "3", "--rank", "1", "--n", "200", "--seed", "5"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["-o", str(a), "--truth", str(tmp_path / "t.csv")]) == EXIT_OK
    main(args + ["-o", str(b)])
    assert a.read_bytes() == b.read_bytes()
    T = np.loadtxt(tmp_path / "t.csv", delimiter=",")
    assert T.shape == (6, 3)
    main(args[:-1] + ["6", "-o", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_simulate_echo_config_roundtrip(tmp_path):
    echo = tmp_path / "sim.ini"
    main(["--echo-config", str(echo), "simulate", "--d1", "6", "--d2", "3", "--rank", "1", "--n", "100",
          "--methods", "efficient,ipw_known", "--sampling", "dirichlet:5", "-o", str(tmp_path / "a.csv")])
    cp = configparser.ConfigParser()
    cp.read(echo)
    assert cp.get("simulate", "methods") == "efficient,ipw_known"
    main(["--config", str(echo), "simulate", "-o", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_mc_command(tmp_path):
    out, diag = tmp_path / "summary.csv", tmp_path / "diag.csv"
    code = main(["mc", "--d1", "8", "--d2", "4", "--rank", "1", "--alpha", "1.5", "--n", "2000", "--replications", "2",
                 "--k-folds", "3", "--methods", "efficient", "-o", str(out), "--diagnostics", str(diag)])
    assert code == EXIT_OK
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["method"] == "efficient" and rows[0]["replications"] == "2"
    with open(diag) as fh:
        assert fh.readline().strip() == "method,replication,estimate,se,z,covered"
    assert SimConfig().se_mode == "full_sample"
