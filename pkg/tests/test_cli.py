import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cocsim.ccdf import Ccdf
from cocsim.cli import main


def exp_config(lam=0.5, d=1, k=1, **sections):
    cfg = {"mix": {"lambda": lam, "classes": [{"d": d, "k": k, "sizes": {"marginal": {"kind": "exponential", "rate": 1.0}}}]}}
    cfg.update(sections)
    return cfg


@pytest.fixture
def write_config(tmp_path):
    def write(cfg, name="cfg.json"):
        p = tmp_path / name
        p.write_text(json.dumps(cfg))
        return str(p)
    return write


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


SMALL_SIM = {"n": 20, "horizon": 200.0, "tagged": 2, "seed": 4}


class TestSimulate:
    def test_outputs(self, tmp_path, write_config):
        out = tmp_path / "o"
        assert run("simulate", "--config", write_config(exp_config(sim=SMALL_SIM)), "--out", out) == 0
        met = json.loads((out / "metrics.json").read_text())
        assert 0 < met["load"] < 1
        x = Ccdf.from_csv(out / "ccdf.csv")
        assert x.values[0] == pytest.approx(met["load"])
        rows = read_csv(out / "tagged.csv")
        assert rows[0] == ["epoch", "W_1", "W_2"] and len(rows) == met["snapshots"] + 1

    def test_no_arrivals(self, tmp_path, write_config):
        out = tmp_path / "o"
        assert run("simulate", "--config", write_config(exp_config(0.0, sim=SMALL_SIM)), "--out", out) == 0
        assert not np.any(Ccdf.from_csv(out / "ccdf.csv").values)

    def test_missing_lambda(self, tmp_path, write_config, capsys):
        cfg = exp_config()
        del cfg["mix"]["lambda"]
        assert run("simulate", "--config", write_config(cfg), "--out", tmp_path / "o") == 2
        assert "mix.lambda" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, write_config, capsys):
        cfg = exp_config(sim={"n": 10, "colour": "blue"})
        assert run("simulate", "--config", write_config(cfg), "--out", tmp_path / "o") == 2
        assert "sim" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run("simulate", "--config", bad) == 2
        assert run("simulate", "--config", tmp_path / "missing.json") == 2

    def test_missing_law_parameter(self, tmp_path, write_config, capsys):
        cfg = exp_config()
        del cfg["mix"]["classes"][0]["sizes"]["marginal"]["rate"]
        assert run("simulate", "--config", write_config(cfg), "--out", tmp_path / "o") == 2
        assert "missing size-law parameter 'rate'" in capsys.readouterr().err

    def test_invalid_sim_section(self, tmp_path, write_config):
        cfg = exp_config(d=3, sim={"n": 2, "horizon": 10.0})
        assert run("simulate", "--config", write_config(cfg), "--out", tmp_path / "o") == 2

    def test_runtime_error(self, tmp_path, write_config, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise FloatingPointError("overflow")
        monkeypatch.setattr("cocsim.cli.run_simulation", boom)
        assert run("simulate", "--config", write_config(exp_config(sim=SMALL_SIM)), "--out", tmp_path / "o") == 1
        assert "overflow" in capsys.readouterr().err

    def test_seed_override(self, tmp_path, write_config):
        path = write_config(exp_config(sim=SMALL_SIM))
        run("simulate", "--config", path, "--out", tmp_path / "a")
        run("simulate", "--config", path, "--out", tmp_path / "b", "--seed", 99)
        assert (tmp_path / "a" / "metrics.json").read_bytes() != (tmp_path / "b" / "metrics.json").read_bytes()


class TestSolve:
    def test_single_server(self, tmp_path, write_config):
        out = tmp_path / "o"
        assert run("solve-fp", "--config", write_config(exp_config(grid={"step": 0.005, "max": 60.0})), "--out", out) == 0
        head = json.loads((out / "fp.json").read_text())
        assert head["rho"] == pytest.approx(0.5, abs=1e-3)
        x = Ccdf.from_csv(out / "fp.csv")
        assert x.values[0] == pytest.approx(head["rho"])

    def test_supercritical(self, tmp_path, write_config):
        out = tmp_path / "o"
        assert run("solve-fp", "--config", write_config(exp_config(1.2, grid={"step": 0.05})), "--out", out) == 0
        assert json.loads((out / "fp.json").read_text())["verdict"] == "supercritical"
        assert not (out / "fp.csv").exists()

    def test_zero_rate_and_finite_frame(self, tmp_path, write_config):
        out = tmp_path / "o"
        assert run("solve-fp", "--config", write_config(exp_config(0.0, grid={"step": 0.05})), "--out", out) == 0
        assert json.loads((out / "fp.json").read_text())["rho"] == 0.0
        assert run("solve-fp", "--config", write_config(exp_config(grid={"step": 0.01, "max": 6.0})),
                   "--out", out, "--frame", "4") == 0
        assert json.loads((out / "fp.json").read_text())["rho"] == pytest.approx(0.46371, abs=1e-4)

    def test_bad_frame(self, tmp_path, write_config):
        assert run("solve-fp", "--config", write_config(exp_config()), "--out", tmp_path, "--frame", "wide") == 2

    def test_sweep(self, tmp_path, write_config):
        out = tmp_path / "o"
        cfg = write_config(exp_config(grid={"step": 0.02}))
        assert run("sweep", "--config", cfg, "--out", out, "--lambda-list", "0,0.3,0.6,1.2") == 0
        rows = read_csv(out / "rho_curve.csv")
        assert rows[0] == ["lambda", "rho", "frame_or_supercritical"]
        assert float(rows[1][1]) == 0.0
        assert float(rows[2][1]) == pytest.approx(0.3, abs=2e-3)
        assert float(rows[3][1]) == pytest.approx(0.6, abs=2e-3)
        assert rows[4][2] == "supercritical"
        assert run("sweep", "--config", cfg, "--out", out, "--lambda-list", "a,b") == 2


class TestCompare:
    def test_self_comparison(self, tmp_path):
        x = Ccdf(0.1, [0.5, 0.3, 0.1, 0.0])
        x.to_csv(tmp_path / "fp.csv")
        (tmp_path / "fp.json").write_text(json.dumps({"rho": 0.5}))
        (tmp_path / "metrics.json").write_text(json.dumps({"ccdf_step": 0.1, "empirical_ccdf": list(x.values), "load": 0.5}))
        out = tmp_path / "o"
        assert run("compare", "--metrics", tmp_path / "metrics.json", "--fp", tmp_path / "fp.json", "--out", out) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["pass"] and rep["levy"] == 0 and rep["sup"] == 0
        assert run("compare", "--metrics", tmp_path / "metrics.json", "--fp", tmp_path / "fp.csv", "--out", out) == 0

    def test_budget_failure(self, tmp_path):
        Ccdf(0.1, [0.5, 0.3, 0.1, 0.0]).to_csv(tmp_path / "fp.csv")
        (tmp_path / "m.json").write_text(json.dumps({"ccdf_step": 0.1, "empirical_ccdf": [0.9, 0.8, 0.7, 0.0], "load": 0.9}))
        assert run("compare", "--metrics", tmp_path / "m.json", "--fp", tmp_path / "fp.csv", "--out", tmp_path) == 1

    def test_corrupted_csv(self, tmp_path):
        (tmp_path / "fp.csv").write_text("w,x_w\n0,0.5\n0.1,oops\n")
        (tmp_path / "m.json").write_text(json.dumps({"ccdf_step": 0.1, "empirical_ccdf": [0.5, 0.0], "load": 0.5}))
        assert run("compare", "--metrics", tmp_path / "m.json", "--fp", tmp_path / "fp.csv", "--out", tmp_path) == 2

    def test_pipeline(self, tmp_path, write_config):
        cfg = write_config(exp_config(sim={"n": 300, "horizon": 20000.0, "tagged": 2, "seed": 1, "sample_interval": 10.0},
                                      grid={"step": 0.01, "max": 40.0}))
        assert run("simulate", "--config", cfg, "--out", tmp_path / "s") == 0
        assert run("solve-fp", "--config", cfg, "--out", tmp_path / "f") == 0
        code = run("compare", "--metrics", tmp_path / "s" / "metrics.json", "--fp", tmp_path / "f" / "fp.json",
                   "--tagged", tmp_path / "s" / "tagged.csv", "--out", tmp_path / "c")
        rep = json.loads((tmp_path / "c" / "report.json").read_text())
        assert code == 0, rep
        assert rep["levy"] < 0.02 and "independence" in rep


class TestCriticalAndScan:
    def test_mean_field(self, tmp_path, write_config):
        out = tmp_path / "o"
        cfg = exp_config(1.0, grid={"step": 0.05, "max": 400.0}, critical={"tolerance": 0.005})
        assert run("critical", "--config", write_config(cfg), "--out", out) == 0
        res = json.loads((out / "lambda_bar.json").read_text())
        assert abs(res["estimate"] - 1.0) < 0.005 + 1e-3 and res["mode"] == "mf"

    def test_fixed_n(self, tmp_path, write_config):
        out = tmp_path / "o"
        cfg = exp_config(1.0, sim={"n": 50, "horizon": 2000.0}, critical={"mode": "fixed_n", "tolerance": 0.01,
                                                                          "lambda_range": [0.5, 1.5]})
        assert run("critical", "--config", write_config(cfg), "--out", out) == 0
        res = json.loads((out / "lambda_bar.json").read_text())
        assert abs(res["estimate"] - 1.0) < 0.02 and res["method"] == "free_drift"
        cfg["critical"]["lambda_range"] = [0.2, 0.4]
        assert run("critical", "--config", write_config(cfg), "--out", out) == 1

    def test_empty_class_list(self, tmp_path, write_config):
        cfg = {"mix": {"lambda": 0.5, "classes": []}}
        assert run("critical", "--config", write_config(cfg), "--out", tmp_path) == 2

    def test_dmono(self, tmp_path, write_config):
        cfg = {"mix": {"lambda": 0.5, "classes": [
            {"name": "det", "d": 2, "k": 1, "pi": 0.4, "sizes": {"marginal": {"kind": "deterministic", "value": 1.0}}},
            {"name": "exp", "d": 2, "k": 1, "pi": 0.3, "sizes": {"marginal": {"kind": "exponential", "rate": 1.0}}},
            {"name": "all", "d": 3, "k": 3, "pi": 0.3, "sizes": {"marginal": {"kind": "uniform", "upper": 2.0}}},
        ]}, "dmono": {"samples": 100_000}}
        out = tmp_path / "o"
        assert run("dmono", "--config", write_config(cfg), "--out", out) == 0
        rows = read_csv(out / "dmono.csv")
        assert rows[0][:5] == ["class", "d", "k", "hazard", "direction"]
        assert {r[0]: r[4] for r in rows[1:]} == {"det": "non_increasing", "exp": "constant", "all": "constant"}


def test_reruns_are_byte_identical(tmp_path, write_config):
    cfg = write_config(exp_config(d=2, k=1, sim=SMALL_SIM, grid={"step": 0.05}, dmono={"samples": 2000}))
    for tag in ("a", "b"):
        assert run("simulate", "--config", cfg, "--out", tmp_path / tag / "sim") == 0
        assert run("solve-fp", "--config", cfg, "--out", tmp_path / tag / "fp") == 0
        assert run("dmono", "--config", cfg, "--out", tmp_path / tag / "dm") == 0
    for sub, name in [("sim", "metrics.json"), ("sim", "ccdf.csv"), ("sim", "tagged.csv"),
                      ("fp", "fp.json"), ("fp", "fp.csv"), ("dm", "dmono.csv")]:
        assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cocsim.cli", "simulate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "--config" in proc.stderr
