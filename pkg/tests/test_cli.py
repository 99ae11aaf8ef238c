import csv
import json
import math

import numpy as np
import pytest

from subcell.cli import main
from subcell.config import ConfigError, config_digest, dump_config, load_config, parse_config
from subcell.harness import TABLE2, synth_dataset

PLAN = """
seed = 7
[durations]
table2_set = 1
[planner]
n_r = 2
n1 = 10
overlap_ratio = 0.1
eta = 0.99
gamma = {gamma}
qos = {qos}
strict = true
selector = "gamma"
"""

SCENARIO = """
seed = 5
[scenario]
eps_sq_list = [0.0, 0.1, 1.0, 5.0, 10.0]
zeta_list = [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0]
n_trials = 200
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestFit:
    def test_exponential(self, tmp_path):
        data = np.random.default_rng(0).exponential(60, 2000)
        inp = write(tmp_path, "x.txt", "\n".join(map(str, data)))
        out = tmp_path / "fit.json"
        assert main(["fit-ph", str(inp), "--m", "1", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert np.array(doc["rate_matrix"]).shape == (1, 1)
        assert len(doc["loglik"]) >= 1

    def test_empty(self, tmp_path, capsys):
        inp = write(tmp_path, "e.txt", "")
        assert main(["fit-ph", str(inp), "--out", str(tmp_path / "f.json")]) == 3
        assert "no samples" in capsys.readouterr().err

    def test_dataset1_mean(self, tmp_path):
        samples, _ = synth_dataset(TABLE2[1], 3)
        inp = write(tmp_path, "d.txt", "\n".join(map(str, samples.values.tolist())))
        out = tmp_path / "fit.json"
        assert main(["fit-ph", str(inp), "--out", str(out)]) == 0
        from subcell.phasefit import load_dist, ph_mean
        assert ph_mean(load_dist(out)) == pytest.approx(60, rel=0.05)


class TestPlan:
    def test_dataset1(self, tmp_path):
        cfg = write(tmp_path, "p.toml", PLAN.format(gamma=0.001, qos=1.0))
        assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        doc = json.loads((tmp_path / "o" / "plan.json").read_text())
        assert abs(doc["n_u_gamma"] - 19) <= 3
        assert doc["n_st_gamma"] == 2 * doc["n_u_gamma"]
        man = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert man["command"] == "plan" and man["master_seed"] == 7

    def test_gamma_one_is_minimal(self, tmp_path):
        cfg = write(tmp_path, "p.toml", PLAN.format(gamma=1.0, qos=1.0))
        assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "plan.json").read_text())["n_st_gamma"] == 2

    def test_half_qos_doubles_count(self, tmp_path):
        for q in (1.0, 0.5):
            cfg = write(tmp_path, f"p{q}.toml", PLAN.format(gamma=0.001, qos=q))
            assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / str(q)),
                         "--n-max", "60"]) == 0
        full = [float(r["mean_adequacy"]) for r in read_csv(tmp_path / "1.0" / "adequacy.csv")]
        half = [float(r["mean_adequacy"]) for r in read_csv(tmp_path / "0.5" / "adequacy.csv")]
        for n in range(1, 30):
            assert half[n - 1] == pytest.approx(full[2 * n - 1], abs=1e-15)

    def test_unsatisfiable(self, tmp_path, capsys):
        cfg = write(tmp_path, "p.toml", PLAN.format(gamma=0.001, qos=1.0).replace(
            'selector = "gamma"', 'selector = "eta"\ncap = 5'))
        assert main(["plan", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
        assert "5" in capsys.readouterr().err

    def test_queue_analyze(self, tmp_path):
        cfg = write(tmp_path, "p.toml", PLAN.format(gamma=0.001, qos=1.0))
        assert main(["queue-analyze", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 0
        rows = read_csv(tmp_path / "q" / "offered_load.csv")
        assert float(rows[0]["offered_load"]) == 0.0


class TestSimulate:
    def test_single_trial_shape_and_determinism(self, tmp_path):
        cfg = write(tmp_path, "s.toml", SCENARIO)
        for k in (1, 2):
            assert main(["simulate", "--config", str(cfg), "--trials", "1",
                         "--out", str(tmp_path / f"r{k}")]) == 0
        a = (tmp_path / "r1" / "results.csv").read_bytes()
        assert a == (tmp_path / "r2" / "results.csv").read_bytes()
        assert len(a.decode().splitlines()) == 1 + 5 * 12 * 2
        man = json.loads((tmp_path / "r1" / "manifest.json").read_text())
        assert man["config"]["scenario"]["n_trials"] == 1
        assert man["master_seed"] == 5

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write(tmp_path, "s.toml", SCENARIO.replace("0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0", "1.0"))
        main(["simulate", "--config", str(cfg), "--trials", "1", "--out", str(tmp_path / "a")])
        main(["simulate", "--config", str(cfg), "--trials", "1", "--seed", "99",
              "--out", str(tmp_path / "b")])
        man = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert man["master_seed"] == 99
        assert (tmp_path / "a" / "results.csv").read_text() != (tmp_path / "b" / "results.csv").read_text()

    def test_compare_from_trials(self, tmp_path):
        cfg = write(tmp_path, "s.toml", SCENARIO.replace("0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0", "1.0"))
        main(["simulate", "--config", str(cfg), "--trials", "2", "--out", str(tmp_path / "a")])
        assert main(["compare", "--config", str(cfg), "--trials", "2", "--trials-file",
                     str(tmp_path / "a" / "trials.csv"), "--eps-a", "10", "--eps-b", "0",
                     "--out", str(tmp_path / "c")]) == 0
        rows = read_csv(tmp_path / "c" / "comparison.csv")
        assert len(rows) == 1 and rows[0]["eps_sq_a"] == "10.0"


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = write(tmp_path, "s.toml", "[scenario]\nn_trails = 3\n")
        assert main(["simulate", "--config", str(cfg)]) == 2
        assert "scenario.n_trails" in capsys.readouterr().err

    def test_missing_section(self, tmp_path):
        cfg = write(tmp_path, "s.toml", "seed = 1\n")
        assert main(["simulate", "--config", str(cfg)]) == 2

    def test_round_trip(self, tmp_path):
        text = PLAN.format(gamma=0.001, qos=1.0) + SCENARIO.replace("seed = 5", "") + \
            "[arrivals]\nslot_length_min = 10.0\nrates = [1.0, 2.0]\n"
        cfg = load_config(write(tmp_path, "c.toml", text))
        again = load_config(write(tmp_path, "d.toml", dump_config(cfg)))
        assert again.to_dict() == cfg.to_dict()

    def test_digest_ignores_order(self):
        a = parse_config({"seed": 1, "scenario": {"n_trials": 3, "snr_db": 10.0}})
        b = parse_config({"scenario": {"snr_db": 10.0, "n_trials": 3}, "seed": 1})
        assert config_digest(a) == config_digest(b)
        c = parse_config({"seed": 2, "scenario": {"n_trials": 3, "snr_db": 10.0}})
        assert config_digest(a) != config_digest(c)

    def test_durations_exclusive(self):
        with pytest.raises(ConfigError):
            parse_config({"durations": {"table2_set": 1, "samples": [1.0, 2.0]}})
