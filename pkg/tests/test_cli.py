import csv
import io
import json

import numpy as np
import pytest

from eoslab import cli
from eoslab.cli import CSV_COLUMNS, ExperimentConfig, build_runs, emit_csv, main, parse_depths, preset_eta
from eoslab.dynamics import Trajectory, run, RunConfig
from eoslab.errors import ConfigError, DomainError
from eoslab.problem import FactorisationProblem, sharpness

P5 = FactorisationProblem(5, 1.0)


class TestConfig:
    def test_json_round_trip(self):
        cfg = ExperimentConfig(depth=3, target=2.0, regime="critical", inits=2, seed=7, theta0=None)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"depth": 5, "colour": "red"})

    @pytest.mark.parametrize("text", ["not json", "[1, 2]"])
    def test_bad_json_rejected(self, text):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(text)

    @pytest.mark.parametrize("kwargs", [
        {},
        {"regime": "chaotic"},
        {"regime": "stable", "eta": 0.1},
        {"theta0": [1.0] * 5},
        {"eta": -0.1},
        {"eta": 0.1, "inits": 0},
        {"eta": 0.1, "steps": 0},
        {"eta": 0.1, "par_offset": 1.0},
        {"eta": 0.1, "theta0": [1.0] * 4},
        {"eta": 0.1, "theta0": [1.0, 1.0, 1.0, 1.0, float("nan")]},
        {"eta": 0.1, "depth": 1},
        {"eta": 0.1, "target": 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kwargs).validate()

    def test_presets_fill_missing_fields(self):
        cfg = ExperimentConfig(depth=5, target=32.0, regime="supercritical", alpha=0.04).resolved()
        assert cfg.par_offset == pytest.approx(0.1)
        assert cfg.perp0 == pytest.approx(0.1)
        assert cfg.steps == 3750 and cfg.record_every == 5

    def test_explicit_fields_survive_resolution(self):
        cfg = ExperimentConfig(regime="critical", steps=17, perp0=3e-3).resolved()
        assert cfg.steps == 17 and cfg.perp0 == 3e-3


class TestParseDepths:
    def test_single_and_range(self):
        assert parse_depths("5") == [5]
        assert parse_depths("2..8") == list(range(2, 9))

    @pytest.mark.parametrize("text", ["x", "8..2", "2..", ""])
    def test_bad(self, text):
        with pytest.raises(ConfigError):
            parse_depths(text)


class TestBuildRuns:
    @pytest.mark.parametrize("regime", cli.REGIMES)
    def test_preset_step_sizes(self, regime):
        cfg = ExperimentConfig(regime=regime, inits=3, seed=4).resolved()
        runs = build_runs(cfg)
        assert len(runs) == 3
        for rc in runs:
            lam0 = sharpness(P5, cli.project(P5, rc.theta0))
            assert rc.eta == pytest.approx(preset_eta(cfg, lam0, P5.lambda_star), rel=1e-6)

    def test_subcritical_starts_above_threshold(self):
        cfg = ExperimentConfig(regime="subcritical", inits=5).resolved()
        for rc in build_runs(cfg):
            lam0 = sharpness(P5, cli.project(P5, rc.theta0))
            assert 2 / lam0 < rc.eta < 2 / P5.lambda_star

    def test_reproducible(self):
        cfg = ExperimentConfig(regime="stable", inits=2, seed=9).resolved()
        a, b = build_runs(cfg), build_runs(cfg)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.theta0, rb.theta0)

    def test_explicit_theta0_with_regime(self):
        cfg = ExperimentConfig(regime="critical", theta0=[1.01, 1, 1, 1, 1], inits=4).resolved()
        runs = build_runs(cfg)
        assert len(runs) == 1 and runs[0].eta == pytest.approx(0.4)


class TestCsv:
    def test_header_only_when_empty(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_csv(Trajectory.from_iterates(P5, 0.4, [], np.empty((0, 5))), path)
        assert path.read_bytes() == (",".join(CSV_COLUMNS) + "\n").encode()

    def test_values_round_trip(self, tmp_path):
        traj = run(RunConfig(P5, 0.4, par_offset=0.05, perp0=1e-2, seed=1, steps=20))
        path = tmp_path / "t.csv"
        emit_csv(traj, path)
        rows = list(csv.reader(io.StringIO(path.read_text())))
        assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == len(traj) + 1
        got = np.array(rows[1:], dtype=float)
        np.testing.assert_array_equal(got[:, 0], traj.t)
        np.testing.assert_array_equal(got[:, 4], traj.theta_perp)
        assert b"\r" not in path.read_bytes()


class TestMain:
    def test_config_error_exit_code(self, capsys):
        assert main(["--regime", "stable", "--eta", "0.1"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_argparse_error_exit_code(self, capsys):
        assert main(["--regime", "sideways"]) == 2
        assert main(["--depth", "2..x", "--check", "constants"]) == 2

    def test_help(self, capsys):
        assert main(["--help"]) == 0

    def test_numerical_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise DomainError("overflow")

        monkeypatch.setattr(cli, "run_experiment", boom)
        assert main(["--regime", "stable", "--out", str(tmp_path)]) == 3

    def test_failed_check_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "check_constants", lambda *a, **k: False)
        assert main(["--check", "constants"]) == 3

    def test_check_constants(self, capsys):
        assert main(["--check", "constants", "--depth", "2..4", "--target", "1"]) == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0][0] == "p" and len(rows) == 4
        assert all(r[-1] == "ok" for r in rows[1:])
        assert float(rows[2][4]) == pytest.approx(88 / 9)

    def test_flags_override_config(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"depth": 3, "regime": "critical", "inits": 1, "steps": 50, "figures": False}))
        out = tmp_path / "out"
        assert main(["--config", str(cfg_path), "--regime", "stable", "--steps", "30", "--out", str(out)]) == 0
        summary = json.loads((out / "stable_summary.json").read_text())
        assert summary["config"]["regime"] == "stable"
        assert summary["config"]["steps"] == 30 and summary["config"]["depth"] == 3
        assert summary["regime"]["tags"] == ["Stable"]
        assert not (out / "stable.svg").exists()

    def test_explicit_eta_run(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["--eta", "0.3", "--steps", "40", "--inits", "2", "--out", str(out), "--no-figures"]) == 0
        summary = json.loads((out / "custom_summary.json").read_text())
        assert summary["regime"]["eta"] == [0.3, 0.3]
        assert summary["trajectories"] == ["custom_init0.csv", "custom_init1.csv"]
        assert len(summary["tau"]) == len(summary["checks"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["--config", str(tmp_path / "nope.json")]) == 2
