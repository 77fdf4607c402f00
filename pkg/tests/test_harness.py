"""Tests for config handling, Monte-Carlo orchestration and the CLI."""

import csv
import subprocess
import sys

import numpy as np
import pytest
import yaml

from hmimo.harness import (CSV_COLUMNS, ConfigError, PROFILES, _deep_merge,
                           _format_cell, _mean_stderr_db, build_geometry,
                           crlb_rows, load_config, run_point, run_trial,
                           sweep, validate_config, write_rows_csv)


class TestConfig:
    def test_profiles_valid(self):
        for profile in PROFILES.values():
            validate_config(profile)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="profile"):
            load_config(profile="nope")

    def test_file_overrides_profile(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("trials: 5\nsweep:\n  values: [2.0]\n")
        cfg = load_config(path, profile="ci")
        assert cfg["trials"] == 5
        assert cfg["sweep"]["values"] == [2.0]
        assert cfg["sweep"]["variable"] == "snr"   # untouched profile value

    def test_empty_sweep_rejected(self):
        cfg = _deep_merge(PROFILES["ci"], {"sweep": {"values": []}})
        with pytest.raises(ConfigError, match="empty"):
            validate_config(cfg)

    def test_bad_trials_rejected(self):
        cfg = _deep_merge(PROFILES["ci"], {"trials": 0})
        with pytest.raises(ConfigError, match="trials"):
            validate_config(cfg)

    def test_degenerate_prior_rejected(self):
        cfg = _deep_merge(PROFILES["ci"], {"prior": {"z": [30.0, 30.0]}})
        with pytest.raises(ConfigError, match="degenerate"):
            validate_config(cfg)

    def test_unknown_estimator_rejected(self):
        cfg = _deep_merge(PROFILES["ci"], {"estimators": ["magic"]})
        with pytest.raises(ConfigError, match="estimator"):
            validate_config(cfg)

    def test_nonsquare_patch_sweep_rejected(self):
        cfg = _deep_merge(PROFILES["ci"],
                          {"sweep": {"variable": "patches", "values": [35]}})
        with pytest.raises(ConfigError, match="square"):
            validate_config(cfg)

    def test_unparseable_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("a: [unclosed\n")
        with pytest.raises(ConfigError, match="parse"):
            load_config(path)

    def test_build_geometry_patch_override(self):
        geom = build_geometry(PROFILES["ci"], patches=16)
        assert geom.m_patches == 16


class TestStats:
    def test_mean_stderr_db_single_value(self):
        db, se = _mean_stderr_db([0.01])
        assert db == pytest.approx(-20.0)
        assert se == 0.0

    def test_mean_stderr_db_known(self):
        vals = np.array([1.0, 3.0])
        db, se = _mean_stderr_db(vals)
        assert db == pytest.approx(10 * np.log10(2.0))
        expect_se = vals.std(ddof=1) / np.sqrt(2) / 2.0 * 10 / np.log(10)
        assert se == pytest.approx(expect_se)


@pytest.fixture(scope="module")
def mini_cfg():
    return _deep_merge(PROFILES["ci"], {
        "trials": 2,
        "sweep": {"values": [8.0]},
        "estimators": ["mp-hybrid", "ls", "known-location"],
    })


@pytest.fixture(scope="module")
def nets(trained_net):
    return {"exact": trained_net, "approx": trained_net}


class TestRunTrial:
    def test_trial_metrics(self, mini_cfg, nets):
        seq = np.random.SeedSequence(entropy=1, spawn_key=(0,))
        out = run_trial(mini_cfg, nets, "snr", 8.0, seq)
        assert set(out) == {"mp-hybrid", "ls", "known-location", "crlb"}
        assert out["mp-hybrid"]["ok"]
        assert out["mp-hybrid"]["nmse_h"] < out["ls"]["nmse_h"]
        assert out["known-location"]["nmse_h"] < 10 ** (-4.0)
        assert out["ls"]["nmse_p"] is None
        assert np.isfinite(out["crlb"])

    def test_trial_reproducible(self, mini_cfg, nets):
        out1 = run_trial(mini_cfg, nets, "snr", 8.0,
                         np.random.SeedSequence(entropy=7, spawn_key=(0,)))
        out2 = run_trial(mini_cfg, nets, "snr", 8.0,
                         np.random.SeedSequence(entropy=7, spawn_key=(0,)))
        assert out1["mp-hybrid"]["nmse_h"] == out2["mp-hybrid"]["nmse_h"]
        assert out1["crlb"] == out2["crlb"]

    def test_chains_variable_runs_hybrid_receiver(self, mini_cfg, nets):
        out = run_trial(mini_cfg, nets, "chains", 24,
                        np.random.SeedSequence(entropy=2, spawn_key=(0,)))
        assert out["mp-hybrid"]["ok"]
        assert out["mp-hybrid"]["nmse_h"] < 10 ** (-2.5)
        assert out["ls"]["ok"]   # minimum-norm completion through the combiner


class TestRunPointAndSweep:
    def test_rows_shape_and_order(self, mini_cfg, nets):
        rows = run_point(mini_cfg, nets, "snr", 8.0, 0)
        assert [r["estimator"] for r in rows] == mini_cfg["estimators"]
        for row in rows:
            assert set(row) == set(CSV_COLUMNS)
            assert row["trials_ok"] + row["trials_failed"] == 2
        by_name = {r["estimator"]: r for r in rows}
        assert by_name["mp-hybrid"]["nmse_h_db"] < by_name["ls"]["nmse_h_db"] - 10
        assert np.isnan(by_name["ls"]["nmse_p_db"])

    @staticmethod
    def _cells(rows):
        return [[_format_cell(row[c]) for c in CSV_COLUMNS] for row in rows]

    def test_sweep_reproducible_rows(self, mini_cfg, nets):
        cfg = _deep_merge(mini_cfg, {"record_timing": False})
        assert self._cells(sweep(cfg, nets)) == self._cells(sweep(cfg, nets))

    def test_threads_match_serial(self, mini_cfg, nets):
        serial = run_point(_deep_merge(mini_cfg, {"record_timing": False}),
                           nets, "snr", 8.0, 0)
        parallel = run_point(_deep_merge(mini_cfg, {"record_timing": False,
                                                    "threads": 2}),
                             nets, "snr", 8.0, 0)
        assert self._cells(serial) == self._cells(parallel)

    def test_csv_bytes_reproducible(self, mini_cfg, nets, tmp_path):
        cfg = _deep_merge(mini_cfg, {"record_timing": False})
        rows = sweep(cfg, nets)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_rows_csv(p1, rows)
        write_rows_csv(p2, sweep(cfg, nets))
        assert p1.read_bytes() == p2.read_bytes()
        with open(p1, newline="") as fh:
            reader = csv.reader(fh)
            assert next(reader) == CSV_COLUMNS

    def test_csv_io_error(self, mini_cfg):
        with pytest.raises(IOError):
            write_rows_csv("/nonexistent-dir/x.csv", [])


class TestCrlbRows:
    def test_rows_per_point(self, mini_cfg, nets):
        cfg = _deep_merge(mini_cfg, {"trials": 3,
                                     "sweep": {"values": [0.0, 10.0]}})
        rows = crlb_rows(cfg, nets["exact"])
        assert len(rows) == 2
        assert all(r["estimator"] == "crlb" for r in rows)
        assert rows[0]["crlb_db"] > rows[1]["crlb_db"]

    def test_snr_shift_exact_on_matched_draws(self, mini_cfg, nets):
        # single-point grids share the point index, hence identical draws
        lo = _deep_merge(mini_cfg, {"trials": 2, "sweep": {"values": [0.0]}})
        hi = _deep_merge(mini_cfg, {"trials": 2, "sweep": {"values": [10.0]}})
        row_lo = crlb_rows(lo, nets["exact"])[0]
        row_hi = crlb_rows(hi, nets["exact"])[0]
        assert row_lo["crlb_db"] - row_hi["crlb_db"] == pytest.approx(10.0,
                                                                      abs=1e-9)


class TestCli:
    def _run(self, *args):
        return subprocess.run([sys.executable, "-m", "hmimo.cli", *args],
                              capture_output=True, text=True)

    def test_bad_profile_is_usage_error(self):
        proc = self._run("sweep", "--profile", "nope")
        assert proc.returncode == 2

    def test_config_error_exit_code(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("trials: 0\n")
        proc = self._run("sweep", "--config", str(path))
        assert proc.returncode == 2
        assert "config error" in proc.stderr

    def test_missing_weights_exit_code(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({
            "paths": {"weights": str(tmp_path / "none.json"),
                      "weights_approx": str(tmp_path / "none2.json"),
                      "out": str(tmp_path / "out.csv")}}))
        proc = self._run("sweep", "--config", str(path))
        assert proc.returncode == 2
        assert "train subcommand" in proc.stderr

    def test_field_dump(self, tmp_path):
        out = tmp_path / "dump.csv"
        proc = self._run("field-dump", "--out", str(out),
                         "--axis", "y", "--value", "0.0",
                         "--range1", "-0.2", "0.2",
                         "--range2", "24.9", "25.1",
                         "--resolution", "3", "3")
        assert proc.returncode == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y", "z", "re_raw", "im_raw",
                           "re_derot", "im_derot"]
        assert len(rows) == 1 + 9
