import csv
import json
import shutil

import numpy as np
import pytest

from conftest import SMALL_SYNTH, write_config
from implcorr.cli import build_parser, load_config, main
from implcorr.strategy import LEDGER_HEADER


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def generated(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", str(cfg)]) == 0
    return tmp_path, cfg


class TestGenerate:
    def test_writes_inputs_and_creates_directories(self, tmp_path):
        cfg = write_config(tmp_path, data_dir="nested/deeper/data")
        assert main(["generate", "--config", str(cfg)]) == 0
        data = tmp_path / "nested" / "deeper" / "data"
        for name in ("trades", "snapshots", "rates", "dividends", "varswaps"):
            assert (data / f"{name}.csv").stat().st_size > 0
        assert json.loads((data / "ground_truth.json").read_text())["config"]["seed"] == 11

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["generate", "--config", str(cfg), "--seed", "99"]) == 0
        assert json.loads((tmp_path / "data" / "ground_truth.json").read_text())["config"]["seed"] == 99

    @pytest.mark.parametrize("seed", ["abc", "-3", str(2 ** 64)])
    def test_invalid_seed_string_exits_2(self, tmp_path, seed, capsys):
        cfg = write_config(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--config", str(cfg), "--seed", seed])
        assert exc.value.code == 2
        assert "seed" in capsys.readouterr().err

    @pytest.mark.parametrize("overrides", [
        dict(seed="eleven"),
        dict(synth={"n_assets": 1}),
        dict(synth={"colour": "red"}),
        dict(surprise=1),
        dict(estimation={"start": "2010-01-01", "end": "2010-06-01"}),
        dict(var={"p": 0}),
        dict(strategy={"tenors": [0.0]}),
    ])
    def test_config_errors_exit_2(self, tmp_path, overrides, capsys):
        cfg = write_config(tmp_path, **overrides)
        assert main(["generate", "--config", str(cfg)]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_or_malformed_config(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["generate", "--config", str(bad)]) == 2

    def test_thread_flag_validation(self, tmp_path):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fit", "--config", "x", "--threads", "0"])


class TestFit:
    def test_outputs_and_four_tables(self, fitted_run):
        root, _ = fitted_run
        report = (root / "out" / "fit_report.txt").read_text()
        for title in ("Explained variance", "ADF test", "VAR lag order", "VAR(1) coefficients"):
            assert title in report
        model = json.loads((root / "out" / "model.json").read_text())
        assert {"dynamics", "all_days", "ics_diagnostics"} <= set(model)
        assert (root / "out" / "ics.csv").exists()

    def test_rerun_is_byte_identical(self, fitted_run, tmp_path):
        root, cfg = fitted_run
        first = (root / "out" / "model.json").read_bytes()
        shutil.copytree(root / "data", tmp_path / "data")
        cfg2 = write_config(tmp_path)
        assert main(["fit", "--config", str(cfg2), "--threads", "1"]) == 0
        assert (tmp_path / "out" / "model.json").read_bytes() == first

    def test_corrupt_csv_names_stage_and_line(self, generated, capsys):
        root, cfg = generated
        path = root / "data" / "trades.csv"
        lines = path.read_text().splitlines()
        lines[4] = lines[4].replace(",P,", ",X,").replace(",C,", ",X,")
        path.write_text("\n".join(lines) + "\n")
        assert main(["fit", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "marketdata" in err and "trades.csv" in err and "line 5" in err

    def test_missing_input_is_runtime_failure(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["fit", "--config", str(cfg)]) == 1
        assert "marketdata" in capsys.readouterr().err


class TestBacktest:
    def test_ledger_and_summary(self, fitted_run):
        root, cfg = fitted_run
        assert main(["backtest", "--config", str(cfg)]) == 0
        rows = read_rows(root / "out" / "ledger.csv")
        assert rows and list(rows[0]) == LEDGER_HEADER
        summary = (root / "out" / "summary.txt").read_text()
        assert "Relative hedging error" in summary and "Strategy payoffs" in summary

    def test_oracle_forecast_advanced_is_positive_part(self, tmp_path):
        # the identity is exact once constituent strikes equal their realized variances
        root = tmp_path
        cfg = write_config(root, synth={**SMALL_SYNTH, "oracle_constituent_strikes": True})
        assert main(["generate", "--config", str(cfg)]) == 0
        assert main(["backtest", "--config", str(cfg), "--oracle-forecast"]) == 0
        rows = read_rows(root / "out" / "ledger.csv")
        D = np.array([float(r["D"]) for r in rows])
        adv = np.array([float(r["D_adv"]) for r in rows])
        assert len(rows) > 0
        np.testing.assert_allclose(adv, np.maximum(D, 0), atol=1e-10, rtol=0)

    def test_empty_range_gives_empty_ledger(self, fitted_run, tmp_path, caplog):
        root, _ = fitted_run
        cfg = write_config(tmp_path, data_dir=str(root / "data"), output_dir="out2",
                           backtest={"start": "2015-01-01", "end": "2015-02-01"})
        assert main(["backtest", "--config", str(cfg), "--model", str(root / "out" / "model.json")]) == 0
        text = (tmp_path / "out2" / "ledger.csv").read_text()
        assert text.splitlines() == [",".join(LEDGER_HEADER)]
        assert "empty ledger" in caplog.text

    def test_missing_model(self, generated, capsys):
        _, cfg = generated
        assert main(["backtest", "--config", str(cfg)]) == 1
        assert "model" in capsys.readouterr().err


class TestForecastAndReport:
    def test_forecast_csv(self, fitted_run):
        root, cfg = fitted_run
        assert main(["forecast", "--config", str(cfg), "--horizon", "2"]) == 0
        rows = read_rows(root / "out" / "forecast.csv")
        assert {r["step"] for r in rows} == {"1", "2"}
        rho = np.array([float(r["rho"]) for r in rows])
        assert np.all((rho > -1) & (rho < 1))

    def test_report_rebuilds_summary(self, fitted_run, capsys):
        root, cfg = fitted_run
        assert main(["backtest", "--config", str(cfg)]) == 0
        capsys.readouterr()
        assert main(["report", "--config", str(cfg)]) == 0
        assert capsys.readouterr().out == (root / "out" / "summary.txt").read_text()


def test_relative_paths_resolve_against_config(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.data_dir == tmp_path / "data" and cfg.output_dir == tmp_path / "out"
