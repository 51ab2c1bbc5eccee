"""
Command-Line Tests
Tests the run, safe-improve, theory-check and gen-data subcommands and their exit codes.
"""
import io

import pandas as pd
import pytest

from offpolicy import bench_cli
from offpolicy.bench_cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cli_main
from offpolicy.dataset_io import load_dataset, parse_dataset

FAST_RUN = ["run", "--env", "tree", "--alpha", "0", "--estimators", "dr,step_is",
            "--n-train", "100", "--n-eval", "200", "--splits", "20,100", "--runs", "5",
            "--seed", "7"]


@pytest.mark.bench
class TestRunCommand:
    """Test suite for the RMSE comparison subcommand."""

    def test_writes_csv_with_header(self, tmp_path, test_data):
        """Verify --out receives the RMSE table with the documented header."""
        out = tmp_path / "r.csv"
        assert cli_main(FAST_RUN + ["--out", str(out)]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0] == test_data["cli"]["rmse_header"], f"Unexpected header {lines[0]}"
        frame = pd.read_csv(out)
        assert set(frame["method"]) == {"dr", "step_is"}
        assert sorted(frame.loc[frame.method == "dr", "split"]) == [20, 100]
        assert frame.loc[frame.method == "step_is", "split"].tolist() == [200], \
            "Split-free methods report split = n_eval"
        assert (frame["n"] == 5).all(), "n counts the runs"

    def test_stdout_when_no_out(self, capsys, test_data):
        """Verify the table goes to standard output without --out."""
        assert cli_main(FAST_RUN) == EXIT_OK
        out = capsys.readouterr().out
        assert out.splitlines()[0] == test_data["cli"]["rmse_header"]

    def test_same_seed_same_table(self, capsys):
        """Verify two invocations with the same seed print identical tables."""
        cli_main(FAST_RUN)
        first = capsys.readouterr().out
        cli_main(FAST_RUN)
        assert capsys.readouterr().out == first, "Runs must be reproducible"

    def test_runs_out_records_every_estimate(self, tmp_path, capsys):
        """Verify --runs-out stores one row per run, method, alpha and split."""
        runs_path = tmp_path / "runs.csv"
        assert cli_main(FAST_RUN + ["--runs-out", str(runs_path)]) == EXIT_OK
        runs = pd.read_csv(runs_path)
        assert len(runs) == 5 * 3, "dr at two splits plus step_is, five runs"
        assert {"run", "method", "alpha", "split", "estimate", "truth"} <= set(runs.columns)

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        """Verify --runs beats the config file's runs."""
        cfg = tmp_path / "run.cfg"
        cfg.write_text("runs = 3\nestimators = step_is\n")
        argv = ["run", "--config", str(cfg), "--env", "tree", "--n-train", "100",
                "--n-eval", "200", "--runs", "2"]
        assert cli_main(argv) == EXIT_OK
        frame = pd.read_csv(io.StringIO(capsys.readouterr().out))
        assert frame["n"].tolist() == [2], "Command-line runs must win"
        assert frame["method"].tolist() == ["step_is"], "File estimators must apply"


@pytest.mark.bench
class TestExitCodes:
    """Test suite for usage, validation and runtime failures."""

    def test_unknown_estimator(self, capsys):
        """Verify an unknown estimator id exits 1 with usage text."""
        code = cli_main(["run", "--env", "tree", "--estimators", "dr,magic"])
        err = capsys.readouterr().err
        assert code == EXIT_USAGE and "magic" in err and "usage:" in err

    def test_unknown_flag(self, capsys):
        """Verify an unrecognized flag exits 1."""
        assert cli_main(["run", "--frobnicate"]) == EXIT_USAGE
        assert "usage:" in capsys.readouterr().err

    def test_missing_subcommand(self):
        """Verify running without a subcommand exits 1."""
        assert cli_main([]) == EXIT_USAGE

    def test_bad_number_list(self):
        """Verify a malformed --alpha list exits 1."""
        assert cli_main(["run", "--alpha", "0,half"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path, capsys):
        """Verify an unreadable config file exits 1."""
        assert cli_main(["run", "--config", str(tmp_path / "absent.cfg")]) == EXIT_USAGE

    def test_bad_log_level(self):
        """Verify an unknown log level exits 1."""
        assert cli_main(["theory-check", "--log-level", "chatty"]) == EXIT_USAGE

    def test_runtime_failure(self, monkeypatch, capsys):
        """Verify an exception during the experiment exits 2."""
        def boom(config):
            raise RuntimeError("simulated failure")

        monkeypatch.setattr(bench_cli, "run_rmse_experiment", boom)
        assert cli_main(FAST_RUN) == EXIT_RUNTIME
        assert "simulated failure" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        """Verify --help exits 0."""
        assert cli_main(["--help"]) == EXIT_OK


@pytest.mark.bench
class TestOtherCommands:
    """Test suite for safe-improve, theory-check and gen-data."""

    def test_safe_improve_table(self, capsys, test_data):
        """Verify safe-improve prints one row per selector and C."""
        code = cli_main(["safe-improve", "--env", "t2", "--sizes", "40", "--runs", "3",
                         "--alpha", "0,0.5", "--selectors", "is,dr", "--seed", "2"])
        out = capsys.readouterr().out
        assert code == EXIT_OK
        assert out.splitlines()[0] == test_data["cli"]["safe_header"]
        frame = pd.read_csv(io.StringIO(out))
        assert len(frame) == 4, "Two selectors times two C values"
        assert frame["fallback_rate"].between(0.0, 1.0).all()

    def test_theory_check_passes(self, capsys):
        """Verify the theory suite exits 0 and prints its worst deviation."""
        assert cli_main(["theory-check", "--seed", "7", "--trees", "2", "--dags", "1"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[-1].startswith("max_deviation"), f"Unexpected output {lines}"

    def test_gen_data_file(self, tmp_path):
        """Verify gen-data writes a loadable dataset of the requested size."""
        out = tmp_path / "t2.txt"
        assert cli_main(["gen-data", "--env", "t2", "--n", "5", "--seed", "3",
                         "--out", str(out)]) == EXIT_OK
        data = load_dataset(out)
        assert len(data) == 5 and data.meta.seed == 3 and data.meta.env_id == "t2"

    def test_gen_data_stdout_with_env_params(self, tmp_path, capsys):
        """Verify env.<param> config lines reach the generator."""
        cfg = tmp_path / "tree.cfg"
        cfg.write_text("env.horizon = 2\nenv.branch = 3\n")
        assert cli_main(["gen-data", "--env", "tree", "--n", "4", "--config", str(cfg)]) == EXIT_OK
        data = parse_dataset(capsys.readouterr().out)
        assert data.horizon == 2, "Config horizon must be applied"

    def test_gen_data_rejects_empty(self, capsys):
        """Verify --n 0 exits 1."""
        assert cli_main(["gen-data", "--env", "t2", "--n", "0"]) == EXIT_USAGE
