"""
Configuration Tests
Tests key = value parsing, precedence of file and command-line values, and validation.
"""
import pytest

from offpolicy.config import (
    ExperimentConfig,
    SafeImproveConfig,
    env_workers,
    load_config,
    parse_config_text,
)
from offpolicy.errors import ConfigError


@pytest.mark.bench
class TestConfigParsing:
    """Test suite for the key = value config format."""

    def test_parses_lists_and_comments(self):
        """Verify comma lists, comments and env parameters are understood."""
        text = """
        # RMSE grid
        env = tree
        alphas = 0, 0.5
        splits = 10,100   # two sizes
        estimators = dr, step_is
        env.branch = 3
        crop = none
        """
        values = parse_config_text(text)
        assert values["env"] == "tree" and values["alphas"] == (0.0, 0.5)
        assert values["splits"] == (10, 100) and values["estimators"] == ("dr", "step_is")
        assert values["env_params"] == {"branch": 3} and values["crop"] is None

    def test_unknown_key_names_line(self):
        """Verify an unknown key is reported with its line number."""
        with pytest.raises(ConfigError) as info:
            parse_config_text("env = tree\nwidth = 3\n")
        assert info.value.line_number == 2 and "width" in str(info.value)

    def test_missing_equals(self):
        """Verify a line without '=' is rejected."""
        with pytest.raises(ConfigError, match="line 1"):
            parse_config_text("runs 10")

    def test_bad_value(self):
        """Verify an unparsable number is rejected with the key name."""
        with pytest.raises(ConfigError, match="runs"):
            parse_config_text("runs = many")

    def test_safe_improve_keys(self):
        """Verify safe-improvement keys are only valid for SafeImproveConfig."""
        values = parse_config_text("C = 0, 1.645\nselectors = is,dr", SafeImproveConfig)
        assert values["C"] == (0.0, 1.645) and values["selectors"] == ("is", "dr")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("C = 1.0", ExperimentConfig)


@pytest.mark.bench
class TestConfigLoading:
    """Test suite for defaults < file < command-line precedence."""

    def test_defaults(self, monkeypatch):
        """Verify defaults load and validate without a file."""
        monkeypatch.delenv("OPE_WORKERS", raising=False)
        config = load_config()
        assert config.env == "mountain_car" and config.runs == 100 and config.workers == 1

    def test_file_then_overrides(self, tmp_path):
        """Verify command-line values beat the file and None overrides are ignored."""
        path = tmp_path / "rmse.cfg"
        path.write_text("env = tree\nruns = 20\nseed = 3\n")
        config = load_config(path, {"runs": 5, "seed": None})
        assert config.env == "tree", "File value should replace the default"
        assert config.runs == 5, "Override should replace the file value"
        assert config.seed == 3, "None override must not erase the file value"

    def test_workers_from_environment(self, monkeypatch):
        """Verify OPE_WORKERS sets the worker count."""
        monkeypatch.setenv("OPE_WORKERS", "3")
        assert env_workers() == 3
        monkeypatch.setenv("OPE_WORKERS", "lots")
        with pytest.raises(ConfigError, match="OPE_WORKERS"):
            env_workers()

    def test_unknown_override(self):
        """Verify overrides naming no config field are refused."""
        with pytest.raises(ConfigError, match="unknown setting"):
            load_config(overrides={"colour": "red"})


@pytest.mark.bench
class TestConfigValidation:
    """Test suite for cross-field validation."""

    @pytest.mark.parametrize("overrides,message", [
        ({"estimators": ("dr", "magic")}, "magic"),
        ({"env": "moon"}, "unknown environment"),
        ({"alphas": (1.5,)}, "alphas"),
        ({"n_eval": 100, "splits": (100,)}, "test sizes"),
        ({"k": 1}, "k=1"),
        ({"model": "exact"}, "tabular"),
        ({"crop": (1.0, 0.0)}, "crop"),
        ({"runs": 0}, "runs"),
    ])
    def test_rmse_rejections(self, overrides, message):
        """Verify invalid RMSE settings raise ConfigError."""
        with pytest.raises(ConfigError, match=message):
            load_config(overrides=overrides)

    def test_exact_model_on_tabular_env(self):
        """Verify model = exact is accepted for tabular environments."""
        assert load_config(overrides={"env": "tree", "model": "exact"}).model == "exact"

    @pytest.mark.parametrize("overrides,message", [
        ({"train_fractions": (1.0,)}, "train fractions"),
        ({"sizes": (2,), "train_fractions": (0.2,)}, "empty split"),
        ({"C": (-1.0,)}, "nonnegative"),
        ({"objective": "sideways"}, "objective"),
        ({"selectors": ("reg",)}, "selector"),
    ])
    def test_safe_rejections(self, overrides, message):
        """Verify invalid safe-improvement settings raise ConfigError."""
        with pytest.raises(ConfigError, match=message):
            load_config(overrides=overrides, cls=SafeImproveConfig)
