"""
Dataset File Tests
Tests the line-oriented dataset format: exact round trips and line-numbered errors.
"""
import numpy as np
import pytest

from offpolicy.dataset_io import format_dataset, load_dataset, parse_dataset, save_dataset
from offpolicy.environments import make_mountain_car
from offpolicy.errors import DatasetFormatError
from offpolicy.mdp_core import UniformPolicy, sample_dataset

T2_TEXT = """H=2 env=t2 seed=4 behavior=uniform
1 0 0 0.0 0.5
2 1 0 1.0 0.5
3 3

1 0 1 0.0 0.5
2 2 1 0.0 0.5
3 3
"""


@pytest.mark.bench
class TestRoundTrip:
    """Test suite for save/load fidelity."""

    def test_integer_states_round_trip(self, t2, uniform2, tmp_path):
        """Verify save -> load -> save reproduces the file byte for byte."""
        data = sample_dataset(t2, uniform2, 30, seed=4)
        first, second = tmp_path / "a.txt", tmp_path / "b.txt"
        save_dataset(data, first)
        loaded = load_dataset(first)
        save_dataset(loaded, second)
        assert first.read_bytes() == second.read_bytes(), "Round trip must be byte-identical"
        assert np.array_equal(loaded.actions, data.actions) and loaded.meta.seed == 4

    def test_continuous_states_round_trip(self, tmp_path):
        """Verify float feature vectors survive with full precision."""
        env = make_mountain_car(horizon=5)
        data = sample_dataset(env, UniformPolicy(3), 4, seed=1)
        path = tmp_path / "mc.txt"
        save_dataset(data, path)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.states, data.states), "Float states must be exact"
        assert np.array_equal(loaded.final_states, data.final_states)
        assert format_dataset(loaded) == path.read_text()

    def test_parse_known_text(self):
        """Verify a hand-written file parses into the expected arrays."""
        data = parse_dataset(T2_TEXT)
        assert data.states.tolist() == [[0, 1], [0, 2]]
        assert data.rewards.tolist() == [[0.0, 1.0], [0.0, 0.0]]
        assert data.final_states.tolist() == [3, 3]
        assert data.meta.env_id == "t2" and data.meta.behavior_id == "uniform"
        assert format_dataset(data) == T2_TEXT, "Formatting the parsed text must reproduce it"


@pytest.mark.bench
class TestFormatErrors:
    """Test suite for malformed dataset files."""

    def test_truncated_file_names_last_line(self):
        """Verify a trajectory cut before its final state reports the last line."""
        text = "\n".join(T2_TEXT.splitlines()[:6])
        with pytest.raises(DatasetFormatError) as info:
            parse_dataset(text)
        assert info.value.line_number == 6, f"Unexpected line {info.value.line_number}"
        assert "truncated" in str(info.value)

    def test_blank_line_inside_trajectory(self):
        """Verify a blank line before the final state is rejected with its line number."""
        lines = T2_TEXT.splitlines()
        text = "\n".join(lines[:2] + [""] + lines[2:])
        with pytest.raises(DatasetFormatError, match="line 3"):
            parse_dataset(text)

    def test_step_out_of_order(self):
        """Verify a skipped step index is reported."""
        text = T2_TEXT.replace("2 1 0 1.0 0.5", "3 1 0 1.0 0.5")
        with pytest.raises(DatasetFormatError, match="expected step 2"):
            parse_dataset(text)

    def test_behavior_probability_out_of_range(self):
        """Verify logged probabilities outside [0, 1] are rejected."""
        text = T2_TEXT.replace("1 0 0 0.0 0.5", "1 0 0 0.0 1.5")
        with pytest.raises(DatasetFormatError, match="line 2"):
            parse_dataset(text)

    def test_header_only_is_empty(self):
        """Verify a file with no trajectories is invalid."""
        with pytest.raises(DatasetFormatError, match="empty dataset"):
            parse_dataset("H=2 env=t2 seed=0\n")

    @pytest.mark.parametrize("header", ["", "H=2 env=t2", "H=0 env=t2 seed=1", "H=2 env seed=1"])
    def test_bad_headers(self, header):
        """Verify missing or malformed headers point at line 1."""
        with pytest.raises(DatasetFormatError) as info:
            parse_dataset(header + "\n1 0 0 0.0 0.5\n")
        assert info.value.line_number == 1
