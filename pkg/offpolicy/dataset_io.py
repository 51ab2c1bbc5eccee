"""
Line-oriented text format for logged datasets.

    H=<int> env=<id> seed=<int> [behavior=<id>]
    <t> <state> <action> <reward> <behavior_prob>      (t = 1..H)
    <H+1> <final state>
    <blank line>
    ...

States are integer ids or comma-joined feature vectors. Floats use the shortest
representation that round-trips exactly.
"""
import logging
from pathlib import Path

import numpy as np

from offpolicy.errors import DatasetFormatError
from offpolicy.mdp_core import Dataset, DatasetMeta

logger = logging.getLogger(__name__)


def _format_number(value, integral):
    return str(int(value)) if integral else repr(float(value))


def _format_state(state, integral):
    state = np.asarray(state)
    if state.ndim == 0:
        return _format_number(state, integral)
    return ",".join(_format_number(v, integral) for v in state)


def format_dataset(dataset):
    """Serialize a dataset to text."""
    meta = dataset.meta
    header = [f"H={dataset.horizon}", f"env={meta.env_id}",
              f"seed={'none' if meta.seed is None else meta.seed}"]
    if meta.behavior_id is not None:
        header.append(f"behavior={meta.behavior_id}")
    integral = np.issubdtype(dataset.states.dtype, np.integer)
    blocks = []
    for i in range(len(dataset)):
        lines = [
            f"{t + 1} {_format_state(dataset.states[i, t], integral)} {int(dataset.actions[i, t])} "
            f"{repr(float(dataset.rewards[i, t]))} {repr(float(dataset.behavior_probs[i, t]))}"
            for t in range(dataset.horizon)
        ]
        lines.append(f"{dataset.horizon + 1} {_format_state(dataset.final_states[i], integral)}")
        blocks.append("\n".join(lines))
    return " ".join(header) + "\n" + "\n\n".join(blocks) + "\n"


def _parse_header(line):
    fields = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise DatasetFormatError(f"header token {token!r} is not key=value", 1)
        fields[key] = value
    missing = {"H", "env", "seed"} - fields.keys()
    if missing:
        raise DatasetFormatError(f"header lacks {', '.join(sorted(missing))}", 1)
    try:
        horizon = int(fields["H"])
        seed = None if fields["seed"] == "none" else int(fields["seed"])
    except ValueError as exc:
        raise DatasetFormatError(f"bad header value: {exc}", 1) from exc
    if horizon < 1:
        raise DatasetFormatError("horizon must be at least 1", 1)
    return horizon, DatasetMeta(seed=seed, env_id=fields["env"], behavior_id=fields.get("behavior"))


def _parse_state(token, line_number):
    parts = token.split(",")
    try:
        if any(ch in token for ch in ".eEn"):
            values = [float(p) for p in parts]
        else:
            values = [int(p) for p in parts]
    except ValueError as exc:
        raise DatasetFormatError(f"bad state {token!r}", line_number) from exc
    return values[0] if len(parts) == 1 and "," not in token else values


def parse_dataset(text):
    """
    Parse the text format.

    Raises:
        DatasetFormatError: malformed or truncated input, horizon mismatch, or no trajectories
    """
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError("missing header line", 1)
    horizon, meta = _parse_header(lines[0])
    states, actions, rewards, probs, finals = [], [], [], [], []
    current = []
    for number, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            if current:
                raise DatasetFormatError(
                    f"trajectory ends after {len(current)} of {horizon} steps", number
                )
            continue
        fields = line.split()
        try:
            t = int(fields[0])
        except ValueError as exc:
            raise DatasetFormatError(f"step index {fields[0]!r} is not an integer", number) from exc
        if t != len(current) + 1:
            raise DatasetFormatError(f"expected step {len(current) + 1}, found {t}", number)
        if t == horizon + 1:
            if len(fields) != 2:
                raise DatasetFormatError("final-state line needs '<H+1> <state>'", number)
            states.append([c[0] for c in current])
            actions.append([c[1] for c in current])
            rewards.append([c[2] for c in current])
            probs.append([c[3] for c in current])
            finals.append(_parse_state(fields[1], number))
            current = []
            continue
        if t > horizon:
            raise DatasetFormatError(f"step {t} exceeds horizon H={horizon}", number)
        if len(fields) != 5:
            raise DatasetFormatError(
                f"expected 't state action reward behavior_prob', got {len(fields)} fields", number
            )
        try:
            step = (_parse_state(fields[1], number), int(fields[2]), float(fields[3]),
                    float(fields[4]))
        except ValueError as exc:
            raise DatasetFormatError(str(exc), number) from exc
        if not 0.0 <= step[3] <= 1.0:
            raise DatasetFormatError(f"behavior_prob {step[3]!r} outside [0, 1]", number)
        current.append(step)
    if current:
        raise DatasetFormatError(
            f"truncated trajectory: {len(current)} of {horizon} steps and no final state",
            len(lines),
        )
    if not finals:
        raise DatasetFormatError("empty dataset is invalid", len(lines))
    return Dataset(
        states=np.array(states), actions=np.array(actions, dtype=np.int64),
        rewards=np.array(rewards, dtype=np.float64),
        behavior_probs=np.array(probs, dtype=np.float64),
        final_states=np.array(finals), meta=meta,
    )


def save_dataset(dataset, path):
    """Write ``dataset`` to ``path``."""
    Path(path).write_text(format_dataset(dataset))
    logger.info("saved %d trajectories to %s", len(dataset), path)


def load_dataset(path):
    """Read a dataset written by ``save_dataset``."""
    dataset = parse_dataset(Path(path).read_text())
    logger.info("loaded %d trajectories from %s", len(dataset), path)
    return dataset
