"""
Experiment configuration: dataclass defaults, ``key = value`` files and CLI overrides.

Precedence is defaults < config file < command-line flags. Process-level knobs come from
environment variables (``OPE_WORKERS``, ``OPE_LOG_LEVEL``).
"""
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from offpolicy.environments import ENVIRONMENT_IDS
from offpolicy.errors import ConfigError
from offpolicy.estimators import METHOD_IDS

logger = logging.getLogger(__name__)

DEFAULT_TEST_SIZES = (10, 100, 1000, 2000, 3000, 4000, 4900, 4990)
DEFAULT_ESTIMATORS = ("reg", "is", "step_is", "wis", "step_wis", "dr", "dr_bsl", "kfold_dr")
SELECTOR_IDS = ("is", "step_is", "wis", "step_wis", "dr", "dr_bsl", "dr_v2")


def env_workers():
    """Worker processes for experiment runs, from OPE_WORKERS (default 1)."""
    raw = os.getenv("OPE_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError as exc:
        raise ConfigError(f"OPE_WORKERS must be an integer, got {raw!r}") from exc
    return max(workers, 1)


@dataclass(frozen=True)
class ExperimentConfig:
    """RMSE-comparison experiment."""

    env: str = "mountain_car"
    env_params: dict = field(default_factory=dict)
    n_train: int = 1000
    n_eval: int = 5000
    alphas: tuple = (0.5,)
    splits: tuple = DEFAULT_TEST_SIZES
    estimators: tuple = DEFAULT_ESTIMATORS
    runs: int = 100
    seed: int = 0
    crop: Optional[tuple] = None
    k: int = 2
    kfold_variant: str = "dr"
    model: str = "fitted"
    bandwidth: float = 0.25
    baseline_scale: Optional[float] = None
    truth_rollouts: int = 100_000
    runs_out: Optional[str] = None
    out: Optional[str] = None
    workers: int = 1
    mode: str = "rmse"

    def validate(self):
        _check_env(self.env)
        _check_ids(self.estimators, METHOD_IDS, "estimator")
        _check_alphas(self.alphas)
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if self.n_train < 1 or self.n_eval < 2:
            raise ConfigError("n_train must be >= 1 and n_eval >= 2")
        bad = [s for s in self.splits if not 0 < s < self.n_eval]
        if bad:
            raise ConfigError(f"test sizes {bad} must lie strictly between 0 and n_eval={self.n_eval}")
        if not self.splits and {"dr", "dr_v2", "reg"} & set(self.estimators):
            raise ConfigError("split-based estimators need at least one test size")
        if "kfold_dr" in self.estimators and not 2 <= self.k <= self.n_eval:
            raise ConfigError(f"k={self.k} must lie in 2..n_eval")
        if self.kfold_variant not in ("dr", "dr_v2"):
            raise ConfigError("kfold_variant must be dr or dr_v2")
        if self.model not in ("fitted", "exact"):
            raise ConfigError("model must be 'fitted' or 'exact'")
        if self.model == "exact" and self.env in ("mountain_car", "sailing"):
            raise ConfigError(f"model=exact needs a tabular environment, not {self.env}")
        _check_crop(self.crop)
        return self


@dataclass(frozen=True)
class SafeImproveConfig:
    """Safe policy improvement by lower-confidence-bound selection."""

    env: str = "mountain_car"
    env_params: dict = field(default_factory=dict)
    sizes: tuple = (5000,)
    train_fractions: tuple = (0.2, 0.4, 0.6, 0.8)
    alphas: tuple = tuple(round(0.1 * i, 1) for i in range(10))
    C: tuple = (0.0, 1.645)
    selectors: tuple = ("is", "dr")
    objective: str = "maximize"
    runs: int = 50
    seed: int = 0
    crop: Optional[tuple] = None
    bandwidth: float = 0.25
    truth_rollouts: int = 100_000
    out: Optional[str] = None
    workers: int = 1
    mode: str = "safe_improve"

    def validate(self):
        _check_env(self.env)
        _check_ids(self.selectors, SELECTOR_IDS, "selector")
        _check_alphas(self.alphas)
        if not (self.sizes and self.train_fractions and self.alphas and self.C and self.selectors):
            raise ConfigError("safe-improvement grids must be non-empty")
        if any(not 0 < f < 1 for f in self.train_fractions):
            raise ConfigError("train fractions must lie strictly between 0 and 1")
        if any(c < 0 for c in self.C):
            raise ConfigError("C must be nonnegative")
        if self.objective not in ("maximize", "minimize"):
            raise ConfigError("objective must be maximize or minimize")
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        for size in self.sizes:
            for frac in self.train_fractions:
                n_train = int(round(frac * size))
                if not 0 < n_train < size:
                    raise ConfigError(f"train fraction {frac} leaves an empty split of |D|={size}")
        _check_crop(self.crop)
        return self


def _check_env(env):
    if env not in ENVIRONMENT_IDS:
        raise ConfigError(f"unknown environment {env!r}; expected one of {', '.join(ENVIRONMENT_IDS)}")


def _check_ids(ids, allowed, kind):
    unknown = [i for i in ids if i not in allowed]
    if unknown:
        raise ConfigError(f"unknown {kind} id(s) {', '.join(unknown)}; expected {', '.join(allowed)}")
    if not ids:
        raise ConfigError(f"at least one {kind} is required")


def _check_alphas(alphas):
    if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas must be a non-empty list in [0, 1]")


def _check_crop(crop):
    if crop is not None and (len(crop) != 2 or crop[0] > crop[1]):
        raise ConfigError("crop must be 'v_min,v_max' with v_min <= v_max")


def _split(value):
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _optional(convert):
    def parse(value):
        return None if value.strip().lower() in ("", "none") else convert(value)
    return parse


def _scalar(text):
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            continue
    if "," in text:
        return tuple(_scalar(part) for part in _split(text))
    return text


_CONVERTERS = {
    "env": str.strip,
    "n_train": int,
    "n_eval": int,
    "alphas": lambda v: tuple(float(x) for x in _split(v)),
    "splits": lambda v: tuple(int(x) for x in _split(v)),
    "estimators": _split,
    "runs": int,
    "seed": int,
    "crop": _optional(lambda v: tuple(float(x) for x in _split(v))),
    "k": int,
    "kfold_variant": str.strip,
    "model": str.strip,
    "bandwidth": float,
    "baseline_scale": _optional(float),
    "truth_rollouts": int,
    "runs_out": _optional(str.strip),
    "out": _optional(str.strip),
    "workers": int,
    "sizes": lambda v: tuple(int(x) for x in _split(v)),
    "train_fractions": lambda v: tuple(float(x) for x in _split(v)),
    "C": lambda v: tuple(float(x) for x in _split(v)),
    "selectors": _split,
    "objective": str.strip,
}


def parse_config_text(text, cls=ExperimentConfig):
    """
    Parse ``key = value`` lines into field overrides for ``cls``.

    ``env.<param> = value`` lines set environment generator parameters. ``#`` starts a comment.

    Returns:
        dict of overrides
    Raises:
        ConfigError: malformed line, unknown key or unparsable value, naming the line
    """
    names = {f.name for f in fields(cls)} - {"mode", "env_params"}
    overrides, env_params = {}, {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", number)
        if key.startswith("env."):
            env_params[key[4:]] = _scalar(value)
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", number)
        try:
            overrides[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}", number) from exc
    if env_params:
        overrides["env_params"] = env_params
    return overrides


def load_config(path=None, overrides=None, cls=ExperimentConfig):
    """
    Build a validated config from defaults, an optional file and explicit overrides.

    Args:
        path: config file path or None
        overrides (dict): highest-precedence values (typically CLI flags); None values are ignored
        cls: ExperimentConfig or SafeImproveConfig

    Returns:
        validated config instance
    """
    config = cls(workers=env_workers())
    if path is not None:
        file_values = parse_config_text(Path(path).read_text(), cls)
        logger.info("config file %s sets %s", path, sorted(file_values))
        config = replace(config, **file_values)
    explicit = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(explicit) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown setting(s) {', '.join(sorted(unknown))}")
    config = replace(config, **explicit)
    return config.validate()
