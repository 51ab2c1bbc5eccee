"""
Command-line driver: RMSE experiments, safe policy improvement, the enumeration theory suite
and logged-dataset generation.

    python -m offpolicy run --env tree --alpha 0 --estimators dr,step_is --runs 100 --seed 7 --out r.csv
    python -m offpolicy safe-improve --config safe.cfg
    python -m offpolicy theory-check --seed 7
    python -m offpolicy gen-data --env sailing --n 1000 --seed 3 --out sailing.txt

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
import argparse
import logging
import sys

from offpolicy.config import ExperimentConfig, SafeImproveConfig, load_config, parse_config_text
from offpolicy.dataset_io import format_dataset, save_dataset
from offpolicy.environments import ENVIRONMENT_IDS, make_environment
from offpolicy.errors import OPEError
from offpolicy.experiments import run_rmse_experiment, run_safe_improvement
from offpolicy.mdp_core import UniformPolicy, sample_dataset
from offpolicy.theory import run_theory_suite
from utils.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THEORY_TOLERANCE = 1e-8


class UsageError(Exception):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _common(sub):
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--env", help=f"environment id ({', '.join(ENVIRONMENT_IDS)})")
    sub.add_argument("--alpha", dest="alphas", type=_floats, help="comma-separated mixing rates")
    sub.add_argument("--runs", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--crop", type=_floats, help="v_min,v_max")
    sub.add_argument("--bandwidth", type=float)
    sub.add_argument("--truth-rollouts", dest="truth_rollouts", type=int)
    sub.add_argument("--out", help="CSV path (standard output when omitted)")
    sub.add_argument("--log-level", dest="log_level")


def build_parser():
    parser = _Parser(prog="offpolicy", description="Off-policy value evaluation benchmarks")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="relative RMSE of estimators across splits")
    _common(run)
    run.add_argument("--n-train", dest="n_train", type=int)
    run.add_argument("--n-eval", dest="n_eval", type=int)
    run.add_argument("--estimators", type=_names, help="comma-separated estimator ids")
    run.add_argument("--splits", type=_ints, help="comma-separated |D_test| sizes")
    run.add_argument("--k", type=int)
    run.add_argument("--kfold-variant", dest="kfold_variant")
    run.add_argument("--model", help="fitted or exact")
    run.add_argument("--runs-out", dest="runs_out", help="per-run estimates CSV")

    safe = commands.add_parser("safe-improve", help="lower-confidence-bound policy selection")
    _common(safe)
    safe.add_argument("--sizes", type=_ints, help="comma-separated data sizes |D|")
    safe.add_argument("--train-fractions", dest="train_fractions", type=_floats)
    safe.add_argument("--C", dest="C", type=_floats, help="comma-separated LCB multipliers")
    safe.add_argument("--selectors", type=_names)
    safe.add_argument("--objective", choices=("maximize", "minimize"))

    theory = commands.add_parser("theory-check", help="enumeration checks of estimator theory")
    theory.add_argument("--seed", type=int, default=0)
    theory.add_argument("--trees", type=int, default=20)
    theory.add_argument("--dags", type=int, default=10)
    theory.add_argument("--log-level", dest="log_level")

    gen = commands.add_parser("gen-data", help="log a dataset under the uniform behavior policy")
    gen.add_argument("--config", help="key = value file; only env.<param> lines are used")
    gen.add_argument("--env", required=True, choices=ENVIRONMENT_IDS)
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out")
    gen.add_argument("--log-level", dest="log_level")
    return parser


_NON_CONFIG = {"command", "config", "log_level"}


def _load(args, cls):
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    return load_config(args.config, overrides, cls)


def _emit(frame, out):
    if out:
        frame.to_csv(out, index=False)
        logger.info("wrote %d rows to %s", len(frame), out)
    else:
        sys.stdout.write(frame.to_csv(index=False))


def _theory_check(args):
    worst = run_theory_suite(args.seed, n_trees=args.trees, n_dags=args.dags)
    for name, deviation in worst.items():
        print(f"{name} {deviation:.3e}")
    overall = max(worst.values())
    print(f"max_deviation {overall:.3e}")
    return EXIT_OK if overall <= THEORY_TOLERANCE else EXIT_RUNTIME


def _gen_data(args):
    params = {}
    if args.config:
        with open(args.config, encoding="utf-8") as handle:
            params = parse_config_text(handle.read(), ExperimentConfig).get("env_params", {})
    env = make_environment(args.env, **params)
    dataset = sample_dataset(env, UniformPolicy(env.n_actions), args.n, args.seed)
    if args.out:
        save_dataset(dataset, args.out)
    else:
        sys.stdout.write(format_dataset(dataset))
    return EXIT_OK


def cli_main(argv=None):
    """
    Parse ``argv`` and run one subcommand.

    Returns:
        int: 0 on success, 1 on a usage or validation error, 2 on a runtime failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        configure_logging(args.log_level)
    except ValueError as exc:
        print(f"{parser.format_usage()}offpolicy {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "gen-data" and args.n < 1:
        print(f"{parser.format_usage()}offpolicy gen-data: --n must be at least 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "run":
            config = _load(args, ExperimentConfig)
        elif args.command == "safe-improve":
            config = _load(args, SafeImproveConfig)
    except (OPEError, ValueError, OSError) as exc:
        print(f"offpolicy {args.command}: {exc}", file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "run":
            _emit(run_rmse_experiment(config), config.out)
        elif args.command == "safe-improve":
            _emit(run_safe_improvement(config), config.out)
        elif args.command == "theory-check":
            return _theory_check(args)
        else:
            return _gen_data(args)
    except Exception as exc:  # noqa: BLE001
        logger.exception("%s failed", args.command)
        print(f"offpolicy {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
