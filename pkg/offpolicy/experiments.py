"""
Experiment drivers: RMSE comparison of estimators across data splits, and safe policy
improvement by lower-confidence-bound selection.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from offpolicy.environments import MOUNTAIN_CAR_SCALES, Discretizer, make_environment
from offpolicy.estimators import EstimatorParams, evaluate
from offpolicy.mdp_core import (
    TabularMDP,
    UniformPolicy,
    exact_value,
    mix_policies,
    monte_carlo_value,
    sample_dataset,
)
from offpolicy.model_fit import (
    FittedModel,
    fit_factored_model,
    fit_tabular_model,
    kernel_model,
    optimal_policy,
    q_from_model,
)
from offpolicy.theory import mse_summary
from utils.rng_factory import RngFactory

logger = logging.getLogger(__name__)

SPLIT_FREE_METHODS = ("is", "step_is", "wis", "step_wis", "dr_bsl")
SAILING_PERIODS = (0, 0, 8, 8)
RMSE_COLUMNS = ["method", "alpha", "split", "n", "rel_rmse", "bias", "stderr"]
SAFE_COLUMNS = ["selector", "objective", "C", "n", "improvement", "stderr", "fallback_rate"]


@dataclass(frozen=True)
class ModelFitter:
    """Environment-specific model learner: Dataset -> FittedModel."""

    env: object
    bandwidth: float = 0.25
    exact: bool = False
    reward_vars: tuple = (0, 1, 2)

    def __call__(self, dataset):
        env = self.env
        if self.exact:
            return FittedModel.from_mdp(env)
        r_floor = env.reward_range()[0]
        if env.env_id == "mountain_car":
            return fit_tabular_model(dataset, Discretizer(MOUNTAIN_CAR_SCALES), reward_floor=r_floor,
                                     gamma=env.gamma, horizon=env.horizon, n_actions=env.n_actions)
        if env.env_id == "sailing":
            return kernel_model(dataset, self.bandwidth, gamma=env.gamma, horizon=env.horizon,
                                periods=SAILING_PERIODS, n_actions=env.n_actions)
        if env.env_id == "factored":
            features = env.state_features
            return fit_factored_model(
                dataset, features.shape[1], self.reward_vars, var_arity=int(features.max()) + 1,
                gamma=env.gamma, horizon=env.horizon, n_actions=env.n_actions,
                state_features=features,
            )
        return fit_tabular_model(dataset, None, reward_floor=r_floor, gamma=env.gamma,
                                 horizon=env.horizon, n_states=env.n_states,
                                 n_actions=env.n_actions)


@dataclass(frozen=True)
class ExperimentSetup:
    """Environment, behavior policy and estimator inputs shared by all runs."""

    env: object
    pi0: object
    fitter: ModelFitter
    crop: tuple
    r_floor: float
    baseline_scale: float
    truth_rollouts: int

    def params(self, pi1, **kwargs):
        return EstimatorParams(pi1=pi1, gamma=self.env.gamma, r_floor=self.r_floor,
                               scale=self.baseline_scale, **kwargs)

    def true_value(self, policy, seed):
        """Exact value for tabular environments, Monte Carlo mean otherwise."""
        if isinstance(self.env, TabularMDP):
            return exact_value(self.env, policy)
        return monte_carlo_value(self.env, policy, self.truth_rollouts, seed)[0]


def build_setup(config):
    """Instantiate the environment and its estimator inputs from a config."""
    env = make_environment(config.env, **config.env_params)
    exact = getattr(config, "model", "fitted") == "exact"
    if exact and not isinstance(env, TabularMDP):
        raise ValueError(f"model=exact needs a tabular environment, not {config.env}")
    scale = getattr(config, "baseline_scale", None)
    if scale is None:
        scale = 0.5 if config.env == "sailing" else 1.0
    crop = tuple(config.crop) if config.crop is not None else env.value_range()
    fitter = ModelFitter(env, bandwidth=config.bandwidth, exact=exact,
                         reward_vars=tuple(config.env_params.get("reward_vars", (0, 1, 2))))
    return ExperimentSetup(
        env=env, pi0=UniformPolicy(env.n_actions), fitter=fitter, crop=crop,
        r_floor=env.reward_range()[0], baseline_scale=scale,
        truth_rollouts=config.truth_rollouts,
    )


def _rmse_run(config, setup, policies, run_index, run_seed):
    """All estimates of one run: D_eval is drawn, shuffled and split per test size."""
    sample_seed, shuffle_seed = RngFactory.spawn(run_seed, 2)
    env = setup.env
    d_eval = sample_dataset(env, setup.pi0, config.n_eval, sample_seed).shuffled(shuffle_seed)
    records = []

    def record(method, alpha, split, report):
        records.append({"run": run_index, "method": method, "alpha": alpha, "split": split,
                        "estimate": report.point_estimate})

    for alpha, pi1 in policies.items():
        for method in config.estimators:
            if method in SPLIT_FREE_METHODS:
                record(method, alpha, config.n_eval,
                       evaluate(d_eval, method, setup.params(pi1), setup.crop))
            elif method == "kfold_dr":
                params = setup.params(pi1, fitter=setup.fitter, k=config.k,
                                      kfold_variant=config.kfold_variant)
                record(method, alpha, config.n_eval, evaluate(d_eval, method, params, setup.crop))
    split_methods = [m for m in config.estimators if m in ("dr", "dr_v2", "reg")]
    if split_methods:
        for n_test in config.splits:
            d_reg, d_test = d_eval.split(config.n_eval - n_test)
            model = setup.fitter(d_reg)
            for alpha, pi1 in policies.items():
                qhat = q_from_model(model, pi1)
                params = setup.params(pi1, qhat=qhat, model=model)
                for method in split_methods:
                    if method == "reg":
                        report = evaluate(d_eval, "reg", params)
                    else:
                        report = evaluate(d_test, method, params, setup.crop)
                    record(method, alpha, n_test, report)
    logger.info("run %d finished", run_index)
    return records


def run_rmse_experiment(config):
    """
    Compare estimators by relative RMSE over repeated draws of D_eval.

    D_train is drawn once and shared by every run, so all runs evaluate the same pi1 and the
    RMSE measures variance over D_eval only. It fixes pi_train; the true value of each mixture
    pi1 = (1 - alpha) pi_train + alpha pi0 is computed once per alpha. Split-free methods
    (IS family, WIS, DR-bsl) and k-fold DR use all of D_eval and report split = n_eval;
    DR, DR-v2 and REG fit their model on D_reg and report split = |D_test|.

    Returns:
        pandas.DataFrame with columns method, alpha, split, n, rel_rmse, bias, stderr; ``n`` is
        the number of runs. With ``config.runs_out`` every run's estimate is written there too.
    """
    setup = build_setup(config)
    env = setup.env
    train_seed, truth_seed, runs_seed = RngFactory.spawn(config.seed, 3)
    d_train = sample_dataset(env, setup.pi0, config.n_train, train_seed)
    logger.info("drew D_train: %d trajectories from %s", len(d_train), env.env_id)
    pi_train = optimal_policy(setup.fitter(d_train), env.horizon)
    logger.info("fitted pi_train on D_train")
    policies = {alpha: mix_policies(pi_train, setup.pi0, alpha) for alpha in config.alphas}
    truths = {alpha: setup.true_value(pi1, truth_seed) for alpha, pi1 in policies.items()}
    logger.info("ground truth per alpha: %s", truths)

    run_seeds = RngFactory.spawn(runs_seed, config.runs)
    jobs = (delayed(_rmse_run)(config, setup, policies, i, s) for i, s in enumerate(run_seeds))
    if config.workers > 1:
        per_run = Parallel(n_jobs=config.workers)(jobs)
    else:
        per_run = [_rmse_run(config, setup, policies, i, s) for i, s in enumerate(run_seeds)]
    runs = pd.DataFrame([r for records in per_run for r in records])
    runs["truth"] = runs["alpha"].map(truths)
    if config.runs_out:
        runs.to_csv(config.runs_out, index=False)

    rows = []
    for (method, alpha, split), group in runs.groupby(["method", "alpha", "split"], sort=False):
        summary = mse_summary(group["estimate"].to_numpy(), truths[alpha])
        rows.append({"method": method, "alpha": alpha, "split": split, "n": len(group),
                     "rel_rmse": summary.rel_rmse, "bias": summary.bias,
                     "stderr": summary.stderr})
    return pd.DataFrame(rows, columns=RMSE_COLUMNS)


def _lower_bound(report, c):
    if math.isnan(report.stderr):
        return report.point_estimate if c == 0 else -math.inf
    return report.point_estimate - c * report.stderr


def _safe_run(config, setup, size, run_seed):
    """Candidate scores of one run, and the recommendation per (selector, C)."""
    sample_seed, shuffle_seed = RngFactory.spawn(run_seed, 2)
    env = setup.env
    data = sample_dataset(env, setup.pi0, size, sample_seed).shuffled(shuffle_seed)
    behavior_score = float(np.mean(data.returns(env.gamma)))
    minimize = config.objective == "minimize"
    candidates, scores = {}, {sel: {} for sel in config.selectors}
    for frac in config.train_fractions:
        d_train, d_rest = data.split(int(round(frac * size)))
        model = setup.fitter(d_train)
        pi_train = optimal_policy(model, env.horizon, minimize=minimize)
        for alpha in config.alphas:
            pi1 = mix_policies(pi_train, setup.pi0, alpha)
            candidates[(frac, alpha)] = pi1
            params = setup.params(pi1, qhat=q_from_model(model, pi1), model=model)
            for selector in config.selectors:
                scores[selector][(frac, alpha)] = evaluate(d_rest, selector, params, setup.crop)
    picks = {}
    for selector in config.selectors:
        for c in config.C:
            bounds = {key: _lower_bound(rep, c) for key, rep in scores[selector].items()}
            best = max(bounds, key=lambda key: bounds[key])
            picks[(selector, c)] = best if bounds[best] > behavior_score else None
    return candidates, picks


def run_safe_improvement(config):
    """
    Safe policy improvement: pick the candidate with the highest lower confidence bound
    point - C * stderr on D minus D_train, or keep the behavior policy when none beats its
    on-policy mean return.

    Returns:
        pandas.DataFrame with columns selector, objective, C, n, improvement, stderr,
        fallback_rate; ``improvement`` is the mean true value gain over the behavior policy
    """
    setup = build_setup(config)
    truth_seed, runs_seed = RngFactory.spawn(config.seed, 2)
    v0 = setup.true_value(setup.pi0, truth_seed)
    logger.info("behavior policy true value %.6g", v0)
    rows = []
    all_seeds = RngFactory.spawn(runs_seed, len(config.sizes) * config.runs)
    for size_index, size in enumerate(config.sizes):
        seeds = all_seeds[size_index * config.runs:(size_index + 1) * config.runs]
        jobs = (delayed(_safe_run)(config, setup, size, s) for s in seeds)
        if config.workers > 1:
            outcomes = Parallel(n_jobs=config.workers)(jobs)
        else:
            outcomes = [_safe_run(config, setup, size, s) for s in seeds]
        gains = {key: [] for key in outcomes[0][1]}
        for run_index, (candidates, picks) in enumerate(outcomes):
            values = {}
            for key, pick in picks.items():
                if pick is None:
                    gains[key].append((0.0, True))
                    continue
                if pick not in values:
                    values[pick] = setup.true_value(candidates[pick], truth_seed)
                gains[key].append((values[pick] - v0, False))
            logger.info("|D|=%d run %d scored", size, run_index)
        for (selector, c), results in gains.items():
            improvement = np.array([g for g, _ in results])
            stderr = (float(improvement.std(ddof=1) / math.sqrt(len(improvement)))
                      if len(improvement) > 1 else math.nan)
            rows.append({"selector": selector, "objective": config.objective, "C": c, "n": size,
                         "improvement": float(improvement.mean()), "stderr": stderr,
                         "fallback_rate": float(np.mean([f for _, f in results]))})
    return pd.DataFrame(rows, columns=SAFE_COLUMNS)
