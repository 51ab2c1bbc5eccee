"""
Exact evaluation of variance, bias and lower-bound quantities on enumerable MDPs, plus the
Monte Carlo MSE harness used by the experiments.
"""
import logging
import math
import numbers
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from sklearn.utils import check_scalar

from offpolicy.environments import (
    is_tree,
    layers_of,
    make_random_dag_mdp,
    make_random_policy,
    make_random_tree_mdp,
    make_reunion_dag,
    make_t2,
    unroll_to_tree,
    unrolled_policy,
)
from offpolicy.errors import NotATreeError, SizeGuardError, SupportViolationError
from offpolicy.estimators import EstimatorParams, trajectory_values
from offpolicy.mdp_core import (
    TabularPolicy,
    TabularQ,
    discount_sum,
    enumerate_trajectories,
    exact_q,
    exact_value,
    importance_ratios,
    zero_q,
)
from offpolicy.model_fit import FittedModel
from utils.rng_factory import RngFactory

logger = logging.getLogger(__name__)

BACKUP_CELL_LIMIT = 10**6


@dataclass(frozen=True)
class VarianceBreakdown:
    """Per-step terms of the DR variance; index t-1 holds step t.

    ``future_terms[t-1]`` is the variance contributed by steps after t.
    """

    state_terms: np.ndarray
    delta_terms: np.ndarray
    reward_terms: np.ndarray
    future_terms: np.ndarray
    total: float


@dataclass(frozen=True)
class OccupancyTable:
    """Marginal probabilities P(s_t = s, a_t = a) under pi0 and pi1, shape (H, S, A)."""

    p0: np.ndarray
    p1: np.ndarray


@dataclass(frozen=True)
class MSEResult:
    """Monte Carlo accuracy of an estimation pipeline against a known value."""

    rel_rmse: float
    rmse: float
    bias: float
    variance: float
    stderr: float
    runs: int
    estimates: np.ndarray = field(repr=False)


def _policy_table(policy, n_states):
    return policy.probs_batch(np.arange(n_states))


def _ratio_weights(pi0, pi1, mass):
    """pi1^2 / pi0 per (s, a) where pi0 > 0; raises when pi1 needs an action pi0 never takes."""
    violation = (pi0 <= 0) & (pi1 > 0) & (mass[:, None] > 0)
    if violation.any():
        s, a = map(int, np.argwhere(violation)[0])
        raise SupportViolationError(f"pi1 takes action {a} at state {s} where pi0 does not")
    safe = np.where(pi0 > 0, pi0, 1.0)
    return np.where(pi0 > 0, pi1**2 / safe, 0.0), np.where(pi0 > 0, pi1 / safe, 0.0)


def _next_variance(mdp, values):
    """Var_{s' ~ P(.|s, a)} values(s') as an (S, A) table."""
    mean = mdp.expected_next(values)
    return np.maximum(mdp.expected_next(values**2) - mean**2, 0.0)


def dr_variance_exact(mdp, pi0, pi1, qhat, horizon=None):
    """
    Exact variance of the DR estimate of one trajectory drawn under pi0.

    The recursive variance formula is unrolled forward with the weighted occupancy
    w_1 = mu, w_{t+1}(s') = gamma^2 sum_{s,a} w_t(s) pi0(a|s) rho(s,a)^2 P(s'|s,a); step t
    contributes the spread of V(s_t) given its predecessor, the pi0-variance of rho * (Q-hat - Q)
    and the reward noise weighted by rho^2.

    Args:
        mdp: TabularMDP
        pi0: behavior Policy
        pi1: target Policy
        qhat: any QFunction over the MDP's states
        horizon (int): defaults to mdp.horizon

    Returns:
        VarianceBreakdown
    """
    horizon = mdp.horizon if horizon is None else horizon
    n_states, n_actions = mdp.n_states, mdp.n_actions
    if n_states * n_actions * horizon > BACKUP_CELL_LIMIT:
        raise SizeGuardError(f"{n_states * n_actions * horizon} backup cells exceed {BACKUP_CELL_LIMIT}")
    p0 = _policy_table(pi0, n_states)
    p1 = _policy_table(pi1, n_states)
    truth = exact_q(mdp, pi1, horizon)
    states = np.arange(n_states)
    gamma2 = mdp.gamma**2

    state_terms = np.zeros(horizon)
    delta_terms = np.zeros(horizon)
    reward_terms = np.zeros(horizon)
    weight = mdp.initial_dist.copy()
    prev_pass = None
    for t in range(1, horizon + 1):
        q_true = truth.q_batch(t, states)
        v_true = (p1 * q_true).sum(axis=1)
        if t == 1:
            mean = mdp.initial_dist @ v_true
            state_terms[0] = mdp.initial_dist @ (v_true - mean) ** 2
        else:
            state_terms[t - 1] = gamma2 * (prev_pass * _next_variance(mdp, v_true)).sum()
        ratio_sq, ratio = _ratio_weights(p0, p1, weight)
        delta = qhat.q_batch(t, states) - q_true
        weighted = ratio * delta
        spread = (p0 * weighted**2).sum(axis=1) - (p0 * weighted).sum(axis=1) ** 2
        delta_terms[t - 1] = weight @ np.maximum(spread, 0.0)
        flow = weight[:, None] * ratio_sq
        reward_terms[t - 1] = (flow * mdp.reward_variance).sum()
        prev_pass = flow
        weight = gamma2 * (mdp.transition_matrix.T @ flow.ravel())

    per_step = state_terms + delta_terms + reward_terms
    future = np.concatenate([np.cumsum(per_step[::-1])[::-1][1:], [0.0]])
    return VarianceBreakdown(
        state_terms=state_terms, delta_terms=delta_terms, reward_terms=reward_terms,
        future_terms=future, total=float(per_step.sum()),
    )


def cr_bound_tree(tree, pi0, pi1, horizon=None):
    """
    Lower bound on the variance of unbiased estimators for a tree MDP.

    Evaluated by enumerating every history under pi0:
    sum_t gamma^(2(t-1)) E[rho_{1:t-1}^2 Var_t V(s_t)] + E[rho_{1:t}^2 Var(r_t | s_t, a_t)],
    where Var_t is the spread of V(s_t) around its mean given the parent history.

    Raises:
        NotATreeError: some state has more than one history (use cr_bound_dag)
    """
    horizon = tree.horizon if horizon is None else horizon
    if not is_tree(tree, horizon):
        raise NotATreeError("input is not a tree MDP; use cr_bound_dag for layered MDPs")
    truth = exact_q(tree, pi1, horizon)
    states = np.arange(tree.n_states)
    values = np.array([truth.v_batch(t, states) for t in range(1, horizon + 1)])
    data, probs = enumerate_trajectories(tree, pi0, horizon)
    cum = np.cumprod(importance_ratios(data, pi1), axis=1)
    before = np.hstack([np.ones((len(data), 1)), cum[:, :-1]])
    bound = 0.0
    for t in range(1, horizon + 1):
        s_t = data.states[:, t - 1]
        if t == 1:
            expected = tree.initial_dist @ values[0]
        else:
            parent = data.states[:, t - 2]
            action = data.actions[:, t - 2]
            expected = tree.expected_next(values[t - 1])[parent, action]
        spread = (values[t - 1][s_t] - expected) ** 2
        noise = (data.rewards[:, t - 1] - tree.mean_reward[s_t, data.actions[:, t - 1]]) ** 2
        scale = tree.gamma ** (2 * (t - 1))
        bound += scale * probs @ (before[:, t - 1] ** 2 * spread + cum[:, t - 1] ** 2 * noise)
    return float(bound)


def occupancy_table(mdp, pi0, pi1, horizon=None):
    """Forward-propagated state-action marginals under both policies."""
    horizon = mdp.horizon if horizon is None else horizon
    n_states = mdp.n_states
    tables = []
    for policy in (pi0, pi1):
        pi = _policy_table(policy, n_states)
        dist = mdp.initial_dist.copy()
        layers = np.zeros((horizon, n_states, mdp.n_actions))
        for t in range(horizon):
            layers[t] = dist[:, None] * pi
            dist = mdp.transition_matrix.T @ layers[t].ravel()
        tables.append(layers)
    return OccupancyTable(p0=tables[0], p1=tables[1])


def cr_bound_dag(dag, pi0, pi1, horizon=None):
    """
    Lower bound for layered (DAG) MDPs: cumulative ratios are replaced by occupancy ratios
    P1(s_t, a_t) / P0(s_t, a_t).

    Raises:
        NotLayeredError: a state is reachable at two different steps
        SupportViolationError: P1 > 0 where P0 = 0
    """
    horizon = dag.horizon if horizon is None else horizon
    layers_of(dag, horizon)
    occ = occupancy_table(dag, pi0, pi1, horizon)
    truth = exact_q(dag, pi1, horizon)
    states = np.arange(dag.n_states)
    violation = (occ.p0 <= 0) & (occ.p1 > 0)
    if violation.any():
        t, s, a = map(int, np.argwhere(violation)[0])
        raise SupportViolationError(f"pi1 reaches (s={s}, a={a}) at step {t + 1}, pi0 never does")
    safe = np.where(occ.p0 > 0, occ.p0, 1.0)
    ratio_sq = np.where(occ.p0 > 0, occ.p1**2 / safe, 0.0)
    bound = 0.0
    for t in range(1, horizon + 1):
        v_true = truth.v_batch(t, states)
        scale = dag.gamma ** (2 * (t - 1))
        if t == 1:
            mean = dag.initial_dist @ v_true
            state_term = dag.initial_dist @ (v_true - mean) ** 2
        else:
            state_term = (ratio_sq[t - 2] * _next_variance(dag, v_true)).sum()
        reward_term = (ratio_sq[t - 1] * dag.reward_variance).sum()
        bound += scale * (state_term + reward_term)
    return float(bound)


def drv2_bias_bound(epsilon, v_max, gamma, horizon):
    """epsilon * v_max * sum_{t=1}^H gamma^t."""
    check_scalar(epsilon, "epsilon", numbers.Real, min_val=0.0)
    check_scalar(v_max, "v_max", numbers.Real, min_val=0.0)
    return float(epsilon * v_max * gamma * discount_sum(gamma, horizon))


def model_l1_epsilon(model, truth):
    """
    max over (s, a) of ||P-hat(.|s, a) - P(.|s, a)||_1.

    Args:
        model: FittedModel or TabularMDP
        truth: TabularMDP over the same states and actions
    """
    fitted = model.mdp if isinstance(model, FittedModel) else model
    if fitted.mean_reward.shape != truth.mean_reward.shape:
        raise ValueError(
            f"model has shape {fitted.mean_reward.shape}, truth {truth.mean_reward.shape}"
        )
    diff = abs(fitted.transition_matrix - truth.transition_matrix)
    return float(np.asarray(diff.sum(axis=1)).max())


def model_v_max(qhat):
    """Largest |V-hat| over all steps and model states of a model-backed QFunction."""
    return float(np.abs(qhat.v_table).max())


def estimator_mse(pipeline, ground_truth, runs, seed, workers=1):
    """
    Monte Carlo accuracy of a full estimation pipeline.

    Args:
        pipeline: callable SeedSequence -> estimate (float), one call per run
        ground_truth (float): value being estimated
        runs (int): number of repetitions, at least 2
        seed: master seed; run i receives the i-th child sequence
        workers (int): joblib worker processes

    Returns:
        MSEResult with rmse relative to |ground_truth| and a delta-method standard error
    """
    check_scalar(runs, "runs", numbers.Integral, min_val=2)
    children = RngFactory.spawn(seed, runs)
    if workers > 1:
        estimates = Parallel(n_jobs=workers)(delayed(pipeline)(child) for child in children)
    else:
        estimates = [pipeline(child) for child in children]
    return mse_summary(estimates, ground_truth)


def mse_summary(estimates, ground_truth):
    """Summarize repeated estimates of a known value as an MSEResult."""
    estimates = np.asarray(estimates, dtype=np.float64)
    runs = len(estimates)
    errors = estimates - ground_truth
    mse = float(np.mean(errors**2))
    rmse = math.sqrt(mse)
    se_mse = float(np.std(errors**2, ddof=1) / math.sqrt(runs)) if runs > 1 else math.nan
    se_rmse = se_mse / (2.0 * rmse) if rmse > 0 else 0.0
    scale = abs(ground_truth)
    if scale == 0:
        logger.warning("ground truth is 0; relative RMSE is undefined")
    return MSEResult(
        rel_rmse=rmse / scale if scale else math.nan,
        rmse=rmse,
        bias=float(errors.mean()),
        variance=float(estimates.var(ddof=1)) if runs > 1 else math.nan,
        stderr=se_rmse / scale if scale else math.nan,
        runs=runs,
        estimates=estimates,
    )


def _reward_shifted_model(mdp, rng):
    """Exact transitions with a wrong mean reward on non-absorbing states."""
    noise = rng.normal(scale=0.3, size=mdp.mean_reward.shape)
    noise[mdp.terminal] = 0.0
    shifted = replace(mdp, mean_reward=mdp.mean_reward + noise, reward_values=None,
                      reward_probs=None)
    return FittedModel.from_mdp(shifted)


def _fixtures(seed, n_trees, n_dags):
    rng = RngFactory.generator(seed)
    yield "t2", make_t2(reward_noise=0.5)
    for i in range(n_trees):
        yield f"tree-{i}", make_random_tree_mdp(
            int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 4)),
            seed=int(rng.integers(2**31)),
        )
    for i in range(n_dags):
        sizes = rng.integers(1, 4, size=int(rng.integers(1, 4)))
        yield f"dag-{i}", make_random_dag_mdp(sizes, int(rng.integers(2, 4)),
                                              seed=int(rng.integers(2**31)))


def run_theory_suite(seed, n_trees=20, n_dags=10):
    """
    Enumeration checks of the estimator theory on random tree and DAG fixtures.

    Returns:
        dict: maximum absolute deviation per check (``unbiasedness``, ``variance_recursion``,
        ``tree_bound_equality``, ``dag_below_tree``); every entry should be ~0
    """
    rng = RngFactory.generator(seed)
    worst = {"unbiasedness": 0.0, "variance_recursion": 0.0,
             "tree_bound_equality": 0.0, "dag_below_tree": 0.0}
    for name, mdp in _fixtures(seed, n_trees, n_dags):
        n_states, n_actions = mdp.n_states, mdp.n_actions
        pi0 = make_random_policy(n_states, n_actions, int(rng.integers(2**31)))
        pi1 = make_random_policy(n_states, n_actions, int(rng.integers(2**31)))
        truth = exact_value(mdp, pi1)
        data, probs = enumerate_trajectories(mdp, pi0)
        q_true = exact_q(mdp, pi1)
        qhats = {
            "exact": q_true,
            "zero": zero_q(mdp.horizon, n_actions),
            "random": TabularQ(rng.normal(size=q_true.values.shape)),
        }
        params = EstimatorParams(pi1=pi1, gamma=mdp.gamma)
        estimates = {m: trajectory_values(data, m, params) for m in ("is", "step_is")}
        for label, qhat in qhats.items():
            values = trajectory_values(data, "dr", replace(params, qhat=qhat))
            estimates[f"dr-{label}"] = values
            enumerated = probs @ (values - truth) ** 2
            breakdown = dr_variance_exact(mdp, pi0, pi1, qhat)
            worst["variance_recursion"] = max(worst["variance_recursion"],
                                              abs(breakdown.total - enumerated))
        estimates["dr_v2"] = trajectory_values(
            data, "dr_v2", replace(params, model=_reward_shifted_model(mdp, rng))
        )
        for values in estimates.values():
            worst["unbiasedness"] = max(worst["unbiasedness"], abs(probs @ values - truth))
        if is_tree(mdp):
            equality = abs(cr_bound_tree(mdp, pi0, pi1) - dr_variance_exact(mdp, pi0, pi1,
                                                                          q_true).total)
            worst["tree_bound_equality"] = max(worst["tree_bound_equality"], equality)
        else:
            tree = unroll_to_tree(mdp)
            gap = cr_bound_dag(mdp, pi0, pi1) - cr_bound_tree(
                tree, unrolled_policy(pi0, tree), unrolled_policy(pi1, tree)
            )
            worst["dag_below_tree"] = max(worst["dag_below_tree"], gap)
        logger.debug("theory fixture %s checked", name)
    reunion = make_reunion_dag()
    pi0 = TabularPolicy(np.full((3, 2), 0.5))
    pi1 = TabularPolicy([[0.9, 0.1], [1.0, 0.0], [0.5, 0.5]])
    tree = unroll_to_tree(reunion)
    gap = cr_bound_dag(reunion, pi0, pi1) - cr_bound_tree(
        tree, unrolled_policy(pi0, tree), unrolled_policy(pi1, tree)
    )
    worst["dag_below_tree"] = max(worst["dag_below_tree"], gap)
    logger.info("theory suite: %s", worst)
    return worst
