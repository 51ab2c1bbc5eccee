"""
Core MDP, policy, trajectory and value-function abstractions.

States are either integer ids (tabular environments) or feature vectors (continuous or
factored environments). All sampling consumes pre-drawn blocks of uniforms, one block per
trajectory, so every step function is pure and rollouts vectorize across trajectories.
"""
import logging
import numbers
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
from sklearn.utils import check_scalar

from offpolicy.errors import SizeGuardError, SupportViolationError
from utils.rng_factory import RngFactory

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
ENUMERATION_LIMIT = 10**6


def _inverse_cdf(probs, u):
    """
    Sample one categorical index per row by inverse CDF.

    Args:
        probs: (n, k) row-stochastic matrix
        u: (n,) uniforms in [0, 1)

    Returns:
        np.ndarray: (n,) indices; zero-probability entries are never returned
    """
    probs = np.atleast_2d(probs)
    cum = np.cumsum(probs, axis=1)
    k = probs.shape[1]
    last_positive = k - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    cum[np.arange(k)[None, :] >= last_positive[:, None]] = 2.0
    return (u[:, None] >= cum).sum(axis=1)


class Environment(ABC):
    """Common interface of tabular and continuous environments.

    Subclasses declare how many uniforms a reset and a step consume; ``reset_batch`` and
    ``step_batch`` are pure functions of those uniforms.
    """

    env_id = "environment"
    n_reset_uniforms = 1
    n_step_uniforms = 0

    @property
    @abstractmethod
    def n_actions(self):
        """Number of discrete actions."""

    @abstractmethod
    def reset_batch(self, u):
        """Draw initial states from uniforms of shape (n, n_reset_uniforms)."""

    @abstractmethod
    def step_batch(self, states, actions, u):
        """Advance states; returns (next_states, rewards, terminal_flags)."""

    @abstractmethod
    def reward_range(self):
        """Return (r_min, r_max) over all emitted rewards."""

    def step(self, state, action, rng):
        """Single-step convenience wrapper around ``step_batch``."""
        u = rng.random((1, self.n_step_uniforms))
        nxt, reward, terminal = self.step_batch(
            np.asarray(state)[None], np.asarray([action]), u
        )
        return nxt[0], float(reward[0]), bool(terminal[0])

    def value_range(self):
        """Range of discounted H-step returns implied by the reward range."""
        r_min, r_max = self.reward_range()
        scale = discount_sum(self.gamma, self.horizon)
        return min(r_min * scale, 0.0), max(r_max * scale, 0.0)


def discount_sum(gamma, steps):
    """Sum of gamma^(t-1) for t = 1..steps, with the gamma=1 limit."""
    if steps <= 0:
        return 0.0
    if gamma == 1.0:
        return float(steps)
    return (1.0 - gamma**steps) / (1.0 - gamma)


@dataclass(frozen=True, eq=False)
class TabularMDP(Environment):
    """Finite MDP with explicit transition and reward tables.

    ``transition`` is either a dense (S, A, S) array or a sparse (S*A, S) matrix whose row
    ``s*A + a`` holds P(.|s, a). Reward randomness, when present, is an explicit discrete
    distribution per (s, a) given by ``reward_values`` / ``reward_probs`` of shape (S, A, K),
    independent of the next state.
    """

    transition: object
    mean_reward: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    horizon: int
    terminal: Optional[np.ndarray] = None
    reward_values: Optional[np.ndarray] = None
    reward_probs: Optional[np.ndarray] = None
    state_features: Optional[np.ndarray] = None
    env_id: str = "tabular"

    n_reset_uniforms = 1
    n_step_uniforms = 2

    def __post_init__(self):
        reward = np.array(self.mean_reward, dtype=np.float64)
        if reward.ndim != 2:
            raise ValueError(f"mean_reward must be (S, A), got shape {reward.shape}")
        n_states, n_actions = reward.shape
        object.__setattr__(self, "mean_reward", reward)

        if sp.issparse(self.transition):
            matrix = sp.csr_array(self.transition, dtype=np.float64)
            if matrix.shape != (n_states * n_actions, n_states):
                raise ValueError(f"sparse transition must be (S*A, S), got {matrix.shape}")
            matrix.eliminate_zeros()
            matrix.sort_indices()
            object.__setattr__(self, "transition", matrix)
            if matrix.nnz and matrix.data.min() < 0:
                raise ValueError("transition probabilities must be nonnegative")
            row_sums = np.asarray(matrix.sum(axis=1)).ravel()
        else:
            dense = np.array(self.transition, dtype=np.float64)
            if dense.shape != (n_states, n_actions, n_states):
                raise ValueError(f"transition must be (S, A, S), got {dense.shape}")
            if dense.min() < 0:
                raise ValueError("transition probabilities must be nonnegative")
            object.__setattr__(self, "transition", dense)
            row_sums = dense.sum(axis=2).ravel()
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > PROB_TOL)
        if bad.size:
            s, a = divmod(int(bad[0]), n_actions)
            raise ValueError(f"P(.|s={s}, a={a}) sums to {row_sums[bad[0]]!r}, expected 1")

        mu = np.array(self.initial_dist, dtype=np.float64)
        if mu.shape != (n_states,) or mu.min() < 0 or abs(mu.sum() - 1.0) > PROB_TOL:
            raise ValueError("initial_dist must be a probability vector over states")
        object.__setattr__(self, "initial_dist", mu)

        check_scalar(self.gamma, "gamma", numbers.Real, min_val=0.0, max_val=1.0)
        check_scalar(self.horizon, "horizon", numbers.Integral, min_val=0)

        terminal = (
            np.zeros(n_states, dtype=bool)
            if self.terminal is None
            else np.array(self.terminal, dtype=bool)
        )
        object.__setattr__(self, "terminal", terminal)

        if (self.reward_values is None) != (self.reward_probs is None):
            raise ValueError("reward_values and reward_probs must be given together")
        if self.reward_values is not None:
            values = np.array(self.reward_values, dtype=np.float64)
            probs = np.array(self.reward_probs, dtype=np.float64)
            if values.shape != probs.shape or values.shape[:2] != (n_states, n_actions):
                raise ValueError("reward noise tables must be (S, A, K)")
            if probs.min() < 0 or np.abs(probs.sum(axis=2) - 1.0).max() > PROB_TOL:
                raise ValueError("reward_probs rows must be probability vectors")
            if np.abs((values * probs).sum(axis=2) - reward).max() > 1e-9:
                raise ValueError("mean_reward disagrees with the reward noise distribution")
            object.__setattr__(self, "reward_values", values)
            object.__setattr__(self, "reward_probs", probs)

        for s in np.flatnonzero(terminal):
            row = self.transition_matrix[[s * n_actions + a for a in range(n_actions)]]
            self_loop = row.toarray()[:, s]
            if np.abs(self_loop - 1.0).max() > PROB_TOL or np.abs(reward[s]).max() > 0:
                raise ValueError(f"absorbing state {s} must self-loop with reward 0")
            if self.reward_values is not None and np.abs(self.reward_variance[s]).max() > 0:
                raise ValueError(f"absorbing state {s} must have deterministic reward 0")

    @property
    def n_states(self):
        return self.mean_reward.shape[0]

    @property
    def n_actions(self):
        return self.mean_reward.shape[1]

    @cached_property
    def transition_matrix(self):
        """Sparse (S*A, S) view of the transition table."""
        if sp.issparse(self.transition):
            return self.transition
        matrix = sp.csr_array(self.transition.reshape(self.n_states * self.n_actions, -1))
        matrix.eliminate_zeros()
        matrix.sort_indices()
        return matrix

    @cached_property
    def transition_dense(self):
        """Dense (S, A, S) view; only sensible for small MDPs."""
        if sp.issparse(self.transition):
            return self.transition.toarray().reshape(self.n_states, self.n_actions, -1)
        return self.transition

    @cached_property
    def reward_variance(self):
        """Per-(s, a) reward variance, zero without reward noise."""
        if self.reward_values is None:
            return np.zeros_like(self.mean_reward)
        second = (self.reward_values**2 * self.reward_probs).sum(axis=2)
        return np.maximum(second - self.mean_reward**2, 0.0)

    def reward_distribution(self, state, action):
        """Return (values, probs) of the reward at (state, action)."""
        if self.reward_values is None:
            return np.array([self.mean_reward[state, action]]), np.array([1.0])
        return self.reward_values[state, action], self.reward_probs[state, action]

    def expected_next(self, values):
        """Return (S, A) table of E[values(s') | s, a]."""
        return (self.transition_matrix @ values).reshape(self.n_states, self.n_actions)

    def reward_range(self):
        if self.reward_values is None:
            return float(self.mean_reward.min()), float(self.mean_reward.max())
        mask = self.reward_probs > 0
        return float(self.reward_values[mask].min()), float(self.reward_values[mask].max())

    @cached_property
    def _sampler_keys(self):
        matrix = self.transition_matrix
        rows = np.repeat(np.arange(matrix.shape[0]), np.diff(matrix.indptr))
        cum = np.cumsum(matrix.data)
        starts = np.concatenate(([0.0], cum))[matrix.indptr[:-1]]
        within = cum - np.repeat(starts, np.diff(matrix.indptr))
        within[matrix.indptr[1:] - 1] = 1.0
        return rows + within

    def reset_batch(self, u):
        mu = np.broadcast_to(self.initial_dist, (u.shape[0], self.n_states))
        return _inverse_cdf(mu, u[:, 0]).astype(np.int64)

    def step_batch(self, states, actions, u):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        row = states * self.n_actions + actions
        pos = np.searchsorted(self._sampler_keys, row + u[:, 0], side="right")
        next_states = self.transition_matrix.indices[pos].astype(np.int64)
        if self.reward_values is None:
            rewards = self.mean_reward[states, actions].copy()
        else:
            probs = self.reward_probs[states, actions]
            pick = _inverse_cdf(probs, u[:, 1])
            rewards = self.reward_values[states, actions, pick]
        return next_states, rewards, self.terminal[next_states]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One logged H-step rollout; ``behavior_probs[t]`` is pi0(a_t | s_t)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray
    final_state: np.ndarray

    def __post_init__(self):
        horizon = len(self.actions)
        if not (len(self.states) == len(self.rewards) == len(self.behavior_probs) == horizon):
            raise ValueError("trajectory fields must all have length H")
        probs = np.asarray(self.behavior_probs, dtype=np.float64)
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("behavior probabilities must lie in [0, 1]")

    @property
    def horizon(self):
        return len(self.actions)

    def steps(self):
        """Yield (state, action, reward, behavior_prob) tuples in order."""
        yield from zip(self.states, self.actions, self.rewards, self.behavior_probs)

    def discounted_return(self, gamma):
        discounts = gamma ** np.arange(self.horizon)
        return float(np.dot(discounts, self.rewards))


@dataclass(frozen=True)
class DatasetMeta:
    """Provenance of a dataset."""

    seed: Optional[int] = None
    env_id: str = "unknown"
    behavior_id: Optional[str] = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """A batch of i.i.d. trajectories sharing one horizon, stored as stacked arrays.

    ``states`` is (n, H) for integer states or (n, H, d) for feature vectors;
    ``final_states`` is (n,) or (n, d).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_probs: np.ndarray
    final_states: np.ndarray
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        actions = np.asarray(self.actions, dtype=np.int64)
        if actions.ndim != 2 or actions.shape[0] == 0:
            raise ValueError("empty dataset is invalid")
        if actions.shape[1] == 0:
            raise ValueError("dataset horizon must be at least 1")
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        object.__setattr__(
            self, "behavior_probs", np.asarray(self.behavior_probs, dtype=np.float64)
        )
        object.__setattr__(self, "states", np.asarray(self.states))
        object.__setattr__(self, "final_states", np.asarray(self.final_states))
        shape = actions.shape
        if self.rewards.shape != shape or self.behavior_probs.shape != shape:
            raise ValueError("rewards and behavior_probs must match actions in shape")
        if self.states.shape[:2] != shape or len(self.final_states) != shape[0]:
            raise ValueError("states must be (n, H[, d]) and final_states (n[, d])")
        if np.any(self.behavior_probs < 0) or np.any(self.behavior_probs > 1):
            raise ValueError("behavior probabilities must lie in [0, 1]")

    def __len__(self):
        return self.actions.shape[0]

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def horizon(self):
        return self.actions.shape[1]

    @property
    def initial_states(self):
        return self.states[:, 0]

    @cached_property
    def next_states(self):
        """States s_{t+1} aligned with steps t = 1..H (the last column is the final state)."""
        tail = self.final_states[:, None]
        return np.concatenate([self.states[:, 1:], tail], axis=1)

    @cached_property
    def trajectories(self):
        return tuple(self.trajectory(i) for i in range(len(self)))

    def trajectory(self, i):
        return Trajectory(
            self.states[i], self.actions[i], self.rewards[i],
            self.behavior_probs[i], self.final_states[i],
        )

    @classmethod
    def from_trajectories(cls, trajectories, meta=None):
        """Stack trajectories of a common horizon into a dataset."""
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty dataset is invalid")
        horizons = {t.horizon for t in trajectories}
        if len(horizons) != 1:
            raise ValueError(f"trajectories disagree on horizon: {sorted(horizons)}")
        return cls(
            states=np.stack([np.asarray(t.states) for t in trajectories]),
            actions=np.stack([np.asarray(t.actions) for t in trajectories]),
            rewards=np.stack([np.asarray(t.rewards) for t in trajectories]),
            behavior_probs=np.stack([np.asarray(t.behavior_probs) for t in trajectories]),
            final_states=np.stack([np.asarray(t.final_state) for t in trajectories]),
            meta=meta or DatasetMeta(),
        )

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.states[indices], self.actions[indices], self.rewards[indices],
            self.behavior_probs[indices], self.final_states[indices], self.meta,
        )

    def split(self, n_first):
        """Prefix split into (first n_first trajectories, the rest)."""
        if not 0 < n_first < len(self):
            raise ValueError(f"split point {n_first} must lie strictly inside 1..{len(self) - 1}")
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    def shuffled(self, seed):
        return self.subset(RngFactory.generator(seed).permutation(len(self)))

    def returns(self, gamma):
        """Discounted return of every trajectory."""
        return self.rewards @ (gamma ** np.arange(self.horizon))


class Policy(ABC):
    """State-conditional action distribution over ``n_actions`` actions."""

    kind = "policy"

    def __init__(self, n_actions):
        self.n_actions = int(n_actions)

    @property
    def policy_id(self):
        return self.kind

    @abstractmethod
    def probs_batch(self, states):
        """Return an (n, A) matrix of action probabilities for n states."""

    def probs(self, state):
        return self.probs_batch(np.asarray(state)[None])[0]

    def prob(self, state, action):
        return float(self.probs(state)[action])


class TabularPolicy(Policy):
    """Explicit pi(a|s) table over integer states."""

    kind = "tabular"

    def __init__(self, table):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or table.min() < 0:
            raise ValueError("policy table must be a nonnegative (S, A) array")
        if np.abs(table.sum(axis=1) - 1.0).max() > PROB_TOL:
            raise ValueError("policy rows must sum to 1")
        super().__init__(table.shape[1])
        self.table = table

    def probs_batch(self, states):
        states = np.asarray(states)
        if states.size and (states.min() < 0 or states.max() >= self.table.shape[0]):
            bad = states[(states < 0) | (states >= self.table.shape[0])][0]
            raise ValueError(
                f"state {bad} outside the policy table (0..{self.table.shape[0] - 1})"
            )
        return self.table[states.astype(np.intp)]


class UniformPolicy(Policy):
    """Uniformly random behavior policy."""

    kind = "uniform"

    def probs_batch(self, states):
        return np.full((len(states), self.n_actions), 1.0 / self.n_actions)


class GreedyPolicy(Policy):
    """Deterministic greedy policy over a QFunction at a fixed step; ties go to the lowest index."""

    kind = "greedy"

    def __init__(self, qfunction, minimize=False, step=1):
        super().__init__(qfunction.n_actions)
        self.qfunction = qfunction
        self.minimize = minimize
        self.step = step

    @property
    def policy_id(self):
        return "greedy-min" if self.minimize else "greedy"

    def probs_batch(self, states):
        q = self.qfunction.q_batch(self.step, states)
        best = np.argmin(q, axis=1) if self.minimize else np.argmax(q, axis=1)
        out = np.zeros((len(best), self.n_actions))
        out[np.arange(len(best)), best] = 1.0
        return out


class MixturePolicy(Policy):
    """pi(a|s) = (1 - alpha) * pi_train(a|s) + alpha * pi0(a|s)."""

    kind = "mixture"

    def __init__(self, pi_train, pi0, alpha):
        super().__init__(pi_train.n_actions)
        self.pi_train = pi_train
        self.pi0 = pi0
        self.alpha = float(alpha)

    @property
    def policy_id(self):
        return f"mixture({self.pi_train.policy_id},{self.pi0.policy_id},alpha={self.alpha!r})"

    def probs_batch(self, states):
        return (1.0 - self.alpha) * self.pi_train.probs_batch(states) + (
            self.alpha * self.pi0.probs_batch(states)
        )


def mix_policies(pi_train, pi0, alpha):
    """
    Mix a trained policy with the behavior policy.

    Args:
        pi_train: Policy to be mixed
        pi0: behavior Policy
        alpha (float): weight of pi0, in [0, 1]

    Returns:
        MixturePolicy
    """
    check_scalar(alpha, "alpha", numbers.Real, min_val=0.0, max_val=1.0)
    if pi_train.n_actions != pi0.n_actions:
        raise ValueError("policies disagree on the number of actions")
    return MixturePolicy(pi_train, pi0, alpha)


class QFunction(ABC):
    """Horizon-indexed action values Q(t, s, a), t = 1..H, plus the paired V under ``policy``.

    Steps outside 1..H evaluate to 0, the V^0 = 0 convention.
    """

    def __init__(self, horizon, n_actions, policy=None):
        self.horizon = int(horizon)
        self.n_actions = int(n_actions)
        self.policy = policy

    @abstractmethod
    def _q_batch(self, t, states):
        """Action values at step 1 <= t <= horizon for n states, shape (n, A)."""

    def q_batch(self, t, states):
        states = np.asarray(states)
        if t < 1 or t > self.horizon:
            return np.zeros((len(states), self.n_actions))
        return self._q_batch(t, states)

    def q(self, t, state):
        return self.q_batch(t, np.asarray(state)[None])[0]

    def v_batch(self, t, states):
        """V(t, s) = sum_a pi(a|s) Q(t, s, a); always derived from Q."""
        if self.policy is None:
            raise ValueError("this QFunction has no evaluation policy attached")
        states = np.asarray(states)
        return (self.policy.probs_batch(states) * self.q_batch(t, states)).sum(axis=1)

    def v(self, t, state):
        return float(self.v_batch(t, np.asarray(state)[None])[0])


class TabularQ(QFunction):
    """Q stored as an (H, S, A) table over integer states."""

    def __init__(self, values, policy=None):
        values = np.asarray(values, dtype=np.float64)
        super().__init__(values.shape[0], values.shape[2], policy)
        self.values = values

    def _q_batch(self, t, states):
        return self.values[t - 1][states.astype(np.intp)]


class ConstantQ(QFunction):
    """State-action independent, step-dependent constants; all zeros gives Q = 0."""

    def __init__(self, constants, n_actions, policy=None):
        constants = np.asarray(constants, dtype=np.float64)
        super().__init__(len(constants), n_actions, policy)
        self.constants = constants

    def _q_batch(self, t, states):
        return np.full((len(states), self.n_actions), self.constants[t - 1])


def zero_q(horizon, n_actions, policy=None):
    return ConstantQ(np.zeros(horizon), n_actions, policy)


def _rollout(env, policy, reset_u, step_u):
    n = reset_u.shape[0]
    horizon = env.horizon
    states = env.reset_batch(reset_u)
    state_hist = np.empty((n, horizon) + states.shape[1:], dtype=states.dtype)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    behavior = np.empty((n, horizon))
    rows = np.arange(n)
    for t in range(horizon):
        probs = policy.probs_batch(states)
        act = _inverse_cdf(probs, step_u[:, t, 0])
        state_hist[:, t] = states
        actions[:, t] = act
        behavior[:, t] = probs[rows, act]
        states, rewards[:, t], _ = env.step_batch(states, act, step_u[:, t, 1:])
    return state_hist, actions, rewards, behavior, states


def _block_size(env):
    return env.n_reset_uniforms + env.horizon * (1 + env.n_step_uniforms)


def _split_blocks(env, blocks):
    k0 = env.n_reset_uniforms
    step_u = blocks[:, k0:].reshape(len(blocks), env.horizon, 1 + env.n_step_uniforms)
    return blocks[:, :k0], step_u


def _rollout_from_seeds(env, policy, seeds, meta):
    blocks = RngFactory.uniform_blocks(seeds, _block_size(env))
    states, actions, rewards, behavior, final = _rollout(env, policy, *_split_blocks(env, blocks))
    return Dataset(states, actions, rewards, behavior, final, meta)


def _meta_for(env, policy, seed):
    return DatasetMeta(
        seed=int(seed) if isinstance(seed, numbers.Integral) else None,
        env_id=env.env_id,
        behavior_id=policy.policy_id,
    )


def sample_trajectory(env, policy, seed):
    """
    Roll out one H-step trajectory; deterministic given the seed.

    Args:
        env: Environment (TabularMDP or continuous)
        policy: Policy defined on every reachable state
        seed: int or SeedSequence

    Returns:
        Trajectory
    """
    ss = RngFactory.seed_sequence(seed)
    return _rollout_from_seeds(env, policy, [ss], _meta_for(env, policy, seed)).trajectory(0)


def sample_dataset(env, policy, n, seed):
    """
    Draw n independent trajectories; trajectory i uses the i-th child of the master seed.

    Args:
        env: Environment
        policy: behavior Policy
        n (int): number of trajectories, at least 1
        seed: master seed

    Returns:
        Dataset
    """
    check_scalar(n, "n", numbers.Integral, min_val=1)
    children = RngFactory.spawn(seed, n)
    dataset = _rollout_from_seeds(env, policy, children, _meta_for(env, policy, seed))
    logger.debug("sampled %d trajectories from %s", n, env.env_id)
    return dataset


def rollout_returns(env, policy, n, seed, chunk=10_000):
    """Discounted returns of n rollouts, generated in memory-bounded chunks."""
    children = RngFactory.spawn(seed, n)
    discounts = env.gamma ** np.arange(env.horizon)
    out = np.empty(n)
    for start in range(0, n, chunk):
        part = children[start:start + chunk]
        blocks = RngFactory.uniform_blocks(part, _block_size(env))
        _, _, rewards, _, _ = _rollout(env, policy, *_split_blocks(env, blocks))
        out[start:start + len(part)] = rewards @ discounts
    return out


def monte_carlo_value(env, policy, n, seed):
    """
    Monte Carlo estimate of the H-step discounted value.

    Args:
        env: Environment
        policy: Policy to evaluate on-policy
        n (int): number of rollouts, at least 2
        seed: master seed

    Returns:
        tuple: (mean, standard error)
    """
    check_scalar(n, "n", numbers.Integral, min_val=2)
    returns = rollout_returns(env, policy, n, seed)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n))


def exact_q(mdp, policy, horizon=None):
    """
    Finite-horizon Bellman recursion: Q(t, s, a) is the (H+1-t)-step action value.

    Args:
        mdp: TabularMDP
        policy: Policy over the MDP's integer states
        horizon (int): H, at most mdp.horizon (defaults to it)

    Returns:
        TabularQ with ``policy`` attached
    """
    horizon = mdp.horizon if horizon is None else horizon
    check_scalar(horizon, "horizon", numbers.Integral, min_val=0, max_val=mdp.horizon)
    pi = policy.probs_batch(np.arange(mdp.n_states))
    values = np.zeros((horizon, mdp.n_states, mdp.n_actions))
    v_next = np.zeros(mdp.n_states)
    for t in range(horizon, 0, -1):
        q = mdp.mean_reward + mdp.gamma * mdp.expected_next(v_next)
        values[t - 1] = q
        v_next = (pi * q).sum(axis=1)
    return TabularQ(values, policy)


def exact_value(mdp, policy, horizon=None):
    """v^{pi,H} = sum_s mu(s) V^H(s); 0 at horizon 0."""
    q = exact_q(mdp, policy, horizon)
    if q.horizon == 0:
        return 0.0
    return float(mdp.initial_dist @ q.v_batch(1, np.arange(mdp.n_states)))


def importance_ratios(dataset, pi1):
    """
    Per-step ratios rho_t = pi1(a_t|s_t) / behavior_prob_t for every trajectory.

    Args:
        dataset: Dataset
        pi1: target Policy

    Returns:
        np.ndarray: (n, H) ratio matrix

    Raises:
        SupportViolationError: pi1 puts mass on a logged action whose behavior_prob is 0
    """
    n, horizon = dataset.actions.shape
    flat_states = dataset.states.reshape((n * horizon,) + dataset.states.shape[2:])
    probs = pi1.probs_batch(flat_states)
    target = probs[np.arange(n * horizon), dataset.actions.ravel()].reshape(n, horizon)
    behavior = dataset.behavior_probs
    violation = (behavior <= 0) & (target > 0)
    if violation.any():
        i, t = map(int, np.argwhere(violation)[0])
        raise SupportViolationError(
            f"trajectory {i} step {t + 1}: target probability {target[i, t]!r} "
            "on an action with behavior probability 0"
        )
    safe = np.where(behavior > 0, behavior, 1.0)
    return np.where(behavior > 0, target / safe, 0.0)


def cumulative_ratios(traj, pi1):
    """Prefix products rho_{1:t}, t = 1..H, for a single trajectory."""
    single = Dataset.from_trajectories([traj])
    return np.cumprod(importance_ratios(single, pi1)[0])


def enumerate_trajectories(mdp, policy, horizon=None, limit=ENUMERATION_LIMIT):
    """
    Explicitly enumerate every H-step trajectory with positive probability.

    Branches over initial states, actions, reward outcomes and next states.

    Args:
        mdp: TabularMDP
        policy: Policy generating the actions (its probabilities are logged)
        horizon (int): defaults to mdp.horizon
        limit (int): size guard on the number of partial trajectories

    Returns:
        tuple: (Dataset of all trajectories, np.ndarray of their probabilities)
    """
    horizon = mdp.horizon if horizon is None else horizon
    pi = policy.probs_batch(np.arange(mdp.n_states))
    dense = mdp.transition_dense
    frontier = [
        ((), (), (), (), int(s), float(p))
        for s, p in enumerate(mdp.initial_dist) if p > 0
    ]
    for _ in range(horizon):
        expanded = []
        for states, actions, rewards, probs, s, p in frontier:
            for a in np.flatnonzero(pi[s] > 0):
                values, rprobs = mdp.reward_distribution(s, a)
                next_states = np.flatnonzero(dense[s, a] > 0)
                for r, pr in zip(values, rprobs):
                    if pr <= 0:
                        continue
                    for s2 in next_states:
                        expanded.append((
                            states + (s,), actions + (int(a),), rewards + (float(r),),
                            probs + (float(pi[s, a]),), int(s2),
                            p * pi[s, a] * pr * dense[s, a, s2],
                        ))
                if len(expanded) > limit:
                    raise SizeGuardError(f"more than {limit} trajectories to enumerate")
        frontier = expanded
    dataset = Dataset(
        states=np.array([f[0] for f in frontier], dtype=np.int64).reshape(len(frontier), horizon),
        actions=np.array([f[1] for f in frontier], dtype=np.int64).reshape(len(frontier), horizon),
        rewards=np.array([f[2] for f in frontier]).reshape(len(frontier), horizon),
        behavior_probs=np.array([f[3] for f in frontier]).reshape(len(frontier), horizon),
        final_states=np.array([f[4] for f in frontier], dtype=np.int64),
        meta=DatasetMeta(env_id=mdp.env_id, behavior_id=policy.policy_id),
    )
    return dataset, np.array([f[5] for f in frontier])
