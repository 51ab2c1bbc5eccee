"""
Model learning from logged data: tabular MLE over aggregated states, kernel-based RL,
factored fits and optimal-policy extraction.

Every learned model is a ``FittedModel``: a TabularMDP over abstract states plus the map from
raw environment states to abstract indices.
"""
import logging
import numbers
from dataclasses import dataclass, replace
from functools import cached_property
from itertools import chain
from typing import Optional

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.spatial import cKDTree
from sklearn.linear_model import LinearRegression
from sklearn.utils import check_scalar

from offpolicy.environments import UNKNOWN_ID, FactoredTables
from offpolicy.mdp_core import (
    ConstantQ,
    GreedyPolicy,
    QFunction,
    TabularMDP,
    discount_sum,
)

logger = logging.getLogger(__name__)

KERNEL_CROP = 1.0
KERNEL_PARTICLES = 5


@dataclass(frozen=True)
class FeatureIndex:
    """Mixed-radix id of integer feature vectors (C order, variable 0 most significant)."""

    shape: tuple

    def ids(self, states):
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        return np.ravel_multi_index(tuple(states.T), self.shape)


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A learned MDP over abstract states.

    ``encoder`` turns raw states into integer keys (a Discretizer, a FeatureIndex, or None for
    integer states). With ``state_keys`` set, abstract index i stands for key ``state_keys[i]``
    and the last abstract state is a catch-all for keys never seen in the data; otherwise keys
    are abstract indices directly.
    """

    mdp: TabularMDP
    representatives: np.ndarray
    reward_floor: float
    encoder: object = None
    state_keys: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    flags: tuple = ()
    residual: float = 0.0
    factors: Optional[FactoredTables] = None

    @classmethod
    def from_mdp(cls, mdp):
        """Wrap a known MDP as an exact model (P-hat = P, R-hat = R)."""
        return cls(mdp=mdp, representatives=np.arange(mdp.n_states),
                   reward_floor=mdp.reward_range()[0])

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    @property
    def catch_all(self):
        return None if self.state_keys is None else self.mdp.n_states - 1

    def index_batch(self, states):
        """Abstract state index of each raw state."""
        states = np.asarray(states)
        keys = states.astype(np.int64) if self.encoder is None else self.encoder.ids(states)
        if self.state_keys is None:
            if keys.size and (keys.min() < 0 or keys.max() >= self.n_states):
                raise ValueError(f"state outside the model's {self.n_states} states")
            return keys
        pos = np.searchsorted(self.state_keys, keys)
        clipped = np.minimum(pos, len(self.state_keys) - 1)
        found = (pos < len(self.state_keys)) & (self.state_keys[clipped] == keys)
        return np.where(found, clipped, self.catch_all)

    def reward_batch(self, states, actions):
        """R-hat(s, a) for raw states."""
        return self.mdp.mean_reward[self.index_batch(states), np.asarray(actions, dtype=np.intp)]

    def qfunction(self, q_table, v_table, policy):
        return ModelQ(self, q_table, v_table, policy)

    def summary(self):
        """Per-(state, action) table of counts, rewards and successor counts."""
        n_states, n_actions = self.mdp.mean_reward.shape
        matrix = self.mdp.transition_matrix
        frame = pd.DataFrame({
            "state": np.repeat(np.arange(n_states), n_actions),
            "action": np.tile(np.arange(n_actions), n_states),
            "count": (np.zeros(n_states * n_actions, dtype=np.int64) if self.counts is None
                      else self.counts.ravel()),
            "reward": self.mdp.mean_reward.ravel(),
            "successors": np.diff(matrix.indptr),
        })
        frame.attrs["residual"] = self.residual
        frame.attrs["flags"] = self.flags
        return frame


class ModelQ(QFunction):
    """Q-hat and V-hat tables of a FittedModel, queried through its state map."""

    def __init__(self, model, q_table, v_table, policy=None):
        super().__init__(q_table.shape[0], q_table.shape[2], policy)
        self.model = model
        self.q_table = q_table
        self.v_table = v_table

    def _q_batch(self, t, states):
        return self.q_table[t - 1][self.model.index_batch(states)]


def _model_states(states):
    if states.ndim == 1:
        return states[:, None]
    return states


def fit_tabular_model(dataset, discretizer=None, reward_floor=None, gamma=1.0, horizon=None,
                      n_states=None, n_actions=None):
    """
    Maximum-likelihood tabular model over (aggregated) states.

    Args:
        dataset: Dataset of logged trajectories
        discretizer: Discretizer for feature-vector states; None for integer states
        reward_floor (float): reward of unseen (s, a) pairs, defaults to the smallest observed reward
        gamma (float): discount of the fitted model
        horizon (int): horizon of the fitted model, defaults to the dataset's
        n_states (int): state count for integer states (defaults to the largest id seen + 1)
        n_actions (int): action count, defaults to the largest action seen + 1

    Returns:
        FittedModel whose unseen pairs self-loop with reward ``reward_floor``
    """
    n, steps = dataset.actions.shape
    n_actions = int(dataset.actions.max()) + 1 if n_actions is None else int(n_actions)
    flat = dataset.states.reshape((n * steps,) + dataset.states.shape[2:])
    nxt = dataset.next_states.reshape((n * steps,) + dataset.states.shape[2:])
    actions = dataset.actions.ravel()
    rewards = dataset.rewards.ravel()
    if reward_floor is None:
        reward_floor = float(rewards.min())

    if discretizer is None:
        if flat.ndim != 1:
            raise ValueError("feature-vector states need a discretizer")
        seen_max = int(max(flat.max(), nxt.max()))
        n_states = seen_max + 1 if n_states is None else int(n_states)
        state_keys = None
        representatives = np.arange(n_states)
        s_idx, n_idx = flat.astype(np.int64), nxt.astype(np.int64)
        init_idx = dataset.initial_states.astype(np.int64)
    else:
        ids_s, ids_n = discretizer.ids(flat), discretizer.ids(nxt)
        raw = np.concatenate([_model_states(flat), _model_states(nxt)]).astype(np.float64)
        keys, first = np.unique(np.concatenate([ids_s, ids_n]), return_index=True)
        known = keys != UNKNOWN_ID
        state_keys = keys[known]
        representatives = np.vstack([raw[first[known]], np.full((1, raw.shape[1]), np.nan)])
        n_states = len(state_keys) + 1
        catch_all = n_states - 1

        def lookup(ids):
            pos = np.minimum(np.searchsorted(state_keys, ids), len(state_keys) - 1)
            return np.where(state_keys[pos] == ids, pos, catch_all)

        s_idx, n_idx = lookup(ids_s), lookup(ids_n)
        init_idx = lookup(discretizer.ids(dataset.initial_states))

    rows = s_idx * n_actions + actions
    size = n_states * n_actions
    counts = np.bincount(rows, minlength=size)
    reward_sum = np.bincount(rows, weights=rewards, minlength=size)
    seen = counts > 0
    mean_reward = np.where(seen, reward_sum / np.maximum(counts, 1), reward_floor)
    unseen = np.flatnonzero(~seen)
    transition = sp.csr_array(
        (
            np.concatenate([1.0 / counts[rows], np.ones(len(unseen))]),
            (np.concatenate([rows, unseen]), np.concatenate([n_idx, unseen // n_actions])),
        ),
        shape=(size, n_states),
    )
    initial = np.bincount(init_idx, minlength=n_states) / n
    mdp = TabularMDP(
        transition=transition,
        mean_reward=mean_reward.reshape(n_states, n_actions),
        initial_dist=initial,
        gamma=gamma,
        horizon=steps if horizon is None else horizon,
        env_id=f"{dataset.meta.env_id}-model",
    )
    flags = (f"unseen_pairs={len(unseen)}",) if len(unseen) else ()
    logger.info("fitted tabular model: %d abstract states, %d unseen pairs", n_states, len(unseen))
    return FittedModel(
        mdp=mdp, representatives=representatives, reward_floor=float(reward_floor),
        encoder=discretizer, state_keys=state_keys,
        counts=counts.reshape(n_states, n_actions), flags=flags,
    )


def _backward(model, horizon, combine):
    mdp = model.mdp
    q_table = np.zeros((horizon, mdp.n_states, mdp.n_actions))
    v_table = np.zeros((horizon + 1, mdp.n_states))
    for t in range(horizon, 0, -1):
        q = mdp.mean_reward + mdp.gamma * mdp.expected_next(v_table[t])
        q_table[t - 1] = q
        v_table[t - 1] = combine(q)
    return q_table, v_table


def q_from_model(model, pi1, horizon=None):
    """
    Finite-horizon Bellman recursion for ``pi1`` on a fitted model.

    ``pi1`` is evaluated on each abstract state's representative raw state.

    Returns:
        QFunction with ``pi1`` attached; Q is identically 0 at horizon 0
    """
    horizon = model.mdp.horizon if horizon is None else horizon
    check_scalar(horizon, "horizon", numbers.Integral, min_val=0)
    pi = pi1.probs_batch(model.representatives)
    q_table, v_table = _backward(model, horizon, lambda q: (pi * q).sum(axis=1))
    return model.qfunction(q_table, v_table, pi1)


def optimal_q(model, horizon=None, minimize=False):
    """Finite-horizon optimal (or, with ``minimize``, pessimal) action values on the model."""
    horizon = model.mdp.horizon if horizon is None else horizon
    pick = (lambda q: q.min(axis=1)) if minimize else (lambda q: q.max(axis=1))
    q_table, v_table = _backward(model, horizon, pick)
    return model.qfunction(q_table, v_table, None)


def optimal_policy(model, horizon=None, minimize=False):
    """
    Stationary greedy policy from the first-step optimal action values.

    Args:
        model: FittedModel
        horizon (int): backward-induction horizon, defaults to the model's
        minimize (bool): minimize the value instead of maximizing it

    Returns:
        GreedyPolicy (ties go to the lowest action index)
    """
    return GreedyPolicy(optimal_q(model, horizon, minimize), minimize=minimize, step=1)


def constant_baseline_q(r_floor, scale, gamma, horizon, n_actions):
    """
    Step-dependent constant Q-hat(t) = scale * r_floor * sum_{k<H-t+1} gamma^k.

    Args:
        r_floor (float): reward floor R_min
        scale (float): multiplier, 1 for Mountain Car and 1/2 for Sailing
        gamma (float): discount in [0, 1]; gamma = 1 uses the (H - t + 1) limit
        horizon (int): H
        n_actions (int): action count

    Returns:
        ConstantQ
    """
    check_scalar(gamma, "gamma", numbers.Real, min_val=0.0, max_val=1.0)
    constants = [scale * r_floor * discount_sum(gamma, horizon - t + 1)
                 for t in range(1, horizon + 1)]
    return ConstantQ(np.array(constants), n_actions)


def fit_factored_model(dataset, n_vars, reward_feature_subset, var_arity=None, gamma=1.0,
                       horizon=None, n_actions=None, state_features=None):
    """
    Fit per-variable marginal transitions by MLE and a linear reward model.

    The reward model is least squares with an intercept on a one-hot action encoding plus the
    chosen state features. A rank-deficient design falls back to the mean reward and is flagged.

    Args:
        dataset: Dataset with (n, H, n_vars) integer feature states, or (n, H) joint ids
        n_vars (int): number of state variables
        reward_feature_subset: variable indices used by the reward regression
        var_arity (int): values per variable, defaults to the largest value seen + 1
        gamma (float): model discount
        horizon (int): model horizon, defaults to the dataset's
        n_actions (int): action count
        state_features: (S, n_vars) decoding table, required when states are joint ids

    Returns:
        FittedModel over the joint state space, with ``factors`` holding the marginal tables;
        it is queried with the same kind of state the dataset holds
    """
    states = np.asarray(dataset.states, dtype=np.int64)
    nxt = np.asarray(dataset.next_states, dtype=np.int64)
    by_id = states.ndim == 2
    if by_id:
        if state_features is None:
            raise ValueError("joint-id states need the state_features decoding table")
        states, nxt = state_features[states], state_features[nxt]
    if states.ndim != 3 or states.shape[2] != n_vars:
        raise ValueError(f"factored fit needs (n, H, {n_vars}) integer states")
    n, steps = dataset.actions.shape
    n_actions = int(dataset.actions.max()) + 1 if n_actions is None else int(n_actions)
    flat = states.reshape(-1, n_vars)
    nxt = nxt.reshape(-1, n_vars)
    arity = int(max(flat.max(), nxt.max())) + 1 if var_arity is None else int(var_arity)
    actions = dataset.actions.ravel()
    rewards = dataset.rewards.ravel()

    marginals = np.zeros((n_vars, n_actions, arity, arity))
    for i in range(n_vars):
        np.add.at(marginals[i], (actions, flat[:, i], nxt[:, i]), 1.0)
    totals = marginals.sum(axis=3, keepdims=True)
    self_loop = np.broadcast_to(np.eye(arity), marginals.shape)
    marginals = np.where(totals > 0, marginals / np.maximum(totals, 1.0), self_loop)

    initial = np.zeros((n_vars, arity))
    for i in range(n_vars):
        initial[i] = np.bincount(states[:, 0, i], minlength=arity) / n

    subset = [int(v) for v in reward_feature_subset]
    one_hot = np.eye(n_actions)[actions][:, 1:]
    design = np.hstack([one_hot, flat[:, subset].astype(np.float64)])
    flags = []
    centered = np.hstack([np.ones((len(design), 1)), design])
    if np.linalg.matrix_rank(centered) < centered.shape[1]:
        logger.warning("singular reward regression; falling back to the mean reward")
        flags.append("singular_regression")
        bias = np.full(n_actions, rewards.mean())
        weights = np.zeros(len(subset))
        predicted = np.full_like(rewards, rewards.mean())
    else:
        reg = LinearRegression(fit_intercept=True).fit(design, rewards)
        bias = reg.intercept_ + np.concatenate([[0.0], reg.coef_[:n_actions - 1]])
        weights = reg.coef_[n_actions - 1:]
        predicted = reg.predict(design)
    residual = float(np.sqrt(np.mean((rewards - predicted) ** 2)))

    factors = FactoredTables(
        marginals=marginals,
        initial_marginals=initial,
        bias=bias,
        weights=weights,
        reward_vars=tuple(subset),
        horizon=steps if horizon is None else horizon,
        gamma=gamma,
    )
    mdp = factors.to_mdp(env_id="factored-model")
    logger.info("fitted factored model: %d joint states, residual %.4g", mdp.n_states, residual)
    return FittedModel(
        mdp=mdp,
        representatives=np.arange(mdp.n_states) if by_id else factors.features(),
        reward_floor=float(rewards.min()),
        encoder=None if by_id else FeatureIndex((arity,) * n_vars),
        flags=tuple(flags), residual=residual, factors=factors,
    )


@dataclass(frozen=True, eq=False)
class KernelModel(FittedModel):
    """Kernel-based RL model.

    Support points are the unique logged (state, action) pairs with visit counts, mean rewards
    and the empirical distribution of their next states. Model states are the distinct logged
    next states plus a zero-value void state standing in for "no kernel mass".
    """

    support: np.ndarray = None
    support_actions: np.ndarray = None
    support_counts: np.ndarray = None
    support_rewards: np.ndarray = None
    successor_map: object = None
    bandwidth: float = 0.25
    periods: tuple = ()
    action_count: int = 0

    @property
    def n_actions(self):
        return self.action_count

    def index_batch(self, states):
        raise TypeError("kernel models are queried through kernel weights, not a state index")

    @cached_property
    def _members(self):
        return [np.flatnonzero(self.support_actions == a) for a in range(self.action_count)]

    @cached_property
    def _box(self):
        points = self.support
        lows, sizes = [], []
        for dim, period in enumerate(self.periods):
            if period:
                lows.append(0.0)
                sizes.append(float(period))
            else:
                lo, hi = points[:, dim].min(), points[:, dim].max()
                lows.append(lo - 2.0 * KERNEL_CROP)
                sizes.append(hi - lo + 4.0 * KERNEL_CROP)
        return np.array(lows), np.array(sizes)

    def _to_box(self, states):
        low, size = self._box
        return np.mod(states - low, size)

    @cached_property
    def _trees(self):
        _, size = self._box
        return [
            cKDTree(self._to_box(self.support[idx]), boxsize=size) if idx.size else None
            for idx in self._members
        ]

    def kernel_weights(self, states, action):
        """
        Normalized kernel weights of queries on the support points of one action.

        Returns:
            scipy.sparse.csr_array of shape (n_queries, n_support); rows with no support point
            within the crop are empty
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        m, n_support = len(states), len(self.support)
        tree = self._trees[action]
        if tree is None:
            return sp.csr_array((m, n_support))
        finite = np.isfinite(states).all(axis=1)
        queries = self._to_box(np.where(finite[:, None], states, self._box[0]))
        hits = tree.query_ball_point(queries, r=KERNEL_CROP, p=np.inf)
        lengths = np.array([len(h) for h in hits], dtype=np.intp)
        rows = np.repeat(np.arange(m), lengths)
        cols = self._members[action][np.fromiter(chain.from_iterable(hits), dtype=np.intp,
                                                 count=int(lengths.sum()))]
        diff = states[rows] - self.support[cols]
        for dim, period in enumerate(self.periods):
            if period:
                diff[:, dim] = np.mod(diff[:, dim] + period / 2.0, period) - period / 2.0
        keep = (np.abs(diff).max(axis=1) <= KERNEL_CROP) & finite[rows]
        rows, cols, diff = rows[keep], cols[keep], diff[keep]
        dist = np.sqrt((diff**2).sum(axis=1))
        nearest = np.full(m, np.inf)
        np.minimum.at(nearest, rows, dist)
        weights = self.support_counts[cols] * np.exp(-(dist - nearest[rows]) / self.bandwidth)
        totals = np.bincount(rows, weights=weights, minlength=m)
        weights = weights / totals[rows]
        return sp.csr_array((weights, (rows, cols)), shape=(m, n_support))

    def reward_batch(self, states, actions):
        states = _model_states(np.asarray(states))
        actions = np.asarray(actions, dtype=np.intp)
        out = np.zeros(len(states))
        for a in np.unique(actions):
            mask = actions == a
            out[mask] = self.kernel_weights(states[mask], a) @ self.support_rewards
        return out

    def qfunction(self, q_table, v_table, policy):
        return KernelQ(self, q_table, v_table, policy)


class KernelQ(ModelQ):
    """Q-hat at arbitrary states from the exact kernel expectation over support points."""

    def _q_batch(self, t, states):
        model = self.model
        states = _model_states(np.asarray(states))
        v_next = self.v_table[t]
        target = model.support_rewards + model.mdp.gamma * (model.successor_map @ v_next)
        out = np.zeros((len(states), self.n_actions))
        for a in range(self.n_actions):
            out[:, a] = model.kernel_weights(states, a) @ target
        return out


def _top_particles(matrix, particles, void):
    """Keep the ``particles`` heaviest successors per row and renormalize; empty rows go to void."""
    matrix = sp.csr_array(matrix)
    matrix.sort_indices()
    rows, cols, vals = [], [], []
    for r in range(matrix.shape[0]):
        start, end = matrix.indptr[r], matrix.indptr[r + 1]
        if end == start:
            rows.append(r)
            cols.append(void)
            vals.append(1.0)
            continue
        data = matrix.data[start:end]
        idx = matrix.indices[start:end]
        order = np.lexsort((idx, -data))[:particles]
        kept = data[order]
        rows.extend([r] * len(order))
        cols.extend(idx[order].tolist())
        vals.extend((kept / kept.sum()).tolist())
    return rows, cols, vals


def kernel_model(dataset, bandwidth, gamma=1.0, horizon=None, periods=None, n_actions=None,
                 particles=KERNEL_PARTICLES):
    """
    Kernel-based RL model with kernel exp(-d / bandwidth), cropped beyond unit deviation.

    Args:
        dataset: Dataset
        bandwidth (float): kernel bandwidth, positive
        gamma (float): discount
        horizon (int): model horizon, defaults to the dataset's
        periods: per-dimension period (0 for non-periodic dimensions)
        n_actions (int): action count, defaults to the largest action seen + 1
        particles (int): cached next-state particles per (model state, action)

    Returns:
        KernelModel
    """
    check_scalar(bandwidth, "bandwidth", numbers.Real, min_val=0.0, include_boundaries="neither")
    n, steps = dataset.actions.shape
    n_actions = int(dataset.actions.max()) + 1 if n_actions is None else int(n_actions)
    flat = _model_states(dataset.states.reshape((n * steps,) + dataset.states.shape[2:]))
    nxt = _model_states(dataset.next_states.reshape((n * steps,) + dataset.states.shape[2:]))
    flat, nxt = flat.astype(np.float64), nxt.astype(np.float64)
    periods = tuple(periods) if periods is not None else (0,) * flat.shape[1]
    if len(periods) != flat.shape[1]:
        raise ValueError("periods must give one entry per state dimension")
    actions = dataset.actions.ravel()

    pairs, point_of, counts = np.unique(
        np.column_stack([flat, actions]), axis=0, return_inverse=True, return_counts=True
    )
    point_of = point_of.reshape(-1)
    model_states, state_of = np.unique(nxt, axis=0, return_inverse=True)
    state_of = state_of.reshape(-1)
    n_points, n_model = len(pairs), len(model_states)
    void = n_model
    support_rewards = np.bincount(point_of, weights=dataset.rewards.ravel()) / counts
    successor_map = sp.csr_array(
        (1.0 / counts[point_of], (point_of, state_of)), shape=(n_points, n_model + 1)
    )
    base = KernelModel(
        mdp=None, representatives=np.vstack([model_states, np.full((1, flat.shape[1]), np.nan)]),
        reward_floor=float(dataset.rewards.min()),
        support=pairs[:, :-1], support_actions=pairs[:, -1].astype(np.int64),
        support_counts=counts.astype(np.float64), support_rewards=support_rewards,
        successor_map=successor_map, bandwidth=float(bandwidth), periods=periods,
        action_count=n_actions,
    )

    mean_reward = np.zeros((n_model + 1, n_actions))
    rows, cols, vals = [], [], []
    for a in range(n_actions):
        weights = base.kernel_weights(model_states, a)
        mean_reward[:n_model, a] = weights @ support_rewards
        r, c, v = _top_particles(weights @ successor_map, particles, void)
        rows.extend(np.asarray(r) * n_actions + a)
        cols.extend(c)
        vals.extend(v)
    for a in range(n_actions):
        rows.append(void * n_actions + a)
        cols.append(void)
        vals.append(1.0)
    terminal = np.zeros(n_model + 1, dtype=bool)
    terminal[void] = True
    initial = np.zeros(n_model + 1)
    initial[:n_model] = 1.0 / n_model
    mdp = TabularMDP(
        transition=sp.csr_array((vals, (rows, cols)), shape=((n_model + 1) * n_actions, n_model + 1)),
        mean_reward=mean_reward, initial_dist=initial, gamma=gamma,
        horizon=steps if horizon is None else horizon, terminal=terminal,
        env_id=f"{dataset.meta.env_id}-kernel",
    )
    logger.info("kernel model: %d support points, %d model states", n_points, n_model)
    return replace(base, mdp=mdp)


def kernel_q(dataset, bandwidth, pi1, horizon=None, gamma=1.0, periods=None, n_actions=None):
    """Q-hat for ``pi1`` by value iteration on the kernel-based model of ``dataset``."""
    model = kernel_model(dataset, bandwidth, gamma=gamma, horizon=horizon, periods=periods,
                         n_actions=n_actions)
    return q_from_model(model, pi1, horizon)
