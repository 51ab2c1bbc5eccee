"""
Concrete environments and synthetic MDP generators.

Continuous environments implement the same batch interface as TabularMDP (see
``offpolicy.mdp_core.Environment``). Generators build sparse TabularMDPs so that
tree fixtures with many histories stay cheap.
"""
import logging
import math
import numbers
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.utils import check_scalar

from offpolicy.errors import NotLayeredError, SizeGuardError
from offpolicy.mdp_core import Environment, TabularMDP, TabularPolicy
from utils.rng_factory import RngFactory

logger = logging.getLogger(__name__)

TREE_SIZE_LIMIT = 10**6
FACTORED_SIZE_LIMIT = 10**5
MOUNTAIN_CAR_SCALES = (2**6, 2**8)
SAILING_MAX_COST = 3.0 + 4.0 * math.sqrt(2.0)
UNKNOWN_ID = np.iinfo(np.int64).min


@dataclass(frozen=True, eq=False)
class MountainCar(Environment):
    """Mountain Car with accelerated dynamics: one step = ``n_micro`` standard steps.

    State is (position, velocity) in [-1.2, 0.6] x [-0.07, 0.07]; actions 0/1/2 push left,
    coast and push right. Reaching position 0.6 is absorbing with reward 0 afterwards.
    """

    horizon: int = 100
    gamma: float = 0.99
    n_micro: int = 4
    env_id: str = "mountain_car"

    n_reset_uniforms = 2
    n_step_uniforms = 0
    low = np.array([-1.2, -0.07])
    high = np.array([0.6, 0.07])

    @property
    def n_actions(self):
        return 3

    @property
    def state_dim(self):
        return 2

    def reward_range(self):
        return -1.0, 0.0

    def is_terminal(self, states):
        return np.asarray(states)[..., 0] >= self.high[0]

    def micro_step(self, states, actions):
        """One step of the standard dynamics, identity on terminal states."""
        states = np.asarray(states, dtype=np.float64)
        pos, vel = states[..., 0], states[..., 1]
        vel = np.clip(vel + 0.001 * (np.asarray(actions) - 1) - 0.0025 * np.cos(3.0 * pos),
                      self.low[1], self.high[1])
        pos = np.clip(pos + vel, self.low[0], self.high[0])
        vel = np.where((pos <= self.low[0]) & (vel < 0), 0.0, vel)
        moved = np.stack([pos, vel], axis=-1)
        return np.where(self.is_terminal(states)[..., None], states, moved)

    def reset_batch(self, u):
        return self.low + u[:, :2] * (self.high - self.low)

    def step_batch(self, states, actions, u):
        states = np.asarray(states, dtype=np.float64)
        done = self.is_terminal(states)
        nxt = states
        for _ in range(self.n_micro):
            nxt = self.micro_step(nxt, actions)
        rewards = np.where(done, 0.0, -1.0)
        return nxt, rewards, self.is_terminal(nxt)


# N, NE, E, SE, S, SW, W, NW
_DIRECTIONS = np.array([(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)])
_POINT_OF_SAIL_PENALTY = np.array([np.inf, 3.0, 2.0, 1.0, 2.0])
_TACK_PENALTY = 3.0


def _wind_side(direction, wind):
    delta = (direction - wind) % 8
    return np.where((delta >= 1) & (delta <= 3), 1, np.where(delta >= 5, -1, 0))


@dataclass(frozen=True, eq=False)
class Sailing(Environment):
    """Grid sailing toward the top-right corner.

    State is (x, y, boat direction, wind direction), directions in 45 degree units with
    0 = north; the wind direction is where the wind blows from. Moving straight into the
    wind or off the grid is prohibited: the boat stays put and pays the maximum cost.
    """

    grid: int = 10
    horizon: int = 50
    gamma: float = 0.99
    wind_init: tuple = (0.125,) * 8
    wind_change: tuple = (0.2, 0.6, 0.2)
    env_id: str = "sailing"

    n_reset_uniforms = 4
    n_step_uniforms = 1

    def __post_init__(self):
        check_scalar(self.grid, "grid", numbers.Integral, min_val=2)
        for name, probs in (("wind_init", self.wind_init), ("wind_change", self.wind_change)):
            arr = np.asarray(probs, dtype=np.float64)
            if arr.min() < 0 or abs(arr.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a probability vector")
        if len(self.wind_init) != 8 or len(self.wind_change) != 3:
            raise ValueError("wind_init needs 8 entries and wind_change 3 (ccw, stay, cw)")

    @property
    def n_actions(self):
        return 8

    @property
    def state_dim(self):
        return 4

    @property
    def goal(self):
        return self.grid - 1, self.grid - 1

    def reward_range(self):
        return -SAILING_MAX_COST, 0.0

    def is_terminal(self, states):
        states = np.asarray(states)
        return (states[..., 0] == self.grid - 1) & (states[..., 1] == self.grid - 1)

    def reset_batch(self, u):
        n = u.shape[0]
        cells = np.minimum((u[:, 0] * (self.grid**2 - 1)).astype(np.int64), self.grid**2 - 2)
        boat = np.minimum((u[:, 1] * 8).astype(np.int64), 7)
        wind_cdf = np.cumsum(self.wind_init)
        wind = np.minimum(np.searchsorted(wind_cdf, u[:, 2], side="right"), 7)
        out = np.empty((n, 4), dtype=np.int64)
        out[:, 0] = cells % self.grid
        out[:, 1] = cells // self.grid
        out[:, 2] = boat
        out[:, 3] = wind
        return out

    def move_cost(self, boat, direction, wind):
        """Cost of a legal move; inf for moves into the wind."""
        angle = np.minimum((direction - wind) % 8, (wind - direction) % 8)
        diagonal = np.where(direction % 2 == 1, math.sqrt(2.0), 1.0)
        leg = diagonal * (1.0 + _POINT_OF_SAIL_PENALTY[angle])
        tack = np.where(_wind_side(boat, wind) * _wind_side(direction, wind) < 0, _TACK_PENALTY, 0.0)
        return leg + tack

    def step_batch(self, states, actions, u):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        x, y, boat, wind = states.T
        done = self.is_terminal(states)
        nx = x + _DIRECTIONS[actions, 0]
        ny = y + _DIRECTIONS[actions, 1]
        with np.errstate(invalid="ignore"):
            cost = self.move_cost(boat, actions, wind)
        legal = (nx >= 0) & (nx < self.grid) & (ny >= 0) & (ny < self.grid) & np.isfinite(cost)
        cost = np.where(legal, cost, SAILING_MAX_COST)
        shift = np.searchsorted(np.cumsum(self.wind_change), u[:, 0], side="right")
        new_wind = (wind + np.minimum(shift, 2) - 1) % 8
        nxt = np.stack([
            np.where(legal, nx, x),
            np.where(legal, ny, y),
            np.where(legal, actions, boat),
            new_wind,
        ], axis=1)
        nxt = np.where(done[:, None], states, nxt)
        rewards = np.where(done, 0.0, -cost)
        return nxt, rewards, self.is_terminal(nxt)


def make_mountain_car(horizon=100, gamma=0.99):
    """Mountain Car with 4 micro-steps per step, H=100 and gamma=0.99 by default."""
    return MountainCar(horizon=horizon, gamma=gamma)


def make_sailing(grid=10, horizon=50, gamma=0.99, wind_init=None, wind_change=(0.2, 0.6, 0.2)):
    """
    Sailing on a grid x grid map with 8 move actions.

    Args:
        grid (int): side length, at least 2
        horizon (int): steps per trajectory
        gamma (float): discount
        wind_init: 8 probabilities for the initial wind direction (uniform by default)
        wind_change: probabilities of rotating -45, 0, +45 degrees per step

    Returns:
        Sailing
    """
    wind_init = (0.125,) * 8 if wind_init is None else tuple(wind_init)
    return Sailing(grid=grid, horizon=horizon, gamma=gamma, wind_init=wind_init,
                   wind_change=tuple(wind_change))


class _SparseBuilder:
    """Accumulates transition rows and rewards for a layered MDP under construction."""

    def __init__(self, n_actions):
        self.n_actions = n_actions
        self.rows, self.cols, self.vals = [], [], []
        self.rewards = {}
        self.noise = {}

    def add_row(self, state, action, next_states, probs):
        row = state * self.n_actions + action
        self.rows.extend([row] * len(next_states))
        self.cols.extend(int(s) for s in next_states)
        self.vals.extend(float(p) for p in probs)

    def set_reward(self, state, action, values, probs):
        self.noise[(state, action)] = (np.asarray(values, float), np.asarray(probs, float))

    def build(self, n_states, initial_dist, horizon, gamma, terminal, env_id, features=None):
        matrix = sp.csr_array(
            (self.vals, (self.rows, self.cols)), shape=(n_states * self.n_actions, n_states)
        )
        k = max((len(v) for v, _ in self.noise.values()), default=1)
        values = np.zeros((n_states, self.n_actions, k))
        probs = np.zeros((n_states, self.n_actions, k))
        probs[:, :, 0] = 1.0
        for (s, a), (v, p) in self.noise.items():
            values[s, a, :] = 0.0
            probs[s, a, :] = 0.0
            values[s, a, :len(v)] = v
            probs[s, a, :len(p)] = p
        mean = (values * probs).sum(axis=2)
        return TabularMDP(
            transition=matrix, mean_reward=mean, initial_dist=initial_dist, gamma=gamma,
            horizon=horizon, terminal=terminal, reward_values=values, reward_probs=probs,
            state_features=features, env_id=env_id,
        )


def tree_state_count(branch, actions, horizon):
    """Number of history states of a tree MDP, sum_t branch * (actions * branch)^(t-1)."""
    return sum(branch * (actions * branch) ** (t - 1) for t in range(1, horizon + 1))


def _normalized(weights):
    return weights / weights.sum()


def make_random_tree_mdp(branch, actions, horizon, seed, reward_outcomes=None, concentration=1.0):
    """
    Random discrete tree MDP: states are histories, rewards only at the end.

    Layer-H states carry a discrete terminal reward distribution (the final observation)
    over ``reward_outcomes`` values; every layer-H action leads to an absorbing sink, the
    last state index.

    Args:
        branch (int): observations per step
        actions (int): actions per state
        horizon (int): H
        seed: generator seed
        reward_outcomes (int): terminal reward outcomes per (s, a), defaults to ``branch``
        concentration (float): Dirichlet concentration of transition rows

    Returns:
        TabularMDP with gamma = 1 and a (S, 1) layer feature per state
    """
    for name, value in (("branch", branch), ("actions", actions), ("horizon", horizon)):
        check_scalar(value, name, numbers.Integral, min_val=1)
    n_hist = tree_state_count(branch, actions, horizon)
    if n_hist > TREE_SIZE_LIMIT:
        raise SizeGuardError(f"tree with {n_hist} histories exceeds {TREE_SIZE_LIMIT}")
    rng = RngFactory.generator(seed)
    outcomes = branch if reward_outcomes is None else reward_outcomes
    builder = _SparseBuilder(actions)
    sink = n_hist
    layer = list(range(branch))
    layers = np.zeros(n_hist + 1, dtype=np.int64)
    layers[sink] = horizon + 1
    initial = np.zeros(n_hist + 1)
    initial[:branch] = rng.dirichlet(np.full(branch, concentration))
    next_id = branch
    for t in range(1, horizon + 1):
        layers[layer] = t
        children = []
        for s in layer:
            for a in range(actions):
                if t < horizon:
                    kids = list(range(next_id, next_id + branch))
                    next_id += branch
                    builder.add_row(s, a, kids, rng.dirichlet(np.full(branch, concentration)))
                    children.extend(kids)
                else:
                    builder.add_row(s, a, [sink], [1.0])
                    builder.set_reward(s, a, rng.random(outcomes),
                                       rng.dirichlet(np.ones(outcomes)))
        layer = children
    for a in range(actions):
        builder.add_row(sink, a, [sink], [1.0])
    terminal = np.zeros(n_hist + 1, dtype=bool)
    terminal[sink] = True
    return builder.build(n_hist + 1, initial, horizon, 1.0, terminal, "tree", layers[:, None])


def make_t2(reward_noise=0.0):
    """
    The two-step fixture: s0 --a--> s1, s0 --b--> s2, reward 1 for action a at step 2.

    Args:
        reward_noise (float): if positive, the (s1, a) reward is 1 +/- reward_noise with
            probability 1/2 each

    Returns:
        TabularMDP with states s0=0, s1=1, s2=2 and absorbing sink 3
    """
    builder = _SparseBuilder(2)
    builder.add_row(0, 0, [1], [1.0])
    builder.add_row(0, 1, [2], [1.0])
    for s in (1, 2):
        for a in (0, 1):
            builder.add_row(s, a, [3], [1.0])
        builder.set_reward(s, 1, [0.0], [1.0])
    builder.set_reward(2, 0, [1.0], [1.0])
    if reward_noise > 0:
        builder.set_reward(1, 0, [1.0 - reward_noise, 1.0 + reward_noise], [0.5, 0.5])
    else:
        builder.set_reward(1, 0, [1.0], [1.0])
    for a in (0, 1):
        builder.add_row(3, a, [3], [1.0])
    terminal = np.array([False, False, False, True])
    layers = np.array([[1], [2], [2], [3]])
    return builder.build(4, np.array([1.0, 0.0, 0.0, 0.0]), 2, 1.0, terminal, "t2", layers)


def make_random_dag_mdp(layer_sizes: Sequence[int], actions, seed, reward_outcomes=2,
                        concentration=1.0):
    """
    Random layered DAG MDP: states are shared within a layer, so histories can reunite.

    Args:
        layer_sizes: number of states in each of the H layers
        actions (int): actions per state
        seed: generator seed
        reward_outcomes (int): terminal reward outcomes per (s, a) on the last layer
        concentration (float): Dirichlet concentration

    Returns:
        TabularMDP with gamma = 1, horizon len(layer_sizes) and an absorbing sink
    """
    layer_sizes = [int(n) for n in layer_sizes]
    if not layer_sizes or min(layer_sizes) < 1:
        raise ValueError("layer_sizes must be a non-empty list of positive counts")
    check_scalar(actions, "actions", numbers.Integral, min_val=1)
    total = sum(layer_sizes)
    if total > TREE_SIZE_LIMIT:
        raise SizeGuardError(f"DAG with {total} states exceeds {TREE_SIZE_LIMIT}")
    rng = RngFactory.generator(seed)
    offsets = np.concatenate(([0], np.cumsum(layer_sizes)))
    sink = total
    builder = _SparseBuilder(actions)
    horizon = len(layer_sizes)
    layers = np.full(total + 1, horizon + 1)
    initial = np.zeros(total + 1)
    initial[:layer_sizes[0]] = rng.dirichlet(np.full(layer_sizes[0], concentration))
    for t, size in enumerate(layer_sizes):
        states = range(offsets[t], offsets[t + 1])
        layers[offsets[t]:offsets[t + 1]] = t + 1
        for s in states:
            for a in range(actions):
                if t + 1 < horizon:
                    nxt = np.arange(offsets[t + 1], offsets[t + 2])
                    builder.add_row(s, a, nxt, rng.dirichlet(np.full(len(nxt), concentration)))
                else:
                    builder.add_row(s, a, [sink], [1.0])
                    builder.set_reward(s, a, rng.random(reward_outcomes),
                                       rng.dirichlet(np.ones(reward_outcomes)))
    for a in range(actions):
        builder.add_row(sink, a, [sink], [1.0])
    terminal = np.zeros(total + 1, dtype=bool)
    terminal[sink] = True
    return builder.build(total + 1, initial, horizon, 1.0, terminal, "dag", layers[:, None])


def make_reunion_dag(reward_noise=0.5):
    """
    Two-layer DAG in which both actions at s0 lead to s1, so four histories share s1.

    The (s1, a) reward is 1 +/- reward_noise; (s1, b) pays 0.

    Returns:
        TabularMDP with states s0=0, s1=1 and sink 2
    """
    builder = _SparseBuilder(2)
    builder.add_row(0, 0, [1], [1.0])
    builder.add_row(0, 1, [1], [1.0])
    builder.set_reward(0, 0, [0.0], [1.0])
    builder.set_reward(0, 1, [0.0], [1.0])
    builder.add_row(1, 0, [2], [1.0])
    builder.add_row(1, 1, [2], [1.0])
    builder.set_reward(1, 0, [1.0 - reward_noise, 1.0 + reward_noise], [0.5, 0.5])
    builder.set_reward(1, 1, [0.0], [1.0])
    for a in (0, 1):
        builder.add_row(2, a, [2], [1.0])
    terminal = np.array([False, False, True])
    return builder.build(3, np.array([1.0, 0.0, 0.0]), 2, 1.0, terminal, "dag",
                         np.array([[1], [2], [3]]))


def layers_of(mdp, horizon=None):
    """
    Assign each non-absorbing state the unique step at which it can occur.

    Args:
        mdp: TabularMDP
        horizon (int): number of layers to explore, defaults to mdp.horizon

    Returns:
        np.ndarray: layer (1-based) per state, 0 for states never reached within the horizon

    Raises:
        NotLayeredError: a state is reachable at two different steps
    """
    horizon = mdp.horizon if horizon is None else horizon
    matrix = mdp.transition_matrix
    layer = np.zeros(mdp.n_states, dtype=np.int64)
    current = np.flatnonzero((mdp.initial_dist > 0) & ~mdp.terminal)
    for t in range(1, horizon + 1):
        clash = current[(layer[current] != 0) & (layer[current] != t)]
        if clash.size:
            raise NotLayeredError(
                f"state {clash[0]} occurs at step {layer[clash[0]]} and step {t}"
            )
        layer[current] = t
        rows = (current[:, None] * mdp.n_actions + np.arange(mdp.n_actions)).ravel()
        successors = np.unique(matrix[rows].indices) if rows.size else np.array([], int)
        current = successors[~mdp.terminal[successors]]
    return layer


def is_tree(mdp, horizon=None):
    """True when every reachable state has exactly one (parent state, action) history."""
    try:
        layer = layers_of(mdp, horizon)
    except NotLayeredError:
        return False
    horizon = mdp.horizon if horizon is None else horizon
    reached = np.flatnonzero(layer > 0)
    parents = np.zeros(mdp.n_states, dtype=np.int64)
    matrix = mdp.transition_matrix.tocoo()
    source = matrix.row // mdp.n_actions
    from_reached = (layer[source] > 0) & (layer[source] < horizon)
    np.add.at(parents, matrix.col[from_reached], 1)
    initial = mdp.initial_dist[reached] > 0
    return bool(np.all(parents[reached][initial] == 0) and np.all(parents[reached][~initial] == 1))


def unroll_to_tree(mdp, horizon=None):
    """
    History-indexed tree MDP equivalent to ``mdp`` over ``horizon`` steps.

    Each tree state is a history ending in a state of ``mdp``; it copies that state's
    rewards and branches over its successors. Absorbing successors and everything after
    step H map to a single sink.

    Returns:
        TabularMDP whose ``state_features`` column 0 is the layer and column 1 the original state
    """
    horizon = mdp.horizon if horizon is None else horizon
    dense = mdp.transition_dense
    builder = _SparseBuilder(mdp.n_actions)
    nodes = [int(s) for s in np.flatnonzero(mdp.initial_dist > 0)]
    initial = [float(mdp.initial_dist[s]) for s in nodes]
    features = [(1, s) for s in nodes]
    frontier = list(range(len(nodes)))
    pending = []
    for t in range(1, horizon + 1):
        children = []
        for node in frontier:
            s = nodes[node]
            for a in range(mdp.n_actions):
                values, probs = mdp.reward_distribution(s, a)
                builder.set_reward(node, a, values, probs)
                succ = np.flatnonzero(dense[s, a] > 0)
                if t == horizon:
                    pending.append((node, a, [None], [1.0]))
                    continue
                kids, kid_probs, sink_mass = [], [], 0.0
                for s2 in succ:
                    if mdp.terminal[s2]:
                        sink_mass += dense[s, a, s2]
                        continue
                    nodes.append(int(s2))
                    features.append((t + 1, int(s2)))
                    kids.append(len(nodes) - 1)
                    kid_probs.append(dense[s, a, s2])
                if sink_mass > 0:
                    kids.append(None)
                    kid_probs.append(sink_mass)
                pending.append((node, a, kids, kid_probs))
                children.extend(k for k in kids if k is not None)
                if len(nodes) > TREE_SIZE_LIMIT:
                    raise SizeGuardError(f"unrolled tree exceeds {TREE_SIZE_LIMIT} histories")
        frontier = children
    sink = len(nodes)
    for node, a, kids, probs in pending:
        builder.add_row(node, a, [sink if k is None else k for k in kids], probs)
    for a in range(mdp.n_actions):
        builder.add_row(sink, a, [sink], [1.0])
        builder.set_reward(sink, a, [0.0], [1.0])
    features.append((horizon + 1, -1))
    mu = np.zeros(sink + 1)
    mu[:len(initial)] = initial
    terminal = np.zeros(sink + 1, dtype=bool)
    terminal[sink] = True
    return builder.build(sink + 1, mu, horizon, mdp.gamma, terminal, "tree",
                         np.array(features, dtype=np.int64))


def unrolled_policy(policy, tree):
    """Lift a tabular policy of a layered MDP onto ``unroll_to_tree(mdp)``; the sink is uniform."""
    original = tree.state_features[:, 1]
    table = np.full((tree.n_states, policy.n_actions), 1.0 / policy.n_actions)
    inside = original >= 0
    table[inside] = policy.probs_batch(original[inside])
    return TabularPolicy(table)


def make_random_policy(n_states, n_actions, seed, concentration=1.0):
    """Tabular policy with Dirichlet-distributed rows."""
    rng = RngFactory.generator(seed)
    return TabularPolicy(rng.dirichlet(np.full(n_actions, concentration), size=n_states))


def perturb_transitions(mdp, epsilon, seed):
    """
    Copy of ``mdp`` whose non-absorbing transition rows move L1 mass exactly ``epsilon``.

    Each row is mixed toward a randomly chosen point mass, so that
    max_{s,a} ||P'(.|s,a) - P(.|s,a)||_1 = epsilon.

    On layered MDPs (trees, DAGs) mass only moves between successors already in a row's
    support, so the perturbed MDP keeps its layers and parent structure; rows of the last
    layer, which lead to absorbing states, are left unchanged.
    """
    check_scalar(epsilon, "epsilon", numbers.Real, min_val=0.0, max_val=2.0)
    rng = RngFactory.generator(seed)
    dense = mdp.transition_dense.copy()
    try:
        layer = layers_of(mdp)
    except NotLayeredError:
        layer = None
    for s in np.flatnonzero(~mdp.terminal):
        if layer is not None and not 0 < layer[s] < mdp.horizon:
            continue
        for a in range(mdp.n_actions):
            row = dense[s, a]
            room = 2.0 * (1.0 - row)
            allowed = ~mdp.terminal
            if layer is not None:
                allowed = allowed & (row > 0) & (layer == layer[s] + 1)
            candidates = np.flatnonzero((room >= epsilon) & allowed)
            if candidates.size == 0:
                raise ValueError(f"row (s={s}, a={a}) cannot move {epsilon} of L1 mass")
            j = rng.choice(candidates)
            lam = epsilon / room[j] if room[j] > 0 else 0.0
            target = np.zeros_like(row)
            target[j] = 1.0
            dense[s, a] = (1.0 - lam) * row + lam * target
            dense[s, a] /= dense[s, a].sum()
    return replace(mdp, transition=dense)


@dataclass(frozen=True, eq=False)
class FactoredTables:
    """Per-variable pieces of a factored MDP.

    ``marginals[i, a, v, v']`` is P(x_i' = v' | x_i = v, a); the mean reward is
    ``bias[a] + sum_j weights[j] * x[reward_vars[j]]``. Joint state ids are the C-order
    (variable 0 most significant) ravel of the variable values.
    """

    marginals: np.ndarray
    initial_marginals: np.ndarray
    bias: np.ndarray
    weights: np.ndarray
    reward_vars: tuple
    horizon: int
    gamma: float

    @property
    def n_vars(self):
        return self.marginals.shape[0]

    @property
    def arity(self):
        return self.marginals.shape[2]

    @property
    def n_actions(self):
        return self.marginals.shape[1]

    def features(self):
        """(S, n_vars) matrix of variable values per joint state."""
        grids = np.indices((self.arity,) * self.n_vars).reshape(self.n_vars, -1)
        return grids.T.astype(np.int64)

    def to_mdp(self, env_id="factored"):
        n_states = self.arity**self.n_vars
        blocks = []
        for a in range(self.n_actions):
            joint = sp.csr_array(self.marginals[0, a])
            for i in range(1, self.n_vars):
                joint = sp.kron(joint, sp.csr_array(self.marginals[i, a]), format="csr")
            blocks.append(joint)
        stacked = sp.vstack(blocks, format="csr")
        order = (np.arange(n_states)[:, None] + n_states * np.arange(self.n_actions)).ravel()
        matrix = stacked[order]
        features = self.features()
        linear = features[:, list(self.reward_vars)] @ self.weights
        reward = linear[:, None] + self.bias[None, :]
        mu = self.initial_marginals[0]
        for i in range(1, self.n_vars):
            mu = np.kron(mu, self.initial_marginals[i])
        return TabularMDP(
            transition=matrix, mean_reward=reward, initial_dist=mu / mu.sum(),
            gamma=self.gamma, horizon=self.horizon, state_features=features, env_id=env_id,
        )


def make_factored_tables(n_vars=5, var_arity=4, actions=12, seed=0, horizon=22, gamma=1.0,
                         reward_vars=(0, 1, 2)):
    """
    Random factored dynamics: each variable moves by at most one level per step,
    independently of the others given the action.
    """
    check_scalar(n_vars, "n_vars", numbers.Integral, min_val=1)
    check_scalar(var_arity, "var_arity", numbers.Integral, min_val=2)
    check_scalar(actions, "actions", numbers.Integral, min_val=1)
    if var_arity**n_vars > FACTORED_SIZE_LIMIT:
        raise SizeGuardError(f"{var_arity}^{n_vars} joint states exceed {FACTORED_SIZE_LIMIT}")
    if any(not 0 <= v < n_vars for v in reward_vars):
        raise ValueError("reward_vars must index existing variables")
    rng = RngFactory.generator(seed)
    marginals = np.zeros((n_vars, actions, var_arity, var_arity))
    for i in range(n_vars):
        for a in range(actions):
            for v in range(var_arity):
                support = np.arange(max(v - 1, 0), min(v + 2, var_arity))
                marginals[i, a, v, support] = rng.dirichlet(np.ones(len(support)))
    initial = rng.dirichlet(np.ones(var_arity), size=n_vars)
    return FactoredTables(
        marginals=marginals,
        initial_marginals=initial,
        bias=rng.uniform(-0.5, 0.5, size=actions),
        weights=rng.uniform(0.0, 1.0, size=len(reward_vars)),
        reward_vars=tuple(reward_vars),
        horizon=horizon,
        gamma=gamma,
    )


def make_factored_sim(n_vars=5, var_arity=4, actions=12, seed=0, horizon=22, gamma=1.0,
                      reward_vars=(0, 1, 2)):
    """Joint TabularMDP of a random factored simulator (defaults: 5 variables, arity 4, 12 actions)."""
    return make_factored_tables(n_vars, var_arity, actions, seed, horizon, gamma,
                                reward_vars).to_mdp()


@dataclass(frozen=True)
class Discretizer:
    """State aggregation by per-dimension scaling and rounding (half up)."""

    scales: tuple

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or min(scales) <= 0:
            raise ValueError("discretizer scales must be positive")
        if 63 // len(scales) < 2:
            raise ValueError("too many dimensions to pack into a 64-bit id")
        object.__setattr__(self, "scales", scales)

    @property
    def bits(self):
        return 63 // len(self.scales)

    def keys(self, states):
        """Integer tuples, shape (n, d)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.floor(states * np.asarray(self.scales) + 0.5).astype(np.int64)

    def ids(self, states):
        """Injective int64 id per state; non-finite states map to UNKNOWN_ID."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        finite = np.isfinite(states).all(axis=1)
        keys = self.keys(np.where(finite[:, None], states, 0.0))
        zigzag = (keys << 1) ^ (keys >> 63)
        if zigzag.size and zigzag.max() >= (1 << self.bits):
            raise SizeGuardError("discretized coordinate too large to pack into an id")
        shifts = self.bits * np.arange(len(self.scales), dtype=np.int64)
        packed = (zigzag << shifts).sum(axis=1)
        return np.where(finite, packed, UNKNOWN_ID)

    def decode(self, ids):
        """Representative (cell center) state per id; UNKNOWN_ID decodes to NaNs."""
        ids = np.asarray(ids, dtype=np.int64)
        mask = (1 << self.bits) - 1
        shifts = self.bits * np.arange(len(self.scales), dtype=np.int64)
        zigzag = (ids[:, None] >> shifts) & mask
        keys = (zigzag >> 1) ^ -(zigzag & 1)
        states = keys / np.asarray(self.scales)
        return np.where((ids == UNKNOWN_ID)[:, None], np.nan, states)


def discretize(state, scales):
    """Abstract-state id of one continuous state."""
    return int(Discretizer(tuple(scales)).ids(np.asarray(state)[None])[0])


def make_environment(env_id, **params):
    """
    Build an environment by id.

    Args:
        env_id: one of mountain_car, sailing, tree, dag, factored, t2
        **params: generator parameters

    Returns:
        Environment
    """
    if env_id == "mountain_car":
        return make_mountain_car(**params)
    if env_id == "sailing":
        return make_sailing(**params)
    if env_id == "tree":
        defaults = {"branch": 2, "actions": 2, "horizon": 3, "seed": 0}
        return make_random_tree_mdp(**{**defaults, **params})
    if env_id == "dag":
        defaults = {"layer_sizes": (3, 3, 3), "actions": 2, "seed": 0}
        return make_random_dag_mdp(**{**defaults, **params})
    if env_id == "factored":
        return make_factored_sim(**params)
    if env_id == "t2":
        return make_t2(**params)
    raise ValueError(f"unknown environment id: {env_id}")


ENVIRONMENT_IDS = ("mountain_car", "sailing", "tree", "dag", "factored", "t2")
