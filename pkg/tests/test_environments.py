"""
Environment Tests
Tests Mountain Car and Sailing dynamics, synthetic MDP generators and structural checks.
"""
import math

import numpy as np
import pytest

from offpolicy.environments import (
    ENVIRONMENT_IDS,
    SAILING_MAX_COST,
    UNKNOWN_ID,
    Discretizer,
    discretize,
    is_tree,
    layers_of,
    make_environment,
    make_factored_sim,
    make_factored_tables,
    make_mountain_car,
    make_random_dag_mdp,
    make_random_policy,
    make_random_tree_mdp,
    make_reunion_dag,
    make_sailing,
    perturb_transitions,
    tree_state_count,
    unroll_to_tree,
    unrolled_policy,
)
from offpolicy.errors import NotLayeredError, SizeGuardError
from offpolicy.mdp_core import (
    TabularMDP,
    UniformPolicy,
    exact_value,
    monte_carlo_value,
    sample_dataset,
)
from offpolicy.theory import model_l1_epsilon


@pytest.mark.environments
class TestMountainCar:
    """Test suite for accelerated Mountain Car."""

    def test_coast_micro_step(self, test_data):
        """Verify coasting from (-0.5, 0) changes velocity by -0.0025 cos(-1.5)."""
        env = make_mountain_car()
        oracle = test_data["mountain_car"]
        nxt = env.micro_step(np.array([oracle["micro_step_start"]]), np.array([oracle["coast_action"]]))
        expected_vel = -0.0025 * math.cos(-1.5)

        assert nxt[0, 1] == pytest.approx(expected_vel, abs=1e-15), \
            f"Velocity should be {expected_vel}, got {nxt[0, 1]}"
        assert nxt[0, 0] == pytest.approx(-0.5 + expected_vel, abs=1e-15), "Position adds new velocity"

    def test_goal_is_absorbing(self):
        """Verify states at position >= 0.6 stay put and earn 0."""
        env = make_mountain_car()
        states = np.array([[0.6, 0.01], [0.7, -0.02]])
        nxt, rewards, terminal = env.step_batch(states, np.array([0, 2]), np.zeros((2, 0)))

        assert np.array_equal(nxt, states), "Terminal states must not move"
        assert np.all(rewards == 0.0), "Terminal states earn 0"
        assert np.all(terminal), "Terminal flag must stay set"

    def test_step_is_four_micro_steps(self, rng):
        """Verify one decision step equals four composed micro-steps on random states."""
        env = make_mountain_car()
        n = 500
        states = env.low + rng.random((n, 2)) * (env.high - env.low)
        states[:, 0] = np.minimum(states[:, 0], 0.59)
        actions = rng.integers(0, 3, size=n)
        composed = states
        for _ in range(4):
            composed = env.micro_step(composed, actions)
        nxt, rewards, _ = env.step_batch(states, actions, np.zeros((n, 0)))
        assert np.array_equal(nxt, composed), "step_batch must compose four micro-steps"
        assert np.all(rewards == -1.0), "Non-terminal states pay -1 per decision"

    def test_goal_reached_mid_step(self):
        """Verify reaching the goal on the first micro-step freezes the remaining three."""
        env = make_mountain_car()
        start = np.array([[0.59, 0.05]])
        push = np.array([2])
        first = env.micro_step(start, push)
        assert env.is_terminal(first)[0], "Fixture should reach the goal after one micro-step"

        nxt, reward, terminal = env.step_batch(start, push, np.zeros((1, 0)))
        assert np.array_equal(nxt, first), "Later micro-steps must leave the goal state alone"
        assert reward[0] == -1.0 and terminal[0], "The arriving step still pays -1 and terminates"

    def test_non_terminating_return(self, test_data):
        """Verify a never-terminating trajectory returns -(1 - 0.99^100) / 0.01."""
        env = make_mountain_car()
        data = sample_dataset(env, UniformPolicy(3), 200, seed=0)
        never = ~env.is_terminal(data.final_states)
        expected = -(1 - 0.99**100) / 0.01

        assert never.any(), "Uniform driving should rarely reach the goal within 100 steps"
        assert np.allclose(data.returns(test_data["mountain_car"]["gamma"])[never], expected), \
            f"Non-terminating returns should equal {expected}"

    def test_reset_within_bounds(self):
        """Verify initial states are drawn inside the state box."""
        env = make_mountain_car()
        states = env.reset_batch(np.random.default_rng(0).random((1000, 2)))
        assert np.all(states >= env.low) and np.all(states <= env.high), "Initial states left the box"

    def test_value_range(self):
        """Verify the return range is [-(1 - 0.99^100)/0.01, 0]."""
        lo, hi = make_mountain_car().value_range()
        assert lo == pytest.approx(-(1 - 0.99**100) / 0.01) and hi == 0.0, f"Unexpected range {lo, hi}"


@pytest.mark.environments
class TestSailing:
    """Test suite for grid Sailing."""

    def test_goal_is_absorbing(self):
        """Verify the top-right corner is absorbing with reward 0."""
        env = make_sailing()
        goal = np.array([[9, 9, 0, 3]])
        nxt, reward, terminal = env.step_batch(goal, np.array([4]), np.array([[0.5]]))

        assert np.array_equal(nxt[:, :2], goal[:, :2]), "Boat must stay at the goal"
        assert reward[0] == 0.0 and terminal[0], "Goal earns 0 and stays terminal"

    def test_into_the_wind_costs_maximum(self):
        """Verify a move straight into the wind stays in place at the maximum cost."""
        env = make_sailing()
        state = np.array([[4, 4, 2, 0]])  # wind from north
        nxt, reward, _ = env.step_batch(state, np.array([0]), np.array([[0.5]]))

        assert np.array_equal(nxt[0, :3], state[0, :3]), "Prohibited move must not move the boat"
        assert reward[0] == pytest.approx(-SAILING_MAX_COST), "Prohibited move costs the maximum"

    def test_off_grid_move_is_prohibited(self):
        """Verify leaving the grid is treated like a prohibited move."""
        env = make_sailing()
        state = np.array([[0, 0, 4, 2]])
        nxt, reward, _ = env.step_batch(state, np.array([6]), np.array([[0.5]]))
        assert nxt[0, 0] == 0 and reward[0] == pytest.approx(-SAILING_MAX_COST), \
            "Moving west off the grid should stay put at maximum cost"

    def test_beam_reach_cost(self):
        """Verify a straight move at 90 degrees to the wind costs 1 + 2 without tacking."""
        env = make_sailing()
        cost = env.move_cost(np.array([2]), np.array([2]), np.array([0]))
        assert cost[0] == pytest.approx(3.0), f"Beam reach should cost 3, got {cost[0]}"

    def test_diagonal_broad_reach_cost(self):
        """Verify a diagonal move at 135 degrees to the wind costs sqrt(2) * (1 + 1)."""
        env = make_sailing()
        cost = env.move_cost(np.array([3]), np.array([3]), np.array([0]))
        assert cost[0] == pytest.approx(2.0 * math.sqrt(2.0)), f"Unexpected cost {cost[0]}"

    def test_tack_penalty(self):
        """Verify switching the wind side adds the tack penalty."""
        env = make_sailing()
        straight = env.move_cost(np.array([6]), np.array([6]), np.array([0]))
        tacked = env.move_cost(np.array([2]), np.array([6]), np.array([0]))
        assert tacked[0] - straight[0] == pytest.approx(3.0), "Tack penalty should be 3"

    def test_wind_transition_frequencies(self):
        """
        Verify the wind rotation frequencies match the configured table within 3 sigma.

        Counts wind changes over 10^5 independent steps from a fixed interior state.
        """
        env = make_sailing(wind_change=(0.2, 0.6, 0.2))
        n = 100_000
        states = np.tile([[4, 4, 2, 0]], (n, 1))
        u = np.random.default_rng(7).random((n, 1))
        nxt, _, _ = env.step_batch(states, np.full(n, 2), u)
        shift = (nxt[:, 3] - states[:, 3] + 1) % 8
        for k, p in enumerate(env.wind_change):
            freq = np.mean(shift == k)
            sigma = math.sqrt(p * (1 - p) / n)
            assert abs(freq - p) <= 3 * sigma, f"Wind shift {k - 1}: frequency {freq} vs {p}"

    def test_invalid_wind_table(self):
        """Verify a wind table that is not a distribution is rejected."""
        with pytest.raises(ValueError):
            make_sailing(wind_change=(0.5, 0.6, 0.2))


@pytest.mark.environments
class TestGenerators:
    """Test suite for tree, DAG and factored generators."""

    def test_tree_state_count(self, test_data):
        """Verify the history count sum_t branch * (actions * branch)^(t-1)."""
        oracle = test_data["tree"]
        mdp = make_random_tree_mdp(oracle["branch"], oracle["actions"], oracle["horizon"], seed=0)
        assert tree_state_count(oracle["branch"], oracle["actions"], oracle["horizon"]) == oracle["history_count"]
        assert mdp.n_states == oracle["history_count"] + 1, "Histories plus one sink"
        assert is_tree(mdp), "Generated tree must pass the tree check"

    def test_tree_size_guard(self):
        """Verify oversized trees are refused."""
        with pytest.raises(SizeGuardError):
            make_random_tree_mdp(10, 10, 6, seed=0)

    def test_tree_reproducible(self):
        """Verify the same seed yields the same tree."""
        a = make_random_tree_mdp(2, 2, 3, seed=4)
        b = make_random_tree_mdp(2, 2, 3, seed=4)
        assert np.allclose(a.transition_dense, b.transition_dense), "Transitions should match"
        assert np.allclose(a.reward_values, b.reward_values), "Rewards should match"

    def test_dag_is_layered_not_tree(self):
        """Verify a random DAG has layers but shared states."""
        dag = make_random_dag_mdp((2, 3, 2), actions=2, seed=1)
        layers = layers_of(dag)
        assert list(layers[:7]) == [1, 1, 2, 2, 2, 3, 3], f"Unexpected layers {layers}"
        assert not is_tree(dag), "Shared layer states cannot form a tree"

    def test_reunion_is_not_tree(self):
        """Verify both actions at s0 reach s1 in the reunion fixture."""
        dag = make_reunion_dag()
        assert not is_tree(dag), "Reunion DAG has two histories into s1"
        assert list(layers_of(dag)) == [1, 2, 0], "s0 at step 1, s1 at step 2, sink unlabeled"

    def test_layering_violation(self):
        """Verify a state reachable at two steps is reported."""
        transition = np.zeros((2, 1, 2))
        transition[0, 0, 1] = 1.0
        transition[1, 0, 1] = 1.0
        mdp = TabularMDP(transition, np.zeros((2, 1)), np.array([1.0, 0.0]), 1.0, 3)
        with pytest.raises(NotLayeredError):
            layers_of(mdp)

    def test_unrolled_tree_preserves_value(self):
        """Verify unrolling a DAG into histories keeps every policy value."""
        dag = make_random_dag_mdp((2, 2, 2), actions=2, seed=3)
        tree = unroll_to_tree(dag)
        policy = make_random_policy(dag.n_states, 2, seed=5)

        assert is_tree(tree), "Unrolled MDP must be a tree"
        assert exact_value(tree, unrolled_policy(policy, tree)) == pytest.approx(
            exact_value(dag, policy), abs=1e-12), "Unrolling must not change values"

    def test_factored_single_variable_is_tabular(self):
        """Verify n_vars = 1 reduces to a plain tabular MDP over the variable's values."""
        tables = make_factored_tables(n_vars=1, var_arity=4, actions=3, seed=2, horizon=5,
                                      reward_vars=(0,))
        mdp = tables.to_mdp()
        assert mdp.n_states == 4, f"Expected 4 states, got {mdp.n_states}"
        assert np.allclose(mdp.transition_dense, tables.marginals[0].transpose(1, 0, 2)), \
            "Joint transitions should equal the single marginal"

    def test_factored_rows_are_products(self):
        """Verify a joint transition row equals the product of its marginals."""
        tables = make_factored_tables(n_vars=2, var_arity=3, actions=2, seed=3, horizon=4,
                                      reward_vars=(0,))
        mdp = tables.to_mdp()
        s, a, s2 = 5, 1, 7  # s=(1, 2), s'=(2, 1)
        expected = tables.marginals[0, a, 1, 2] * tables.marginals[1, a, 2, 1]
        assert mdp.transition_dense[s, a, s2] == pytest.approx(expected), "Row is not a product"

    def test_factored_size_guard(self):
        """Verify joint spaces above the limit are refused."""
        with pytest.raises(SizeGuardError):
            make_factored_sim(n_vars=10, var_arity=4)

    def test_perturbation_moves_exact_epsilon(self):
        """Verify perturbed transitions sit exactly epsilon away in L1."""
        mdp = make_factored_sim(n_vars=2, var_arity=3, actions=2, seed=0, horizon=3,
                                reward_vars=(0,))
        for eps in (0.05, 0.2):
            moved = perturb_transitions(mdp, eps, seed=1)
            assert model_l1_epsilon(moved, mdp) == pytest.approx(eps, abs=1e-12), \
                f"Perturbation should move exactly {eps}"

    def test_perturbation_keeps_tree_structure(self):
        """Verify perturbing a tree moves mass only between existing children."""
        mdp = make_random_tree_mdp(2, 2, 3, seed=8)
        moved = perturb_transitions(mdp, 0.1, seed=2)
        assert is_tree(moved), "Perturbed tree must still be a tree"
        assert np.array_equal(layers_of(moved), layers_of(mdp)), "Layers must not change"
        assert model_l1_epsilon(moved, mdp) == pytest.approx(0.1, abs=1e-12)

    def test_perturbation_keeps_dag_layers(self):
        """Verify perturbing a layered DAG keeps every state on its layer."""
        dag = make_random_dag_mdp((2, 3, 2), actions=2, seed=1)
        moved = perturb_transitions(dag, 0.05, seed=3)
        assert np.array_equal(layers_of(moved), layers_of(dag)), "Layers must not change"
        assert np.array_equal(moved.transition_dense > 0, dag.transition_dense > 0), \
            "Support of every row must be preserved"

    def test_registry(self):
        """Verify every registered id builds an environment and unknown ids fail."""
        for env_id in ("mountain_car", "sailing", "tree", "dag", "t2"):
            assert make_environment(env_id).n_actions >= 2, f"{env_id} should build"
        with pytest.raises(ValueError):
            make_environment("cartpole")


@pytest.mark.environments
class TestDiscretizer:
    """Test suite for state aggregation."""

    def test_start_state_keys(self, test_data):
        """Verify (-0.5, 0) with scales (64, 256) maps to (-32, 0)."""
        oracle = test_data["mountain_car"]
        keys = Discretizer(tuple(oracle["discretizer_scales"])).keys(oracle["micro_step_start"])
        assert list(keys[0]) == oracle["discretized_start"], f"Unexpected keys {keys}"

    def test_equal_keys_give_equal_ids(self):
        """Verify states in one cell share an id."""
        assert discretize([0.1, 0.01], (64, 256)) == discretize([0.1001, 0.0101], (64, 256)), \
            "Nearby states in one cell must share an id"

    def test_rounding_boundary(self):
        """Verify states straddling 0.5/64 land in different cells."""
        edge = 0.5 / 64
        assert discretize([edge - 1e-6, 0.0], (64, 256)) != discretize([edge + 1e-6, 0.0], (64, 256)), \
            "States across a rounding boundary must get different ids"

    def test_decode_returns_cell_center(self):
        """Verify decoding an id recovers the cell's representative state."""
        disc = Discretizer((64, 256))
        ids = disc.ids(np.array([[-0.5, 0.0], [0.31, -0.02]]))
        assert np.allclose(disc.decode(ids), disc.keys([[-0.5, 0.0], [0.31, -0.02]]) / [64, 256])

    def test_non_finite_state(self):
        """Verify NaN states map to the unknown id."""
        assert Discretizer((64, 256)).ids(np.array([[np.nan, 0.0]]))[0] == UNKNOWN_ID


@pytest.mark.environments
class TestSampledBounds:
    """Test suite for reward, state and value checks on sampled data."""

    @staticmethod
    def _state_bounds(env):
        if isinstance(env, TabularMDP):
            return np.zeros(1), np.full(1, env.n_states - 1)
        if env.env_id == "mountain_car":
            return env.low, env.high
        return np.zeros(4), np.array([env.grid - 1, env.grid - 1, 7, 7])

    @pytest.mark.parametrize("env_id", ENVIRONMENT_IDS)
    def test_rewards_and_states_in_range(self, env_id):
        """Verify 10^5 uniformly-behaved steps stay inside the declared reward and state ranges."""
        env = make_environment(env_id)
        n = math.ceil(100_000 / env.horizon)
        data = sample_dataset(env, UniformPolicy(env.n_actions), n, seed=17)
        r_min, r_max = env.reward_range()
        assert data.rewards.min() >= r_min - 1e-12, f"{env_id}: reward below {r_min}"
        assert data.rewards.max() <= r_max + 1e-12, f"{env_id}: reward above {r_max}"

        low, high = self._state_bounds(env)
        for states in (data.states, data.final_states):
            flat = np.asarray(states, dtype=np.float64).reshape(-1, len(low))
            assert np.all(flat >= low) and np.all(flat <= high), f"{env_id}: state out of range"

    def test_factored_exact_matches_monte_carlo(self):
        """Verify the factored simulator's exact value lies within 3 sigma of 10^5 rollouts."""
        env = make_factored_sim(n_vars=3, var_arity=4, actions=4, seed=9, horizon=10)
        policy = make_random_policy(env.n_states, env.n_actions, seed=10)
        mean, stderr = monte_carlo_value(env, policy, 100_000, seed=11)
        truth = exact_value(env, policy)
        assert abs(mean - truth) <= 3.0 * stderr, f"MC {mean} +/- {stderr} vs exact {truth}"
