import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cqlflow import envs, rollout
from cqlflow.mdp_env import (Dataset, EmptyDatasetError, TabularMDP, TabularPolicy,
                             build_empirical_mdp, dataset_mc_return, exact_policy_return,
                             generate_dataset, monte_carlo_return, optimal_q_values, random_mdp,
                             read_dataset, stationary_distribution, write_dataset)
from cqlflow.tabular_cql import random_behavior

HAS_CYTHON = rollout.BACKEND == "cython"


def test_mdp_validation():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(ValueError):
        TabularMDP(P * 1.1, np.zeros((2, 1)), 0.9, [0.5, 0.5])
    with pytest.raises(ValueError):
        TabularMDP(P, np.zeros((2, 1)), 1.0, [0.5, 0.5])
    with pytest.raises(ValueError):
        TabularMDP(P, np.full((2, 1), 2.0), 0.9, [0.5, 0.5])
    with pytest.raises(ValueError):
        TabularMDP(P, np.zeros((2, 1)), 0.9, [0.6, 0.5])
    with pytest.raises(ValueError):
        TabularPolicy([[0.5, 0.6]])


def test_exact_return_against_hand_solution():
    # one state, self-loop, reward 1: V = 1 / (1 - gamma)
    mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.8, [1.0])
    assert exact_policy_return(mdp, TabularPolicy([[1.0]])) == pytest.approx(5.0, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(2, 4))
@settings(max_examples=25, deadline=None)
def test_exact_return_invariant_under_relabelling(seed, S, A):
    mdp = random_mdp(seed, S, A)
    pol = random_behavior(seed + 1, S, A)
    perm = np.random.default_rng(seed).permutation(S)
    probs = np.empty_like(pol.probs)
    probs[perm] = pol.probs
    assert exact_policy_return(mdp.permuted(perm), TabularPolicy(probs)) == pytest.approx(
        exact_policy_return(mdp, pol), abs=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_monte_carlo_agrees_with_exact_return(seed):
    mdp = random_mdp(seed, 5, 3)
    pol = random_behavior(seed, 5, 3)
    est, se = monte_carlo_return(mdp, pol, 200_000, seed)
    assert abs(est - exact_policy_return(mdp, pol)) < 4 * se


def test_bandit_dataset_return_matches_exact():
    # single state with self-loop: stationary distribution = dataset distribution
    gamma = 0.9
    mdp = TabularMDP(np.ones((1, 3, 1)), np.array([[1.0, 0.0, 0.5]]), gamma, [1.0], horizon=1)
    pol = TabularPolicy([[0.2, 0.5, 0.3]])
    d = Dataset(np.zeros(10, int), [0, 0, 1, 1, 1, 1, 1, 2, 2, 2], [1, 1, 0, 0, 0, 0, 0, .5, .5, .5],
                np.zeros(10, int), np.ones(10, bool), np.arange(10), 1, 3)
    assert dataset_mc_return(d, gamma) == pytest.approx(exact_policy_return(mdp, pol), abs=1e-12)
    with pytest.raises(ValueError):
        dataset_mc_return(d, 1.0)


def test_generate_dataset_deterministic_and_valid(grid):
    beh = envs.make_behavior(grid)
    a = generate_dataset(grid, beh, 15, 3)
    b = generate_dataset(grid, beh, 15, 3)
    assert a.equals(b)
    assert not a.equals(generate_dataset(grid, beh, 15, 4))
    assert a.n_traj == 15
    bounds = a.trajectory_boundaries
    assert bounds[0] == 0 and bounds[-1] == len(a) and len(bounds) == 16
    lo, hi = grid.reward_bounds
    assert a.rewards.min() >= lo and a.rewards.max() <= hi
    with pytest.raises(EmptyDatasetError):
        generate_dataset(grid, beh, 0, 0)


@given(st.integers(0, 500), st.integers(1, 30))
@settings(max_examples=20, deadline=None)
def test_empirical_behavior_rows_sum_to_one(seed, n_traj):
    mdp = random_mdp(seed, 6, 3)
    d = generate_dataset(mdp, random_behavior(seed, 6, 3), n_traj, seed)
    emp = build_empirical_mdp(d)
    pib = emp.empirical_behavior
    vis = emp.state_visited
    np.testing.assert_allclose(pib[vis].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isnan(pib[~vis]))
    # unvisited pairs are flagged (NaN), never zero-filled
    assert np.all(np.isnan(emp.empirical_reward[~emp.visited_mask]))
    P = emp.empirical_transition[emp.visited_mask]
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_dataset_file_round_trip(tmp_path, small_data):
    path = write_dataset(small_data, tmp_path / "d.jsonl")
    assert read_dataset(path).equals(small_data)


def test_dataset_validation():
    with pytest.raises(EmptyDatasetError):
        Dataset([], [], [], [], [], [], 2, 2)
    with pytest.raises(ValueError):
        Dataset([0, 5], [0, 0], [0, 0], [0, 0], [0, 0], [0, 0], 2, 2)
    with pytest.raises(ValueError):
        Dataset([0, 0], [0, 0], [0, 0], [0, 0], [0, 0], [1, 0], 2, 2)


@pytest.mark.skipif(not HAS_CYTHON, reason="compiled extension not built")
@given(st.integers(0, 10_000), st.integers(2, 9), st.integers(2, 4), st.integers(1, 20))
@settings(max_examples=30, deadline=None)
def test_backends_agree(seed, S, A, n_traj):
    mdp = random_mdp(seed, S, A, horizon=7)
    pol = random_behavior(seed, S, A)
    a = generate_dataset(mdp, pol, n_traj, seed, backend="python")
    b = generate_dataset(mdp, pol, n_traj, seed, backend="cython")
    assert a.equals(b)
    ra = monte_carlo_return(mdp, pol, 2000, seed, backend="python")
    rb = monte_carlo_return(mdp, pol, 2000, seed, backend="cython")
    assert ra == pytest.approx(rb, abs=1e-12)


def test_backend_selection():
    assert rollout.get_backend("python") is not None
    with pytest.raises(ValueError):
        rollout.get_backend("fortran")


def test_stationary_distribution_is_fixed_point():
    mdp = random_mdp(4, 6, 3)
    pol = random_behavior(4, 6, 3)
    d = stationary_distribution(mdp, pol)
    P = np.einsum("sa,sat->st", pol.probs, mdp.transition)
    np.testing.assert_allclose(d @ P, d, atol=1e-12)


# -- gridworlds -------------------------------------------------------------------

@pytest.mark.parametrize("name", ["distractor-grid-0", "multigoal-grid-1", "drawer-grid-2"])
def test_gridworlds_are_valid_mdps(name):
    mdp = envs.make_mdp(name)
    assert mdp.mdp_id == name
    assert mdp.terminal.sum() == 1
    t = np.flatnonzero(mdp.terminal)[0]
    assert np.all(mdp.transition[t, :, t] == 1.0) and np.all(mdp.reward[t] == 0)
    beh = envs.make_behavior(mdp)
    opt = optimal_q_values(mdp)
    v_opt = float(mdp.initial_dist @ opt.max(axis=1))
    assert 0 < exact_policy_return(mdp, beh) < v_opt


def test_nuisance_does_not_affect_dynamics():
    mdp = envs.make_mdp("distractor-grid-0")
    K = mdp.info["n_nuisance"]
    for p in range(mdp.info["n_pos"]):
        block = mdp.transition[p * K:(p + 1) * K]
        assert np.allclose(block, block[0])
        assert np.allclose(mdp.reward[p * K:(p + 1) * K], mdp.reward[p * K])


def test_scripted_walker_reaches_goal():
    mdp = envs.make_mdp("distractor-grid-0")
    greedy = envs.scripted_behavior(mdp, 0.0)
    uniform = envs.make_behavior(mdp, "uniform")
    assert exact_policy_return(mdp, greedy) > exact_policy_return(mdp, envs.make_behavior(mdp)) \
        > exact_policy_return(mdp, uniform)


def test_make_mdp_and_behavior_errors():
    with pytest.raises(KeyError):
        envs.make_mdp("nowhere-0")
    assert envs.make_mdp("random-3-s4-a2").n_states == 4
    with pytest.raises(ValueError):
        envs.make_behavior(envs.make_mdp("random-3-s4-a2"), "eps:0.1")
    with pytest.raises(ValueError):
        envs.make_behavior(envs.make_mdp("distractor-grid-0"), "greedy")
