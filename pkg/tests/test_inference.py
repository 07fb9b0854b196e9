import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscg.environments import ground_truth_model, make_world, standard_room
from cscg.inference import (NoPathError, ZeroProbabilityError, forward_backward, log_likelihood, map_decode,
                            nll, path_log_prob)
from cscg.model import CloneStructure, GroundedSchema, ModelError, Trajectory, uniform_model

from conftest import brute_force, dense_log_likelihood, random_model, random_walk, ring_model


def test_single_state_model():
    m = uniform_model(2, CloneStructure.from_sizes([1]))
    traj = Trajectory(np.zeros(7, int), np.array([0, 1, 1, 0, 1, 0]))
    ms = forward_backward(m, traj)
    assert np.all(ms.alpha == 1) and np.all(ms.beta == 1) and np.all(ms.log_norms == 0)
    assert nll(m, traj) == 0


def test_uniform_clone_model_costs_ln2_per_step():
    m = uniform_model(2, CloneStructure.from_sizes([2, 2]))
    rng = np.random.default_rng(0)
    traj = Trajectory(rng.integers(2, size=10), rng.integers(2, size=9))
    ms = forward_backward(m, traj)
    assert np.allclose(np.exp(ms.log_norms), 0.5, atol=1e-15)
    assert abs(nll(m, traj) - math.log(2)) < 1e-12


def test_exhaustive_path_sum_six_steps(rng):
    m = random_model(rng, n_states=4, n_actions=2, n_obs=2)
    traj = random_walk(rng, m, 6)
    total, _, _, gamma = brute_force(m, traj)
    assert abs(log_likelihood(m, traj) - math.log(total)) < 1e-10
    assert np.allclose(forward_backward(m, traj).gamma, gamma, atol=1e-10)


def test_gamma_supported_on_clones_of_observation(rng):
    m = random_model(rng, n_states=6, n_actions=2, n_obs=3, deterministic=True)
    traj = random_walk(rng, m, 20)
    ms = forward_backward(m, traj)
    owner = m.clones.group_of_state
    for n, x in enumerate(traj.observations):
        assert np.all(ms.gamma[n, owner != x] == 0)
        assert abs(ms.gamma[n].sum() - 1) < 1e-9
        assert abs(ms.alpha[n].sum() - 1) < 1e-9


def test_ground_truth_room_sparse_equals_dense():
    world = make_world(standard_room("u_shape", "medium"))
    model = ground_truth_model(world)
    traj, _ = world.random_walk(10000, np.random.default_rng(3))
    sparse = nll(model, traj, clone_sparse=True)
    assert np.isfinite(sparse)
    assert abs(sparse - nll(model, traj, clone_sparse=False)) < 1e-10
    assert abs(sparse + dense_log_likelihood(model, traj) / len(traj)) < 1e-10


def test_decode_ring_with_unique_observations():
    ring, pos_to_state = ring_model(6)
    acts = np.array([0, 0, 1, 0, 0, 0, 1, 1])
    pos = np.concatenate([[2], 2 + np.cumsum(np.where(acts == 0, 1, -1))]) % 6
    traj = Trajectory(pos, acts)
    assert np.array_equal(map_decode(ring, traj), pos_to_state[pos])


def test_decode_single_observation_is_argmax_of_prior_times_emission(rng):
    m = random_model(rng, n_states=4, n_obs=3)
    traj = Trajectory(np.array([2]), np.array([], dtype=int))
    assert map_decode(m, traj)[0] == np.argmax(m.pi * m.E[:, 2])


def test_decode_ties_go_to_lowest_state():
    m = uniform_model(1, CloneStructure.from_sizes([3]))
    traj = Trajectory(np.zeros(4, int), np.zeros(3, int))
    assert np.array_equal(map_decode(m, traj), [0, 0, 0, 0])
    assert np.array_equal(map_decode(m, traj, clone_sparse=False), [0, 0, 0, 0])


def test_zero_probability_step_is_reported():
    ring, _ = ring_model(4)
    # position 0 -> forward -> position 1, but we claim to see observation 3
    traj = Trajectory(np.array([0, 1, 3]), np.array([0, 0]))
    with pytest.raises(ZeroProbabilityError) as err:
        forward_backward(ring, traj)
    assert err.value.step == 2
    assert nll(ring, traj) == float("inf")
    with pytest.raises(NoPathError):
        map_decode(ring, traj)


def test_out_of_range_observation():
    ring, _ = ring_model(4)
    with pytest.raises(ModelError):
        nll(ring, Trajectory(np.array([0, 9]), np.array([0])))


def test_clone_sparse_rejects_soft_emissions(rng):
    with pytest.raises(ModelError):
        forward_backward(random_model(rng), random_walk(rng, random_model(rng), 3), clone_sparse=True)


def test_pairwise_posteriors_are_consistent(rng):
    m = random_model(rng, n_states=3, n_actions=2, n_obs=2)
    traj = random_walk(rng, m, 7)
    ms = forward_backward(m, traj, return_xi=True)
    assert np.allclose(ms.xi.sum(2), ms.gamma[:-1], atol=1e-12)
    assert np.allclose(ms.xi.sum(1), ms.gamma[1:], atol=1e-12)


model_params = st.tuples(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3), st.integers(1, 8))


@settings(max_examples=60, deadline=None)
@given(model_params, st.floats(1e-3, 1e3))
def test_rescaling_messages_leaves_posteriors_unchanged(params, c):
    # scaling every emission by c scales every unnormalized forward message by c
    seed, Z, A, N = params
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_states=Z, n_actions=A, n_obs=2)
    traj = random_walk(rng, m, N)
    scaled = m.replace(E=m.E * c)
    a, b = forward_backward(m, traj), forward_backward(scaled, traj)
    assert np.allclose(a.gamma, b.gamma, atol=1e-12)
    assert np.allclose(b.log_norms - a.log_norms, math.log(c), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(model_params)
def test_sparse_and_dense_paths_agree(params):
    seed, Z, A, N = params
    rng = np.random.default_rng(seed)
    Z = max(Z, 2)
    m = random_model(rng, n_states=Z, n_actions=A, n_obs=2, deterministic=True)
    traj = random_walk(rng, m, N)
    assert abs(log_likelihood(m, traj, clone_sparse=True) - log_likelihood(m, traj, clone_sparse=False)) < 1e-10
    assert np.array_equal(map_decode(m, traj, clone_sparse=True), map_decode(m, traj, clone_sparse=False))


@settings(max_examples=40, deadline=None)
@given(model_params)
def test_posteriors_and_map_match_enumeration(params):
    seed, Z, A, N = params
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_states=Z, n_actions=A, n_obs=2)
    traj = random_walk(rng, m, min(N, 6))
    total, best, _, gamma = brute_force(m, traj)
    ms = forward_backward(m, traj)
    assert np.allclose(ms.gamma.sum(1), 1, atol=1e-12)
    assert np.allclose(ms.gamma, gamma, atol=1e-9)
    path = map_decode(m, traj)
    assert abs(path_log_prob(m, traj, path) - math.log(best)) < 1e-10
    marginal_path = ms.gamma.argmax(1)
    assert path_log_prob(m, traj, path) >= path_log_prob(m, traj, marginal_path) - 1e-12


def test_nll_agrees_with_log_norms(rng):
    m = random_model(rng, n_states=5, n_actions=3, n_obs=3, deterministic=True)
    traj = random_walk(rng, m, 50)
    ms = forward_backward(m, traj)
    assert abs(nll(m, traj) + ms.log_norms.mean()) < 1e-12
    assert isinstance(m, GroundedSchema)
