import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscg.environments import ground_truth_model, ground_truth_order, make_world, standard_room
from cscg.inference import map_decode, nll
from cscg.learn_e import EmissionFitter, bind, learn_emissions, pool_by_group
from cscg.learn_t import EmOptions
from cscg.model import CloneStructure, ModelError, Trajectory, UngroundedSchema, respects_clones

from conftest import random_model, random_walk


def test_matching_pseudocount_default():
    s = UngroundedSchema(np.full((1, 2, 2), 0.5))
    assert EmissionFitter(s, 2).opts.pseudocount == 1e-7


def test_errors():
    s = UngroundedSchema(np.full((1, 2, 2), 0.5))
    with pytest.raises(ModelError):
        learn_emissions(s, Trajectory(np.array([0]), np.array([], dtype=int)), 0)
    with pytest.raises(ModelError):
        learn_emissions(s, [], 2)
    with pytest.raises(ModelError):
        learn_emissions(s, Trajectory(np.array([0, 1]), np.array([0])), 2, tie_clones=True)


def test_identity_transfer_recovers_generating_likelihood():
    world = make_world(standard_room("u_shape", "small"))
    truth = ground_truth_model(world)
    walk, _ = world.random_walk(1000, np.random.default_rng(0))
    b = learn_emissions(truth.ungrounded(), walk, world.n_obs, tie_clones=True)
    assert abs(b.nll - nll(truth, walk)) < 1e-3
    assert respects_clones(b.E, truth.clones)


def test_permuted_room_binding_localizes():
    world = make_world(standard_room("rectangle", "medium"))
    truth = ground_truth_model(world)
    rng = np.random.default_rng(11)
    permuted, _ = world.permuted(rng)
    train, _ = permuted.random_walk(1000, rng)
    bound = bind(truth.ungrounded(), train, permuted.n_obs, tie_clones=True)
    test, states = permuted.random_walk(1000, rng)
    env_of_model = ground_truth_order(world)[0]
    decoded = env_of_model[map_decode(bound, test)]
    assert np.mean(decoded == states) >= 0.95


def test_pooling_preserves_mass(rng):
    clones = CloneStructure.from_sizes([3, 1, 2])
    x = rng.random((10, 6))
    pooled = pool_by_group(x, clones)
    assert np.allclose(pooled.sum(-1), x.sum(-1), atol=1e-12)
    assert respects_clones(pooled.T, clones)


instance = st.tuples(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 3), st.integers(2, 4),
                     st.integers(5, 80))


@settings(max_examples=30, deadline=None)
@given(instance, st.booleans())
def test_em_monotone_without_pseudocount(params, tie):
    seed, Z, A, n_obs, N = params
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_states=Z, n_actions=A, n_obs=min(n_obs, Z), deterministic=True)
    traj = random_walk(rng, m, N)
    b = learn_emissions(m.ungrounded(), traj, m.n_obs, tie_clones=tie,
                        opts=EmOptions(max_iters=30, pseudocount=0.0, tol=0.0))
    assert np.all(np.diff(b.trace) <= 1e-9)
    assert np.allclose(b.E.sum(1), 1, atol=1e-9)
    if tie:
        assert respects_clones(b.E, m.clones)


@settings(max_examples=30, deadline=None)
@given(instance)
def test_binding_is_permutation_equivariant(params):
    seed, Z, A, n_obs, N = params
    rng = np.random.default_rng(seed)
    m = random_model(rng, n_states=Z, n_actions=A, n_obs=min(n_obs, Z), deterministic=True)
    traj = random_walk(rng, m, N)
    sigma = rng.permutation(m.n_obs)
    opts = EmOptions(max_iters=20, pseudocount=1e-7)
    E = learn_emissions(m.ungrounded(), traj, m.n_obs, tie_clones=True, opts=opts).E
    Ep = learn_emissions(m.ungrounded(), traj.relabel(sigma), m.n_obs, tie_clones=True, opts=opts).E
    assert np.array_equal(Ep[:, sigma], E)
