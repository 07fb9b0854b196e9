import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscg.composition import FrontierSpec, build_prior, frontiers_from_text, frontiers_to_text, learn_composed
from cscg.environments import (door_frontiers, ground_truth_model, make_composed_world, make_world, rectangle,
                               side_by_side)
from cscg.inference import nll
from cscg.learn_t import EmOptions, em_transitions, learn_transitions
from cscg.model import (CloneStructure, GroundedSchema, ModelError, Trajectory, UngroundedSchema, block_offsets,
                        random_transitions)

from conftest import labeled_isomorphic, ring_model


def ring(n=4):
    return ring_model(n)[0].ungrounded()


def test_two_rings_single_exit_goes_to_other_entry():
    prior = build_prior([ring(), ring()], [FrontierSpec([(1, 0)], [2]), FrontierSpec([(3, 1)], [0])])
    assert prior.T[0, 1, 4] == 1.0 and prior.T[0, 1].sum() == 1.0
    assert prior.T[1, 7, 2] == 1.0
    assert np.allclose(prior.T.sum(-1), 1)


def test_single_schema_without_frontiers_is_unchanged():
    s = ring(5)
    prior = build_prior([s], [FrontierSpec()])
    assert np.array_equal(prior.T, s.T) and prior.clones == s.clones


def test_six_schemas_all_potentially_connected(rng):
    schemas = [UngroundedSchema(random_transitions(4, 5, rng)) for _ in range(6)]
    frontiers = [FrontierSpec([(0, 3)], [1]) for _ in range(6)]
    prior = build_prior(schemas, frontiers)
    off = block_offsets(schemas)
    block_of = np.repeat(np.arange(6), np.diff(off))
    g = nx.DiGraph()
    for a, j, k in zip(*np.nonzero(prior.T > 0)):
        if block_of[j] != block_of[k]:
            g.add_edge(block_of[j], block_of[k])
    assert nx.is_isomorphic(g, nx.complete_graph(6, create_using=nx.DiGraph))
    assert np.allclose(prior.T[3, off[:-1]][:, off[:-1] + 1].sum(1), 1.0)


def test_exit_without_entries_elsewhere():
    with pytest.raises(ModelError):
        build_prior([ring(), ring()], [FrontierSpec([(0, 0)], [1]), FrontierSpec()])
    with pytest.raises(ModelError):
        build_prior([ring()], [FrontierSpec([(9, 0)], [])])


def test_frontier_text_roundtrip():
    named = {"left": FrontierSpec([(1, 2), (3, 0)], [1, 3]), "right": FrontierSpec()}
    text = frontiers_to_text(named)
    assert text.startswith("format: cscg-frontiers/1")
    assert frontiers_from_text(text) == named
    with pytest.raises(ModelError):
        frontiers_from_text("format: something-else\n")


def two_room_setup():
    spec = side_by_side(rectangle(3, 3, name="a"), rectangle(3, 3, name="b"))
    world = make_composed_world(spec)
    schemas = [ground_truth_model(make_world(r)).ungrounded() for r in spec.rooms]
    return spec, world, build_prior(schemas, door_frontiers(spec))


def test_prior_matches_composed_ground_truth_graph():
    _, world, prior = two_room_setup()
    assert labeled_isomorphic(prior.T, ground_truth_model(world).T)


def test_composed_learning_beats_scratch_and_matches_truth():
    _, world, prior = two_room_setup()
    rng = np.random.default_rng(0)
    walk, _ = world.random_walk(5000, rng)
    test, _ = world.random_walk(2000, rng)
    fit = learn_composed(prior, walk, world.n_obs, EmOptions(max_iters=50))
    scratch = learn_transitions(walk, CloneStructure.from_sizes(np.full(world.n_obs, 4)), EmOptions(max_iters=100),
                                n_obs=world.n_obs)
    truth = nll(ground_truth_model(world), test)
    assert nll(fit.model, test) - truth < 0.1
    assert nll(scratch.model, test) > nll(fit.model, test)
    trace = fit.info["transition_trace"]
    assert set(fit.info) >= {"emission_trace", "transition_trace", "refine_trace"}
    assert len(trace) >= 1


def test_unvisited_room_keeps_only_pseudocount_mass():
    spec, world, prior = two_room_setup()
    room_a = make_world(spec.rooms[0])
    n_a = room_a.n_states
    # the second room speaks a disjoint alphabet, so a walk in the first never reaches it
    labels = np.concatenate([ground_truth_model(make_world(r)).E.argmax(1) + i * room_a.n_obs
                             for i, r in enumerate(spec.rooms)])
    assert np.all(np.diff(labels) > 0)
    clones = CloneStructure.from_sizes(np.ones(len(labels), dtype=int))
    model = GroundedSchema(prior.T, clones.emission_matrix(), clones)
    door = room_a.state_at(*spec.doors[0].cell_a)
    rng = np.random.default_rng(1)
    states, acts = [0], []
    while len(states) < 2000:
        a = int(rng.integers(4))
        nxt = int(room_a.next_state[states[-1], a])
        if nxt != door:
            acts.append(a)
            states.append(nxt)
    walk = Trajectory(room_a.obs[states], np.array(acts))
    fit = em_transitions(model, walk, EmOptions(max_iters=5, pseudocount=2e-3), keep_best=False)
    assert prior.T[:, n_a:].max() == 1.0
    assert np.allclose(fit.model.T[:, n_a:], 1.0 / model.n_states, atol=1e-12)
    assert fit.model.T[:, :n_a].max() > 0.9


instance = st.tuples(st.integers(0, 2**32 - 1), st.lists(st.integers(2, 5), min_size=2, max_size=4))


@settings(max_examples=40, deadline=None)
@given(instance)
def test_prior_row_stochastic_and_keeps_non_exit_rows(params):
    seed, sizes = params
    rng = np.random.default_rng(seed)
    schemas = [UngroundedSchema(random_transitions(3, z, rng)) for z in sizes]
    frontiers = [FrontierSpec([(int(rng.integers(z)), int(rng.integers(3)))], [int(rng.integers(z))])
                 for z in sizes]
    prior = build_prior(schemas, frontiers)
    assert np.allclose(prior.T.sum(-1), 1, atol=1e-12)
    off = block_offsets(schemas)
    for i, (s, f) in enumerate(zip(schemas, frontiers)):
        exits = {(j, a) for j, a in f.exits}
        for a in range(3):
            for j in range(s.n_states):
                if (j, a) not in exits:
                    assert np.array_equal(prior.T[a, off[i] + j, off[i]:off[i + 1]], s.T[a, j])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transition_phase_monotone_without_pseudocount(seed):
    _, world, prior = two_room_setup()
    walk, _ = world.random_walk(300, np.random.default_rng(seed))
    fit = learn_composed(prior, walk, world.n_obs, EmOptions(max_iters=15, pseudocount=0.0, tol=0.0))
    assert np.all(np.diff(fit.info["transition_trace"]) <= 1e-9)
