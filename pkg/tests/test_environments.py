import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscg.environments import (FORWARD, LEFT, RIGHT, ROOM_KINDS, SIZE_CLASSES, TURN_LEFT, UP,
                               EnvironmentError_, MemoryPlanningGame, RoomSpec, bitmap_rooms,
                               composed_from_text, composed_to_text, continuous_observations, egocentric,
                               ground_truth_model, make_composed_world, make_world, rectangle, room_from_text,
                               room_to_text, side_by_side, square_with_hole, standard_room, u_shape)
from cscg.inference import nll


def test_walls_stop_and_torus_wraps():
    flat = make_world(rectangle(3, 3))
    corner = flat.state_at(0, 0)
    assert flat.step(corner, UP) == (corner, flat.obs[corner])
    assert flat.step(corner, LEFT)[0] == corner
    assert flat.step(corner, RIGHT)[0] == flat.state_at(0, 1)
    torus = make_world(rectangle(3, 3, topology="torus"))
    assert torus.step(torus.state_at(0, 0), UP)[0] == torus.state_at(2, 0)
    assert torus.step(torus.state_at(1, 2), RIGHT)[0] == torus.state_at(1, 0)
    cyl = make_world(rectangle(3, 3, topology="cylinder"))
    assert cyl.step(cyl.state_at(0, 0), UP)[0] == cyl.state_at(2, 0)
    assert cyl.step(cyl.state_at(1, 2), RIGHT)[0] == cyl.state_at(1, 2)
    with pytest.raises(EnvironmentError_):
        flat.step(0, 4)


def test_rectangle_has_nine_position_types():
    world = make_world(rectangle(5, 5))
    assert world.n_obs == 9
    # interior cells share a symbol, each corner has its own
    assert np.bincount(world.obs).max() == 9
    # the markings belong to the layout, so wrapping edges keep them
    assert np.array_equal(make_world(rectangle(5, 5, topology="torus")).obs, world.obs)


def test_long_walk_covers_every_cell():
    world = make_world(standard_room("rectangle", "medium"))
    _, states = world.random_walk(20000, np.random.default_rng(0))
    assert set(states) == set(range(world.n_states))


@pytest.mark.parametrize("kind", ROOM_KINDS)
def test_standard_rooms_connected_with_finite_truth(kind):
    counts = []
    for size in SIZE_CLASSES:
        world = make_world(standard_room(kind, size))
        g = nx.DiGraph([(s, int(t)) for s in range(world.n_states) for t in world.next_state[s]])
        assert nx.is_strongly_connected(g)
        walk, _ = world.random_walk(500, np.random.default_rng(1))
        assert np.isfinite(nll(ground_truth_model(world), walk))
        counts.append(world.n_states)
    assert counts == sorted(counts) and len(set(counts)) == 3


def test_room_shapes():
    assert square_with_hole(6, 2).layout.sum() == 32
    u = u_shape(6, 6, 2, 3).layout
    assert u.sum() == 30 and not u[0, 2] and u[3, 2]
    with pytest.raises(EnvironmentError_):
        RoomSpec(np.zeros((2, 2)))
    with pytest.raises(EnvironmentError_):
        RoomSpec(np.ones((2, 2)), topology="sphere")
    with pytest.raises(EnvironmentError_):
        make_world(RoomSpec(np.array([[1, 0], [0, 1]])))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_is_a_bijection(seed):
    world = make_world(standard_room("u_shape", "small"))
    perm, sigma = world.permuted(np.random.default_rng(seed))
    assert sorted(sigma) == list(range(world.n_obs))
    assert np.array_equal(perm.obs, sigma[world.obs])
    assert np.array_equal(perm.next_state, world.next_state)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_step_is_pure(seed, actions):
    world = make_world(standard_room("square_hole", "small"))
    s = int(np.random.default_rng(seed).integers(world.n_states))
    a = world.rollout(s, actions)[1]
    b = world.rollout(s, actions)[1]
    assert np.array_equal(a, b)
    for i, act in enumerate(actions):
        assert world.step(int(a[i]), act)[0] == a[i + 1]


def test_ground_truth_is_deterministic_and_consistent():
    world = make_world(standard_room("torus", "small"))
    model = ground_truth_model(world)
    assert np.all(model.T.max(-1) == 1.0) and np.allclose(model.T.sum(-1), 1)
    walk, _ = world.random_walk(300, np.random.default_rng(2))
    assert np.isfinite(nll(model, walk))


def test_mpg_symbols_bijective_and_reward_only_on_collect():
    game = MemoryPlanningGame(seed=3)
    for _ in range(3):
        game.reset()
        assert sorted(game.symbols) == list(range(16))
        assert game.goal_cell != game.cell
    game.reset()
    for a in range(4):
        game.move(a)
    assert game.reward == 0 and game.steps == 4
    if game.cell != game.goal_cell:
        assert game.collect() == 0
    # walk to the goal along a BFS path and collect
    dist = game.world.distances_from(game.goal_cell)
    while game.cell != game.goal_cell:
        game.move(next(a for a in range(4) if dist[game.world.next_state[game.cell, a]] < dist[game.cell]))
    assert game.collect() == 1 and game.reward == 1
    while not game.done:
        game.move(0)
    assert game.steps == 100
    with pytest.raises(EnvironmentError_):
        game.move(0)


def test_egocentric_turns_and_moves():
    world = make_world(rectangle(3, 3))
    ego = egocentric(world)
    assert ego.n_states == 36 and ego.n_actions == 3
    s = 4 * world.state_at(1, 1)   # centre, facing up
    assert ego.heading[s] == 0
    left = ego.step(s, TURN_LEFT)[0]
    assert ego.heading[left] == 3 and tuple(ego.coords[left]) == (1, 1)
    fwd = ego.step(s, FORWARD)[0]
    assert tuple(ego.coords[fwd]) == (0, 1) and ego.heading[fwd] == 0
    assert ego.is_connected()
    # in the centre nothing is blocked in any direction, so all four headings look alike
    assert len(set(ego.obs[4 * world.state_at(1, 1) + np.arange(4)])) == 1


def test_room_text_roundtrip():
    spec = standard_room("u_shape", "small")
    back = room_from_text(room_to_text(spec))
    assert np.array_equal(back.layout, spec.layout) and np.array_equal(back.observation_map, spec.observation_map)
    assert (back.name, back.topology, back.size_class) == (spec.name, spec.topology, spec.size_class)
    custom = RoomSpec(np.ones((2, 2)), observation_map=np.array([[0, 1], [1, 0]]), name="c")
    assert np.array_equal(room_from_text(room_to_text(custom)).observation_map, custom.observation_map)
    with pytest.raises(EnvironmentError_):
        room_from_text("format: cscg-room/1\nlayout: [ab]\n")
    with pytest.raises(EnvironmentError_):
        room_from_text("format: cscg-composed/1\n")


def test_composed_text_roundtrip():
    spec = side_by_side(standard_room("rectangle", "small"), standard_room("u_shape", "small"))
    back = composed_from_text(composed_to_text(spec))
    assert back.doors == spec.doors and back.offsets == spec.offsets
    assert np.array_equal(make_composed_world(back).next_state, make_composed_world(spec).next_state)


def test_side_by_side_door_joins_adjacent_open_cells():
    spec = side_by_side(square_with_hole(6, 2), u_shape(6, 6, 2, 3))
    world = make_composed_world(spec)
    assert world.is_connected() and len(spec.doors) == 1
    d = spec.doors[0]
    ga = np.add(spec.offsets[0], d.cell_a)
    gb = np.add(spec.offsets[1], d.cell_b)
    assert np.abs(ga - gb).sum() == 1
    crossings = [(s, int(t)) for s in range(world.n_states) for t in world.next_state[s]
                 if world.room_of_state[s] != world.room_of_state[t]]
    assert len(crossings) == 2


def test_overlapping_rooms_rejected():
    from cscg.environments import ComposedSpec
    with pytest.raises(EnvironmentError_):
        ComposedSpec((rectangle(2, 2), rectangle(2, 2)), ((0, 0), (1, 1)), ())


def test_bitmaps_are_ten_distinct_connected_rooms():
    rooms = bitmap_rooms()
    assert len(rooms) == 10
    layouts = {r.layout.tobytes() for r in rooms}
    assert len(layouts) == 10
    for r in rooms:
        assert make_world(r).is_connected()


def test_continuous_observations_cluster_by_symbol():
    obs = np.array([0, 1, 0, 2, 1])
    x = continuous_observations(obs, 3, dim=8, noise=0.01, seed=0)
    assert x.shape == (5, 8)
    assert np.linalg.norm(x[0] - x[2]) < 0.2 < np.linalg.norm(x[0] - x[1])
