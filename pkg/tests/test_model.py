import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscg.model import (CloneStructure, GroundedSchema, ModelError, Trajectory, UngroundedSchema,
                        VersionMismatch, block_diagonal, deserialize, export_edges, load, random_transitions,
                        save, serialize, uniform_model, validate)

from conftest import random_model, ring_model, transition_graph


def test_uniform_model_is_valid():
    m = uniform_model(3, CloneStructure.from_sizes([2, 2, 1]))
    assert validate(m) == []


def test_row_summing_to_point_nine_is_one_violation():
    m = uniform_model(2, CloneStructure.from_sizes([2, 2]))
    T = np.array(m.T)
    T[1, 2] *= 0.9
    problems = validate(m.replace(T=T))
    assert len(problems) == 1
    assert "(1, 2)" in problems[0] and "transitions" in problems[0]


def test_untied_clone_rows_reported():
    clones = CloneStructure.from_sizes([2])
    E = np.array([[1.0, 0.0], [0.5, 0.5]])
    m = GroundedSchema(np.full((1, 2, 2), 0.5), E, clones)
    problems = validate(m)
    assert any("clone structure" in p for p in problems)


def test_pi_defaults_to_uniform():
    m = GroundedSchema(np.full((1, 4, 4), 0.25), np.eye(4), CloneStructure.from_sizes([1] * 4))
    assert np.allclose(m.pi, 0.25)


def test_models_are_immutable():
    m = uniform_model(1, CloneStructure.from_sizes([2]))
    with pytest.raises(ValueError):
        m.T[0, 0, 0] = 1.0


@pytest.mark.parametrize("sizes", [[0, 1], []])
def test_clone_groups_must_be_nonempty(sizes):
    with pytest.raises(ModelError):
        CloneStructure.from_sizes(sizes)


def test_noncontiguous_groups_rejected():
    with pytest.raises(ModelError):
        CloneStructure(np.array([0, 1, 0]))


def test_trajectory_length_mismatch():
    with pytest.raises(ModelError):
        Trajectory(np.array([0, 1, 2]), np.array([0]))
    with pytest.raises(ModelError):
        Trajectory(np.array([], dtype=int), np.array([], dtype=int))


def test_block_diagonal_single_schema_identity(rng):
    T = random_transitions(2, 5, rng)
    assert np.array_equal(block_diagonal([UngroundedSchema(T)]), T)


def test_block_diagonal_off_blocks_zero(rng):
    a = UngroundedSchema(random_transitions(2, 3, rng))
    b = UngroundedSchema(random_transitions(2, 5, rng))
    J = block_diagonal([a, b])
    assert J.shape == (2, 8, 8)
    assert not J[:, :3, 3:].any() and not J[:, 3:, :3].any()
    assert np.array_equal(J[:, :3, :3], a.T) and np.array_equal(J[:, 3:, 3:], b.T)


def test_block_diagonal_two_rings_are_two_components():
    ring, _ = ring_model(5)
    J = block_diagonal([ring.ungrounded(), ring.ungrounded()])
    g = transition_graph(J).to_undirected()
    assert nx.number_connected_components(nx.Graph(g)) == 2


def test_block_diagonal_action_mismatch(rng):
    with pytest.raises(ModelError):
        block_diagonal([UngroundedSchema(random_transitions(2, 3, rng)),
                        UngroundedSchema(random_transitions(3, 3, rng))])


def test_roundtrip_bit_exact(rng, tmp_path):
    m = random_model(rng, n_states=6, n_actions=3, n_obs=3, deterministic=True).replace(name="room")
    back = deserialize(serialize(m))
    for attr in ("T", "E", "pi"):
        assert getattr(back, attr).tobytes() == getattr(m, attr).tobytes()
    assert back.clones == m.clones and back.name == "room"
    save(m, tmp_path / "m.cscg")
    assert load(tmp_path / "m.cscg").T.tobytes() == m.T.tobytes()


def test_ungrounded_roundtrip(rng):
    s = UngroundedSchema(random_transitions(4, 7, rng), CloneStructure.from_sizes([3, 4]), name="s")
    back = deserialize(serialize(s))
    assert isinstance(back, UngroundedSchema)
    assert np.array_equal(back.T, s.T) and back.clones == s.clones


def test_corrupted_header_is_version_mismatch(rng):
    blob = bytearray(serialize(random_model(rng, deterministic=True)))
    blob[0:4] = b"XXXX"
    with pytest.raises(VersionMismatch):
        deserialize(bytes(blob))
    blob = bytearray(serialize(random_model(rng, deterministic=True)))
    blob[4] = 99
    with pytest.raises(VersionMismatch):
        deserialize(bytes(blob))


def test_truncated_payload(rng):
    blob = serialize(random_model(rng, deterministic=True))
    with pytest.raises(ModelError, match="truncated"):
        deserialize(blob[:-3])


def test_half_mass_emission_row_fails_on_load():
    clones = CloneStructure.from_sizes([1, 1])
    E = np.array([[0.5, 0.0], [0.0, 1.0]])
    m = GroundedSchema(np.full((1, 2, 2), 0.5), E, clones)
    with pytest.raises(ModelError, match="invariant"):
        deserialize(serialize(m))


def test_edge_export_lines():
    ring, _ = ring_model(3)
    lines = export_edges(ring.T).splitlines()
    assert len(lines) == 6
    a, j, k, p = lines[0].split()
    assert float(p) == 1.0 and ring.T[int(a), int(j), int(k)] == 1.0


sizes_strategy = st.lists(st.integers(1, 4), min_size=1, max_size=6)


@given(sizes_strategy)
def test_clone_groups_contiguous_and_sum(sizes):
    c = CloneStructure.from_sizes(sizes)
    assert np.all(np.diff(c.group_of_state) >= 0)
    assert c.group_sizes.sum() == c.n_states == sum(sizes)
    assert np.array_equal(c.group_sizes, sizes)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 6))
def test_constructors_and_roundtrip_keep_rows_stochastic(seed, A, Z):
    rng = np.random.default_rng(seed)
    T = random_transitions(A, Z, rng)
    assert np.allclose(T.sum(-1), 1, atol=1e-12)
    clones = CloneStructure.from_sizes([Z])
    m = GroundedSchema(T, clones.emission_matrix(), clones)
    back = deserialize(serialize(m))
    assert validate(back) == []
    assert np.array_equal(back.T, T)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 5), min_size=1, max_size=4))
def test_block_diagonal_blocks_equal_inputs(seed, sizes):
    rng = np.random.default_rng(seed)
    schemas = [UngroundedSchema(random_transitions(2, z, rng)) for z in sizes]
    J = block_diagonal(schemas)
    off = 0
    for s in schemas:
        z = s.n_states
        assert np.array_equal(J[:, off:off + z, off:off + z], s.T)
        off += z
    assert np.allclose(J.sum(-1), 1)
