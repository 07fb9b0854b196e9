"""Independent reference computations shared by the test modules.

Nothing here imports the package's inference code: these are the slow,
obviously-correct versions the fast paths are checked against.
"""
import itertools

import networkx as nx
import numpy as np
import pytest

from cscg.model import CloneStructure, GroundedSchema, Trajectory


def random_model(rng, n_states=4, n_actions=2, n_obs=2, deterministic=False, sparsity=0.0):
    T = rng.random((n_actions, n_states, n_states))
    if sparsity:
        T *= rng.random(T.shape) >= sparsity
        T[:, np.arange(n_states), np.arange(n_states)] += 1e-3
    T /= T.sum(-1, keepdims=True)
    if deterministic:
        sizes = np.ones(n_obs, int)
        for extra in rng.integers(n_obs, size=n_states - n_obs):
            sizes[extra] += 1
        clones = CloneStructure.from_sizes(sizes)
        E = clones.emission_matrix()
    else:
        clones = CloneStructure.from_sizes(np.ones(n_states, int))
        E = rng.random((n_states, n_obs)) + 0.05
        E /= E.sum(1, keepdims=True)
    pi = rng.random(n_states)
    pi /= pi.sum()
    return GroundedSchema(T, E, clones, pi)


def random_walk(rng, model, n):
    """Sample a trajectory from the generative model itself."""
    z = rng.choice(model.n_states, p=model.pi)
    obs = [rng.choice(model.n_obs, p=model.E[z])]
    acts = []
    for _ in range(n - 1):
        a = int(rng.integers(model.n_actions))
        z = rng.choice(model.n_states, p=model.T[a, z])
        acts.append(a)
        obs.append(rng.choice(model.n_obs, p=model.E[z]))
    return Trajectory(np.array(obs), np.array(acts, dtype=int))


def path_prob(model, traj, path):
    obs, acts = traj.observations, traj.actions
    p = model.pi[path[0]] * model.E[path[0], obs[0]]
    for n in range(1, len(path)):
        p *= model.T[acts[n - 1], path[n - 1], path[n]] * model.E[path[n], obs[n]]
    return p


def brute_force(model, traj):
    """``(likelihood, max path prob, argmax path, posterior marginals)`` by enumerating every hidden path.

    Paths are scored as plain products, in lexicographic order, so the first
    maximum is the lowest-index tie-break.
    """
    N, Z = len(traj), model.n_states
    obs, acts = traj.observations, traj.actions
    paths = np.array(list(itertools.product(range(Z), repeat=N)), dtype=np.int64).reshape(-1, N)
    p = model.pi[paths[:, 0]] * model.E[paths[:, 0], obs[0]]
    for n in range(1, N):
        p = p * model.T[acts[n - 1], paths[:, n - 1], paths[:, n]] * model.E[paths[:, n], obs[n]]
    total = p.sum()
    i = int(np.argmax(p))
    gamma = np.zeros((N, Z))
    for n in range(N):
        gamma[n] = np.bincount(paths[:, n], weights=p, minlength=Z)
    return total, p[i], paths[i], gamma / total


def dense_log_likelihood(model, traj):
    """Plain scaled forward pass over full matrices."""
    obs, acts = traj.observations, traj.actions
    alpha = model.pi * model.E[:, obs[0]]
    ll = 0.0
    for n in range(1, len(obs) + 1):
        s = alpha.sum()
        if s == 0:
            return -np.inf
        ll += np.log(s)
        alpha = alpha / s
        if n < len(obs):
            alpha = (alpha @ model.T[acts[n - 1]]) * model.E[:, obs[n]]
    return ll


def transition_graph(T, threshold=1e-9):
    """Directed multigraph with one edge per (action, from, to) above ``threshold``."""
    g = nx.MultiDiGraph()
    g.add_nodes_from(range(T.shape[1]))
    for a, j, k in zip(*np.nonzero(T > threshold)):
        g.add_edge(int(j), int(k), action=int(a))
    return g


def labeled_isomorphic(T1, T2, threshold=1e-9):
    match = nx.algorithms.isomorphism.categorical_multiedge_match("action", None)
    return nx.is_isomorphic(transition_graph(T1, threshold), transition_graph(T2, threshold), edge_match=match)


def bfs_lengths(T, threshold=1e-9):
    g = nx.DiGraph()
    g.add_nodes_from(range(T.shape[1]))
    g.add_edges_from((int(j), int(k)) for _, j, k in zip(*np.nonzero(T > threshold)) if j != k)
    return dict(nx.all_pairs_shortest_path_length(g))


def ring_model(n, labels=None):
    """Deterministic ring: action 0 steps forward, action 1 steps back.

    Ring position ``i`` emits ``labels[i]`` (default: its own index). Returns
    the model and the map from ring position to model state.
    """
    idx = np.arange(n)
    labels = idx if labels is None else np.asarray(labels)
    T = np.zeros((2, n, n))
    T[0, idx, (idx + 1) % n] = 1
    T[1, idx, (idx - 1) % n] = 1
    order = np.argsort(labels, kind="stable")
    inv = np.empty(n, int)
    inv[order] = idx
    T = T[:, order][:, :, order]
    clones = CloneStructure.from_sizes(np.bincount(labels))
    return GroundedSchema(T, clones.emission_matrix(), clones), inv


def corridor(n):
    """Transition tensor of a dead-end corridor: action 0 steps right, action 1 left, walls stop the agent."""
    idx = np.arange(n)
    T = np.zeros((2, n, n))
    T[0, idx, np.minimum(idx + 1, n - 1)] = 1
    T[1, idx, np.maximum(idx - 1, 0)] = 1
    return T


def corridor_walk(rng, n, steps, offset=0):
    acts = rng.integers(2, size=steps - 1)
    pos = [0]
    for a in acts:
        pos.append(min(pos[-1] + 1, n - 1) if a == 0 else max(pos[-1] - 1, 0))
    return Trajectory(np.array(pos) + offset, acts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
