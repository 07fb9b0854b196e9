"""Exact forward-backward, likelihood and MAP decoding.

Two code paths compute the same quantities. The clone-sparse path needs a
deterministic emission matrix whose clones are laid out contiguously per
observation; each step then only touches the ``|C(x_prev)| x |C(x)|`` block of
the transition tensor. The general path accepts any emission matrix and walks
the transition tensor in compressed-row form.

Messages are renormalized at every step and the log normalizers kept, so
``log p(x | a) = sum(log_norms)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .model import GroundedSchema, ModelError, Trajectory, as_trajectories


class ZeroProbabilityError(ArithmeticError):
    """The observations are impossible under the model from ``step`` onwards."""

    def __init__(self, step: int, message: str = ""):
        self.step = int(step)
        super().__init__(message or f"zero-probability observation at step {self.step}")


class NoPathError(ZeroProbabilityError):
    pass


@dataclass
class MessageSet:
    alpha: np.ndarray       # (N, Z) normalized forward messages
    beta: np.ndarray        # (N, Z) normalized backward messages
    log_norms: np.ndarray   # (N,) log p_alpha(n)
    gamma: np.ndarray       # (N, Z) posterior marginals
    xi: Optional[np.ndarray] = None  # (N-1, Z, Z) pairwise posteriors

    @property
    def log_likelihood(self) -> float:
        return float(self.log_norms.sum())


# --------------------------------------------------------------------------- helpers

def csr_transitions(T: np.ndarray):
    """Per-action compressed rows over the nonzero entries of ``T``."""
    A, Z, _ = T.shape
    mask = T != 0
    row_nnz = mask.sum(-1).reshape(-1)
    indptr = np.concatenate([[0], np.cumsum(row_nnz)]).astype(np.int64)
    a_idx, j_idx, k_idx = np.nonzero(mask)
    data = np.ascontiguousarray(T[a_idx, j_idx, k_idx], dtype=np.float64)
    starts = indptr[:-1].reshape(A, Z)
    full = np.empty((A, Z + 1), dtype=np.int64)
    full[:, :Z] = starts
    full[:, Z] = indptr[1:].reshape(A, Z)[:, -1]
    return full, k_idx.astype(np.int64), data, (a_idx, j_idx, k_idx)


def emission_bounds(E: np.ndarray) -> Optional[np.ndarray]:
    """Clone offsets per observation when ``E`` is deterministic and contiguous, else None."""
    if not np.all((E == 0) | (E == 1)) or not np.all(E.sum(1) == 1):
        return None
    obs_of_state = E.argmax(1)
    if np.any(np.diff(obs_of_state) < 0):
        return None
    n_obs = E.shape[1]
    return np.searchsorted(obs_of_state, np.arange(n_obs + 1), side="left").astype(np.int64)


def concat(trajs, n_obs: Optional[int] = None, n_actions: Optional[int] = None):
    trajs = as_trajectories(trajs)
    for t in trajs:
        if not t.is_discrete:
            raise ModelError("continuous observations must be quantized first")
    obs = np.concatenate([t.observations for t in trajs]).astype(np.int64)
    acts = np.concatenate([np.append(t.actions, 0) for t in trajs]).astype(np.int64)
    seq_bounds = np.concatenate([[0], np.cumsum([len(t) for t in trajs])]).astype(np.int64)
    if n_obs is not None and (obs.min() < 0 or obs.max() >= n_obs):
        bad = int(np.nonzero((obs < 0) | (obs >= n_obs))[0][0])
        raise ModelError(f"observation index {obs[bad]} at step {bad} out of range [0, {n_obs})")
    if n_actions is not None and len(acts) and (acts.min() < 0 or acts.max() >= n_actions):
        raise ModelError(f"action index out of range [0, {n_actions})")
    return obs, acts, seq_bounds


def _use_sparse(model: GroundedSchema, clone_sparse: Optional[bool]):
    bounds = emission_bounds(model.E)
    if clone_sparse is None:
        return bounds
    if clone_sparse and bounds is None:
        raise ModelError("clone-sparse path needs a deterministic, contiguous emission matrix")
    return bounds if clone_sparse else None


# --------------------------------------------------------------------------- forward-backward

def forward_backward(model: GroundedSchema, traj: Trajectory, clone_sparse: Optional[bool] = None,
                     return_xi: bool = False) -> MessageSet:
    obs, acts, seq_bounds = concat(traj, model.n_obs, model.n_actions)
    if len(seq_bounds) != 2:
        raise ModelError("forward_backward takes a single trajectory")
    N, Z = len(obs), model.n_states
    T = np.ascontiguousarray(model.T)
    bounds = _use_sparse(model, clone_sparse)
    log_norms = np.zeros(N)
    if bounds is not None:
        off = K.clone_offsets(bounds, obs)
        flat_a = np.zeros(off[-1])
        status = K.sparse_forward(T, bounds, model.pi, obs, acts, seq_bounds, off, flat_a, log_norms)
        if status != K.OK:
            raise ZeroProbabilityError(status)
        flat_b = np.zeros(off[-1])
        dummy = np.zeros((1, 1, 1))
        K.sparse_backward(T, bounds, obs, acts, seq_bounds, off, flat_a, flat_b, dummy, np.zeros(Z), False)
        rows = np.repeat(np.arange(N), np.diff(off))
        cols = np.concatenate([np.arange(bounds[x], bounds[x + 1]) for x in obs])
        alpha = np.zeros((N, Z))
        beta = np.zeros((N, Z))
        alpha[rows, cols] = flat_a
        beta[rows, cols] = flat_b
    else:
        indptr, indices, data, _ = csr_transitions(T)
        E = np.ascontiguousarray(model.E)
        alpha = np.zeros((N, Z))
        status = K.csr_forward(indptr, indices, data, E, model.pi, obs, acts, seq_bounds, alpha, log_norms)
        if status != K.OK:
            raise ZeroProbabilityError(status)
        beta = np.zeros((N, Z))
        K.csr_backward(indptr, indices, data, E, obs, acts, seq_bounds, alpha, beta,
                       np.zeros(1), np.zeros((1, 1)), np.zeros(1), np.zeros(Z), False, False)
    gamma = alpha * beta
    gamma /= gamma.sum(1, keepdims=True)
    xi = None
    if return_xi:
        xi = np.zeros((max(N - 1, 0), Z, Z))
        for n in range(N - 1):
            m = alpha[n][:, None] * model.T[acts[n]] * (model.E[:, obs[n + 1]] * beta[n + 1])[None, :]
            xi[n] = m / m.sum()
    return MessageSet(alpha, beta, log_norms, gamma, xi)


def log_likelihood(model: GroundedSchema, traj, clone_sparse: Optional[bool] = None) -> float:
    """Total ``log p(x | a)`` summed over one or more trajectories."""
    obs, acts, seq_bounds = concat(traj, model.n_obs, model.n_actions)
    T = np.ascontiguousarray(model.T)
    log_norms = np.zeros(len(obs))
    bounds = _use_sparse(model, clone_sparse)
    if bounds is not None:
        off = K.clone_offsets(bounds, obs)
        status = K.sparse_forward(T, bounds, model.pi, obs, acts, seq_bounds, off, np.zeros(off[-1]), log_norms)
    else:
        indptr, indices, data, _ = csr_transitions(T)
        alpha = np.zeros((len(obs), model.n_states))
        status = K.csr_forward(indptr, indices, data, np.ascontiguousarray(model.E), model.pi,
                               obs, acts, seq_bounds, alpha, log_norms)
    if status != K.OK:
        raise ZeroProbabilityError(status)
    return float(log_norms.sum())


def nll(model: GroundedSchema, traj, clone_sparse: Optional[bool] = None) -> float:
    """Per-step negative log-likelihood; ``inf`` if the walk is impossible under the model."""
    n = sum(len(t) for t in as_trajectories(traj))
    try:
        return -log_likelihood(model, traj, clone_sparse) / n
    except ZeroProbabilityError:
        return float("inf")


def filtered_belief(model: GroundedSchema, traj: Trajectory) -> np.ndarray:
    """Posterior over the current state given the whole history (forward message at the end)."""
    obs, acts, seq_bounds = concat(traj, model.n_obs, model.n_actions)
    indptr, indices, data, _ = csr_transitions(np.ascontiguousarray(model.T))
    alpha = np.zeros((len(obs), model.n_states))
    status = K.csr_forward(indptr, indices, data, np.ascontiguousarray(model.E), model.pi,
                           obs, acts, seq_bounds, alpha, np.zeros(len(obs)))
    if status != K.OK:
        raise ZeroProbabilityError(status)
    return alpha[-1].copy()


# --------------------------------------------------------------------------- MAP decoding

def map_decode(model: GroundedSchema, traj: Trajectory, clone_sparse: Optional[bool] = None) -> np.ndarray:
    """Most probable hidden-state sequence; ties go to the lowest state index."""
    obs, acts, _ = concat(traj, model.n_obs, model.n_actions)
    N, Z = len(obs), model.n_states
    T = np.ascontiguousarray(model.T)
    bounds = _use_sparse(model, clone_sparse)
    path = np.empty(N, dtype=np.int64)
    if bounds is not None:
        off = K.clone_offsets(bounds, obs)
        delta = np.zeros(off[-1])
        back = np.zeros(off[-1], dtype=np.int64)
        status = K.sparse_viterbi(T, bounds, model.pi, obs, acts, off, delta, back)
        if status != K.OK:
            raise NoPathError(status, f"no state path explains step {status}")
        last = delta[off[N - 1]:off[N]]
        z = bounds[obs[N - 1]] + int(np.argmax(last))
        for n in range(N - 1, -1, -1):
            path[n] = z
            if n:
                z = back[off[n] + z - bounds[obs[n]]]
    else:
        indptr, indices, data, _ = csr_transitions(T)
        delta = np.zeros((N, Z))
        back = np.zeros((N, Z), dtype=np.int64)
        status = K.csr_viterbi(indptr, indices, data, np.ascontiguousarray(model.E), model.pi,
                               obs, acts, delta, back)
        if status != K.OK:
            raise NoPathError(status, f"no state path explains step {status}")
        z = int(np.argmax(delta[-1]))
        for n in range(N - 1, -1, -1):
            path[n] = z
            z = back[n, z]
    return path


def path_log_prob(model: GroundedSchema, traj: Trajectory, states) -> float:
    """``log`` of the joint probability of a state path and the observations."""
    states = np.asarray(states)
    obs, acts = traj.observations, traj.actions
    with np.errstate(divide="ignore"):
        lp = np.log(model.pi[states[0]]) + np.log(model.E[states, obs]).sum()
        if len(states) > 1:
            lp += np.log(model.T[acts, states[:-1], states[1:]]).sum()
    return float(lp)
