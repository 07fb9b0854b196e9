"""Transition learning with emissions held fixed: Baum-Welch EM and Viterbi refinement."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .inference import (NoPathError, ZeroProbabilityError, concat, csr_transitions,
                        emission_bounds, map_decode, nll)
from .model import CloneStructure, GroundedSchema, ModelError, as_trajectories, random_transitions

log = logging.getLogger(__name__)

SCHEMA_PSEUDOCOUNT = 2e-3
MATCH_PSEUDOCOUNT = 1e-7


@dataclass
class EmOptions:
    max_iters: int = 100
    pseudocount: float = SCHEMA_PSEUDOCOUNT
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.pseudocount < 0:
            raise ValueError("pseudocount must be >= 0")


@dataclass
class FitResult:
    model: GroundedSchema
    trace: np.ndarray
    converged: bool = False
    info: dict = field(default_factory=dict)


def normalize_counts(counts: np.ndarray, pseudocount: float, previous: np.ndarray) -> np.ndarray:
    """Row-normalize ``counts + pseudocount``; rows with no mass keep ``previous``."""
    c = counts + pseudocount
    tot = c.sum(-1, keepdims=True)
    out = np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), previous)
    return out


class _EStep:
    """Expected transition counts under fixed emissions, reused across EM iterations."""

    def __init__(self, E: np.ndarray, trajs, n_actions: int, clone_sparse: Optional[bool]):
        self.E = np.ascontiguousarray(E, dtype=np.float64)
        self.obs, self.acts, self.seq_bounds = concat(trajs, E.shape[1], n_actions)
        self.N = len(self.obs)
        self.bounds = emission_bounds(self.E)
        if clone_sparse and self.bounds is None:
            raise ModelError("clone-sparse learning needs a deterministic, contiguous emission matrix")
        if clone_sparse is False:
            self.bounds = None
        if self.bounds is not None:
            sizes = np.diff(self.bounds)
            missing = np.unique(self.obs[sizes[self.obs] == 0])
            if missing.size:
                raise ModelError(f"observations without clones: {missing.tolist()}")
            self.off = K.clone_offsets(self.bounds, self.obs)

    def __call__(self, T: np.ndarray, pi: np.ndarray):
        A, Z, _ = T.shape
        T = np.ascontiguousarray(T)
        log_norms = np.zeros(self.N)
        pi_counts = np.zeros(Z)
        if self.bounds is not None:
            alpha = np.zeros(self.off[-1])
            status = K.sparse_forward(T, self.bounds, pi, self.obs, self.acts, self.seq_bounds,
                                      self.off, alpha, log_norms)
            if status != K.OK:
                raise ZeroProbabilityError(status)
            counts = np.zeros((A, Z, Z))
            K.sparse_backward(T, self.bounds, self.obs, self.acts, self.seq_bounds, self.off,
                              alpha, np.zeros(self.off[-1]), counts, pi_counts, True)
        else:
            indptr, indices, data, (ai, ji, ki) = csr_transitions(T)
            alpha = np.zeros((self.N, Z))
            status = K.csr_forward(indptr, indices, data, self.E, pi, self.obs, self.acts,
                                   self.seq_bounds, alpha, log_norms)
            if status != K.OK:
                raise ZeroProbabilityError(status)
            tc = np.zeros(data.size)
            K.csr_backward(indptr, indices, data, self.E, self.obs, self.acts, self.seq_bounds,
                           alpha, np.zeros((self.N, Z)), tc, np.zeros((1, 1)), np.zeros(1),
                           pi_counts, True, False)
            counts = np.zeros((A, Z, Z))
            counts[ai, ji, ki] = tc
        return -log_norms.sum() / self.N, counts, pi_counts


def em_transitions(model: GroundedSchema, traj, opts: EmOptions, clone_sparse: Optional[bool] = None,
                   learn_pi: bool = False, keep_best: bool = True) -> FitResult:
    """Baum-Welch over ``T`` (and optionally ``pi``) starting from ``model``; ``E`` stays fixed.

    Returns the lowest-NLL iterate, or the last one when ``keep_best`` is off.
    """
    trajs = as_trajectories(traj)
    estep = _EStep(model.E, trajs, model.n_actions, clone_sparse)
    T, pi = np.array(model.T), np.array(model.pi)
    n_seq = len(trajs)
    trace = []
    best = (np.inf, T, pi)
    converged = False
    for it in range(opts.max_iters):
        value, counts, pi_counts = estep(T, pi)
        trace.append(value)
        if value < best[0] or not keep_best:
            best = (value, T, pi)
        if it and abs(trace[-2] - value) < opts.tol:
            converged = True
            break
        if it == opts.max_iters - 1:
            break
        T = normalize_counts(counts, opts.pseudocount, T)
        if learn_pi:
            pi = (pi_counts + opts.pseudocount) / (n_seq + opts.pseudocount * len(pi))
    _, T, pi = best
    return FitResult(model.replace(T=T, pi=pi), np.array(trace), converged)


def learn_transitions(traj, clones: CloneStructure, opts: Optional[EmOptions] = None,
                      n_actions: Optional[int] = None, n_obs: Optional[int] = None,
                      clone_sparse: Optional[bool] = True, learn_pi: bool = True, name: str = "") -> FitResult:
    """Learn a CSCG from scratch: clones of observation ``k`` form group ``k``."""
    opts = opts or EmOptions()
    trajs = as_trajectories(traj)
    if n_actions is None:
        n_actions = int(max((t.actions.max() if len(t.actions) else 0) for t in trajs)) + 1
    Z = clones.n_states
    rng = np.random.default_rng(opts.seed)
    E = clones.emission_matrix(n_obs)
    init = GroundedSchema(random_transitions(n_actions, Z, rng), E, clones, name=name)
    return em_transitions(init, trajs, opts, clone_sparse=clone_sparse, learn_pi=learn_pi)


@dataclass
class RefineResult:
    model: GroundedSchema
    iterations: int
    no_path: bool = False
    reverted: bool = False
    trace: list = field(default_factory=list)


def viterbi_refine(model: GroundedSchema, traj, pseudocount: float = SCHEMA_PSEUDOCOUNT,
                   max_iters: int = 20) -> RefineResult:
    """Hard-EM on ``T``: decode, recount transitions along the decoded paths, renormalize."""
    trajs = as_trajectories(traj)
    start_nll = nll(model, trajs)
    current = model
    prev_paths = None
    trace = [start_nll]
    for it in range(max_iters):
        try:
            paths = [map_decode(current, t) for t in trajs]
        except NoPathError as err:
            log.warning("viterbi_refine: no path at step %d; model returned unchanged", err.step)
            return RefineResult(current, it, no_path=True, trace=trace)
        if prev_paths is not None and all(np.array_equal(p, q) for p, q in zip(paths, prev_paths)):
            return RefineResult(current, it, trace=trace)
        counts = np.zeros_like(model.T)
        for t, p in zip(trajs, paths):
            np.add.at(counts, (t.actions, p[:-1], p[1:]), 1.0)
        candidate = current.replace(T=normalize_counts(counts, pseudocount, current.T))
        value = nll(candidate, trajs)
        if value > start_nll + 1e-6:
            return RefineResult(current, it, reverted=True, trace=trace)
        trace.append(value)
        current = candidate
        prev_paths = paths
    return RefineResult(current, max_iters, trace=trace)


# --------------------------------------------------------------------------- shared schema, per-episode bindings

def balance_actions(T: np.ndarray, iters: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Sinkhorn-scale every action matrix towards doubly stochastic.

    For environments whose moves are bijections, this hands a row that has
    never been seen to the states still missing an incoming edge under that
    action, instead of leaving it wherever the initialisation put it.
    """
    T = T.copy()
    for a in range(T.shape[0]):
        m = T[a]
        for _ in range(iters):
            m /= m.sum(0, keepdims=True)
            m /= m.sum(1, keepdims=True)
            if np.abs(m.sum(0) - 1.0).max() < tol:
                break
    return T


def _joint_em(T, Es, data, n_states, n_obs, pseudocount, max_iters, tol, bijective=False):
    """EM over a shared ``T`` and one emission matrix per episode (uniform initial state)."""
    pi = np.full(n_states, 1.0 / n_states)
    trace = []
    n_total = sum(len(d[0]) for d in data)
    for it in range(max_iters):
        indptr, indices, vals, (ai, ji, ki) = csr_transitions(T)
        tc = np.zeros(vals.size)
        total = 0.0
        new_Es = []
        for (obs, acts, sb), E in zip(data, Es):
            alpha = np.zeros((len(obs), n_states))
            log_norms = np.zeros(len(obs))
            status = K.csr_forward(indptr, indices, vals, E, pi, obs, acts, sb, alpha, log_norms)
            if status != K.OK:
                raise ZeroProbabilityError(status)
            ec = np.zeros((n_states, n_obs))
            K.csr_backward(indptr, indices, vals, E, obs, acts, sb, alpha, np.zeros_like(alpha),
                           tc, ec, np.zeros(n_states), np.zeros(n_states), True, True)
            total -= log_norms.sum()
            new_Es.append(normalize_counts(ec, MATCH_PSEUDOCOUNT, E))
        trace.append(total / n_total)
        if (it and abs(trace[-2] - trace[-1]) < tol) or it == max_iters - 1:
            break
        counts = np.zeros_like(T)
        counts[ai, ji, ki] = tc
        T = normalize_counts(counts, pseudocount, T)
        if bijective:
            T = balance_actions(T)
        Es = new_Es
    return T, Es, trace


def learn_shared_schema(episodes: Sequence, n_states: int, n_obs: int, n_actions: int,
                        opts: Optional[EmOptions] = None, align_iters: int = 50,
                        passes: int = 2, bijective: bool = False) -> FitResult:
    """One transition tensor shared by episodes whose observation labels are reshuffled each time.

    The tensor is bootstrapped from the first episode (clones split evenly over
    observations). Each further episode is aligned by binding its emission
    matrix under the current tensor, trying every state as the episode's start
    and keeping the best fit; then the tensor and all bindings are re-fit
    jointly. Further ``passes`` re-align every episode against the final
    tensor. Per-episode emissions are returned in ``info['emissions']``.

    Likelihood alone cannot fill a transition no aligned episode has crossed,
    and later episodes tend to be aligned around that gap. With ``bijective``
    each action's matrix is balanced after every update (see
    ``balance_actions``), which closes such gaps when moves are invertible.
    """
    from .learn_e import learn_emissions
    from .model import UngroundedSchema

    opts = opts or EmOptions()
    episodes = [as_trajectories(ep) for ep in episodes]
    data = [concat(ep, n_obs, n_actions) for ep in episodes]
    sizes = np.full(n_obs, n_states // n_obs)
    sizes[: n_states % n_obs] += 1
    first = learn_transitions(episodes[0], CloneStructure.from_sizes(sizes), opts, n_actions, n_obs, learn_pi=False)
    T = balance_actions(first.model.T) if bijective else first.model.T
    Es = [first.model.E]
    trace = list(first.trace)
    bind_opts = EmOptions(max_iters=align_iters, pseudocount=MATCH_PSEUDOCOUNT)

    def align(k):
        schema = UngroundedSchema(T)
        best = None
        for s in range(n_states):
            anchor = np.zeros(n_states)
            anchor[s] = 1.0
            try:
                b = learn_emissions(schema, episodes[k], n_obs, opts=bind_opts, pi=anchor)
            except ZeroProbabilityError:
                continue
            if best is None or b.nll < best.nll:
                best = b
        return best.E

    for k in range(1, len(episodes)):
        Es.append(align(k))
        T, Es, tr = _joint_em(T, Es, data[: k + 1], n_states, n_obs, opts.pseudocount, opts.max_iters, opts.tol,
                              bijective)
        trace.extend(tr)
    # episodes aligned early saw a partial tensor; align them all again against the final one
    for _ in range(passes - 1):
        Es = [align(k) for k in range(len(episodes))]
        T, Es, tr = _joint_em(T, Es, data, n_states, n_obs, opts.pseudocount, opts.max_iters, opts.tol,
                              bijective)
        trace.extend(tr)
    clones = CloneStructure.from_sizes(np.ones(n_states, dtype=int))
    model = GroundedSchema(T, Es[0], clones)
    return FitResult(model, np.array(trace), info={"emissions": Es})
