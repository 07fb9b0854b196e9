"""Emission learning with transitions held fixed (schema binding).

Messages here are dense over all ``|Z|`` states because a fresh binding gives
every state some probability of every observation. The transition tensor is
walked in compressed-row form, so schemas with few edges per state stay cheap
regardless of their size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .inference import ZeroProbabilityError, concat, csr_transitions
from .learn_t import MATCH_PSEUDOCOUNT, EmOptions
from .model import CloneStructure, GroundedSchema, ModelError, as_trajectories


@dataclass
class Binding:
    E: np.ndarray
    nll: float
    trace: np.ndarray
    model: GroundedSchema


def pool_by_group(x: np.ndarray, clones: CloneStructure) -> np.ndarray:
    """Replace each state's entry (last axis) by the mean over its clone group.

    Averaging rather than summing keeps the total mass per step unchanged; the
    emission update divides by the same pooled denominator either way.
    """
    sums = np.add.reduceat(x, clones.bounds[:-1], axis=-1)
    return np.repeat(sums / clones.group_sizes, clones.group_sizes, axis=-1)


def emission_mstep(ec: np.ndarray, gsum: np.ndarray, pseudocount: float, previous: np.ndarray,
                   clones: Optional[CloneStructure] = None) -> np.ndarray:
    """``E[k, x] = (counts[k, x] + p) / (occupancy[k] + p * n_obs)``; rows with no mass keep ``previous``."""
    if clones is not None:
        ec = pool_by_group(ec.T, clones).T
        gsum = pool_by_group(gsum, clones)
    den = gsum + pseudocount * ec.shape[1]
    E = (ec + pseudocount) / np.where(den > 0, den, 1.0)[:, None]
    return np.where((den > 0)[:, None], E, previous)


class EmissionFitter:
    """Emission EM for one fixed schema, reusable across many walks (e.g. growing prefixes)."""

    def __init__(self, schema, n_obs: int, tie_clones: bool = False, pi: Optional[np.ndarray] = None,
                 opts: Optional[EmOptions] = None):
        if n_obs < 1:
            raise ModelError("n_obs must be positive")
        self.schema = schema
        self.T = np.ascontiguousarray(schema.T, dtype=np.float64)
        self.n_actions, self.n_states = self.T.shape[0], self.T.shape[1]
        self.n_obs = n_obs
        self.opts = opts or EmOptions(pseudocount=MATCH_PSEUDOCOUNT)
        clones = schema.clones
        if tie_clones and clones is None:
            raise ModelError("tie_clones needs a schema with clone structure")
        self.tie = tie_clones
        self.clones = clones if clones is not None else CloneStructure.from_sizes(np.ones(self.n_states, int))
        self.group_of = np.ascontiguousarray(self.clones.group_of_state, dtype=np.int64)
        self.group_size = np.ascontiguousarray(self.clones.group_sizes, dtype=np.float64)
        self.pi = np.full(self.n_states, 1.0 / self.n_states) if pi is None else np.asarray(pi, dtype=np.float64)
        self.indptr, self.indices, self.data, _ = csr_transitions(self.T)

    def fit_arrays(self, obs, acts, seq_bounds, E_init: Optional[np.ndarray] = None):
        """Run EM on already-concatenated data; returns ``(E, trace)``."""
        if len(obs) == 0:
            raise ModelError("empty trajectory")
        o = self.opts
        E = (np.full((self.n_states, self.n_obs), 1.0 / self.n_obs) if E_init is None
             else np.array(E_init, dtype=np.float64))
        trace = np.empty(o.max_iters)
        n = K.emission_em(self.indptr, self.indices, self.data, self.pi, obs, acts, seq_bounds,
                          self.group_of, self.group_size, self.tie, E, o.pseudocount, o.max_iters, o.tol, trace)
        if n < 0:
            raise ZeroProbabilityError(-n - 2)
        return E, trace[:n]

    def fit(self, traj, E_init: Optional[np.ndarray] = None) -> Binding:
        obs, acts, seq_bounds = concat(as_trajectories(traj), self.n_obs, self.n_actions)
        E, trace = self.fit_arrays(obs, acts, seq_bounds, E_init)
        model = GroundedSchema(self.T, E, self.clones, self.pi, name=getattr(self.schema, "name", ""))
        return Binding(E, float(trace.min()), trace, model)


def learn_emissions(schema, traj, n_obs: int, tie_clones: bool = False, opts: Optional[EmOptions] = None,
                    pi: Optional[np.ndarray] = None, E_init: Optional[np.ndarray] = None) -> Binding:
    """Bind a schema to new observations by EM over ``E`` with ``T`` frozen.

    ``E`` starts uniform unless ``E_init`` is given. With ``tie_clones`` the
    posteriors of clones in the same group are pooled, so the returned rows are
    identical within each group. ``pi`` defaults to uniform (unknown starting
    position). The returned binding is the lowest-NLL iterate.
    """
    return EmissionFitter(schema, n_obs, tie_clones, pi, opts).fit(traj, E_init)


def bind(schema, traj, n_obs: int, **kw) -> GroundedSchema:
    return learn_emissions(schema, traj, n_obs, **kw).model
