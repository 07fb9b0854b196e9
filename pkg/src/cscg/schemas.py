"""Schema libraries and likelihood-based schema matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .inference import ZeroProbabilityError, concat, map_decode
from .learn_e import EmissionFitter
from .learn_t import MATCH_PSEUDOCOUNT, EmOptions
from .model import CloneStructure, GroundedSchema, ModelError, Trajectory, UngroundedSchema, as_trajectories

DEFAULT_MARGIN = 0.05


class SchemaLibrary:
    """Named, ungrounded schemas sharing one action alphabet."""

    def __init__(self, entries: Sequence = ()):
        self._entries: tuple = ()
        for e in entries:
            self._entries = self._checked_append(e)

    def _checked_append(self, schema) -> tuple:
        if isinstance(schema, GroundedSchema):
            schema = schema.ungrounded(keep_clones=True)
        if not schema.name:
            raise ModelError("library entries need a name")
        if schema.name in self.names:
            raise ModelError(f"duplicate schema name {schema.name!r}")
        if self._entries and schema.n_actions != self._entries[0].n_actions:
            raise ModelError(f"schema {schema.name!r} has {schema.n_actions} actions, "
                             f"library uses {self._entries[0].n_actions}")
        return self._entries + (schema,)

    def add(self, schema) -> "SchemaLibrary":
        lib = SchemaLibrary()
        lib._entries = self._checked_append(schema)
        return lib

    @property
    def names(self) -> list:
        return [e.name for e in self._entries]

    @property
    def n_actions(self) -> int:
        return self._entries[0].n_actions

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[UngroundedSchema]:
        return iter(self._entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            for e in self._entries:
                if e.name == key:
                    return e
            raise KeyError(key)
        return self._entries[key]

    def without_clones(self) -> "SchemaLibrary":
        return SchemaLibrary([UngroundedSchema(e.T, None, e.name) for e in self._entries])


@dataclass
class MatchReport:
    names: list
    steps: np.ndarray           # prefix length at each evaluation
    nll: np.ndarray             # (n_schemas, n_evals), +inf where the prefix is impossible
    winner: str
    decision_step: Optional[int]
    ties: list = field(default_factory=list)

    @property
    def decided(self) -> bool:
        return self.decision_step is not None

    def rows(self):
        """``(step, schema, nll)`` in evaluation order, for CSV export."""
        for t, step in enumerate(self.steps):
            for i, name in enumerate(self.names):
                yield int(step), name, float(self.nll[i, t])


def decision_index(nll: np.ndarray, winner: int, margin: float) -> Optional[int]:
    """Evaluation index at which ``winner`` is settled, or None.

    The winner must beat every other schema by ``margin`` at two consecutive
    evaluations and at every evaluation after them; the second of the two is
    the decision point. A single schema is decided at the first evaluation.
    """
    n_schemas, n_evals = nll.shape
    if n_schemas == 1:
        return 0 if n_evals else None
    others = np.delete(nll, winner, axis=0).min(0)
    with np.errstate(invalid="ignore"):
        leads = (others - nll[winner] >= margin) & np.isfinite(nll[winner])
    if not leads[-1]:
        return None
    # start of the final run of leading evaluations
    start = n_evals - 1
    while start > 0 and leads[start - 1]:
        start -= 1
    if n_evals - start < 2:
        return None
    return start + 1


def match(library: SchemaLibrary, traj: Trajectory, n_obs: int, tie_clones: bool = True,
          eval_interval: int = 5, margin: float = DEFAULT_MARGIN, opts: Optional[EmOptions] = None,
          max_steps: Optional[int] = None) -> MatchReport:
    """Rank schemas by the NLL of growing walk prefixes after binding each one from scratch.

    Every ``eval_interval`` steps (up to ``max_steps``) each schema's emission
    matrix is re-learned from uniform on the prefix. The winner has the lowest
    NLL on the last prefix; ``decision_step`` is when it became settled.
    """
    if len(library) == 0:
        raise ModelError("empty schema library")
    if len(traj) == 0:
        raise ModelError("empty trajectory")
    if eval_interval < 1:
        raise ModelError("eval_interval must be >= 1")
    opts = opts or EmOptions(pseudocount=MATCH_PSEUDOCOUNT)
    obs, acts, _ = concat(traj, n_obs, library.n_actions)
    N = len(obs) if max_steps is None else min(len(obs), max_steps)
    steps = np.arange(eval_interval, N + 1, eval_interval)
    if steps.size == 0 or steps[-1] != N:
        steps = np.append(steps, N)
    fitters = [EmissionFitter(s, n_obs, tie_clones and s.clones is not None, opts=opts) for s in library]
    nll = np.full((len(library), len(steps)), np.inf)
    for t, n in enumerate(steps):
        o, a = obs[:n], acts[:n].copy()
        sb = np.array([0, n], dtype=np.int64)
        for i, f in enumerate(fitters):
            try:
                _, trace = f.fit_arrays(o, a, sb)
                nll[i, t] = trace.min()
            except ZeroProbabilityError:
                pass
    final = nll[:, -1]
    winner = int(np.argmin(final))
    ties = [library.names[i] for i in np.nonzero(final == final[winner])[0] if i != winner]
    d = decision_index(nll, winner, margin)
    return MatchReport(library.names, steps, nll, library.names[winner],
                       None if d is None else int(steps[d]), ties)


def prune_transitions(T: np.ndarray, threshold: float) -> np.ndarray:
    """Drop edges below ``threshold`` and renormalize; a row left empty becomes a self-loop."""
    T = np.where(T >= threshold, T, 0.0)
    a_idx, s_idx = np.nonzero(T.sum(-1) == 0)
    T[a_idx, s_idx, s_idx] = 1.0
    return T / T.sum(-1, keepdims=True)


def extract_schema(model: GroundedSchema, traj, name: str = "", prune: float = 1e-3) -> UngroundedSchema:
    """Strip a learned model down to a reusable schema.

    Clones never visited by the decoded training walk are dropped, edges below
    ``prune`` are removed and rows renormalized. The clone grouping of the
    surviving states is kept; groups left empty disappear.
    """
    used = np.zeros(model.n_states, dtype=bool)
    for t in as_trajectories(traj):
        used[map_decode(model, t)] = True
    keep = np.nonzero(used)[0]
    T = prune_transitions(model.T[:, keep][:, :, keep], prune)
    groups = model.clones.group_of_state[keep]
    _, dense = np.unique(groups, return_inverse=True)
    return UngroundedSchema(T, CloneStructure(dense), name=name or model.name)


# --------------------------------------------------------------------------- sliding window

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    z = np.where(np.isnan(z), -np.inf, z)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class WindowReport:
    names: list
    steps: np.ndarray            # index n of the last observation in each window
    log_likelihood: np.ndarray   # (n_windows, n_schemas) total window log-likelihood
    probs: np.ndarray            # (n_windows, n_schemas)

    @property
    def selected(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)   # first maximum wins ties

    def labels_per_step(self, n_steps: int) -> np.ndarray:
        """Selected schema for every step, taken from the latest window ending at or before it."""
        idx = np.searchsorted(self.steps, np.arange(n_steps), side="right") - 1
        out = np.full(n_steps, -1)
        ok = idx >= 0
        out[ok] = self.selected[idx[ok]]
        return out


def sliding_window_match(library: SchemaLibrary, traj: Trajectory, n_obs: int, window: int = 200,
                         stride: int = 1, tie_clones: bool = True, temperature: float = 1.0,
                         opts: Optional[EmOptions] = None) -> WindowReport:
    """Soft schema selection along a walk from windowed bindings.

    For each window of ``window`` observations (ending every ``stride`` steps)
    every schema is bound from scratch; the window's total log-likelihoods go
    through a softmax.
    """
    if len(library) == 0:
        raise ModelError("empty schema library")
    if window < 1 or window > len(traj):
        raise ModelError(f"window {window} does not fit a walk of length {len(traj)}")
    opts = opts or EmOptions(pseudocount=MATCH_PSEUDOCOUNT)
    obs, acts, _ = concat(traj, n_obs, library.n_actions)
    fitters = [EmissionFitter(s, n_obs, tie_clones and s.clones is not None, opts=opts) for s in library]
    ends = np.arange(window - 1, len(obs), stride)
    L = np.full((len(ends), len(library)), -np.inf)
    sb = np.array([0, window], dtype=np.int64)
    for w, n in enumerate(ends):
        o = obs[n - window + 1:n + 1]
        a = acts[n - window + 1:n + 1].copy()
        for i, f in enumerate(fitters):
            try:
                _, trace = f.fit_arrays(o, a, sb)
                L[w, i] = -trace.min() * window
            except ZeroProbabilityError:
                pass
    return WindowReport(library.names, ends, L, softmax(L / temperature, axis=1))
