"""Stitching known schemas into a prior for a larger environment, then learning it from one walk."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import yaml

from .learn_e import learn_emissions
from .learn_t import MATCH_PSEUDOCOUNT, SCHEMA_PSEUDOCOUNT, EmOptions, FitResult, em_transitions, viterbi_refine
from .model import CloneStructure, GroundedSchema, ModelError, UngroundedSchema, block_diagonal, block_offsets


@dataclass(frozen=True)
class FrontierSpec:
    """Where a schema can be left (``(state, action)`` exits) and entered (``entries``)."""

    exits: tuple = ()
    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "exits", tuple((int(s), int(a)) for s, a in self.exits))
        object.__setattr__(self, "entries", tuple(int(s) for s in self.entries))

    def check(self, schema) -> None:
        Z, A = schema.n_states, schema.n_actions
        for s, a in self.exits:
            if not (0 <= s < Z and 0 <= a < A):
                raise ModelError(f"exit {(s, a)} out of range for a schema with {Z} states and {A} actions")
        for s in self.entries:
            if not 0 <= s < Z:
                raise ModelError(f"entry state {s} out of range for a schema with {Z} states")

    def to_dict(self) -> dict:
        return {"exits": [list(e) for e in self.exits], "entries": list(self.entries)}

    @classmethod
    def from_dict(cls, d: dict) -> "FrontierSpec":
        return cls(tuple(tuple(e) for e in d.get("exits", ())), tuple(d.get("entries", ())))


FRONTIER_FORMAT = "cscg-frontiers/1"


def frontiers_to_text(named: dict) -> str:
    """``{schema name: FrontierSpec}`` as versioned YAML."""
    body = {name: fr.to_dict() for name, fr in named.items()}
    return yaml.safe_dump({"format": FRONTIER_FORMAT, "schemas": body}, sort_keys=False)


def frontiers_from_text(text: str) -> dict:
    d = yaml.safe_load(text)
    if not isinstance(d, dict) or d.get("format") != FRONTIER_FORMAT:
        raise ModelError(f"expected a document with format {FRONTIER_FORMAT!r}")
    return {name: FrontierSpec.from_dict(v or {}) for name, v in (d.get("schemas") or {}).items()}


def build_prior(schemas: Sequence, frontiers: Sequence[FrontierSpec], name: str = "") -> UngroundedSchema:
    """Block-diagonal joint tensor whose exit rows lead uniformly to every other schema's entries.

    The row of an exit ``(s, a)`` loses its in-block mass for action ``a``; the
    agent is declared to leave the schema there.
    """
    if len(schemas) != len(frontiers):
        raise ModelError("need one frontier spec per schema")
    for sch, fr in zip(schemas, frontiers):
        fr.check(sch)
    T = block_diagonal(schemas)
    offsets = block_offsets(schemas)
    entries = [offsets[i] + np.array(fr.entries, dtype=np.int64) for i, fr in enumerate(frontiers)]
    for i, fr in enumerate(frontiers):
        targets = np.concatenate([e for j, e in enumerate(entries) if j != i] or [np.zeros(0, np.int64)])
        targets = np.unique(targets)
        for s, a in fr.exits:
            if targets.size == 0:
                raise ModelError(f"exit {(s, a)} of schema {i} has no entry state in any other schema")
            row = offsets[i] + s
            T[a, row, :] = 0.0
            T[a, row, targets] = 1.0 / targets.size
    clones = None
    if all(getattr(s, "clones", None) is not None for s in schemas):
        clones = schemas[0].clones
        for s in schemas[1:]:
            clones = clones.concat(s.clones)
    return UngroundedSchema(T, clones, name=name)


def learn_composed(prior: UngroundedSchema, traj, n_obs: int, opts: Optional[EmOptions] = None,
                   emission_opts: Optional[EmOptions] = None, tie_clones: bool = False,
                   refine_iters: int = 20) -> FitResult:
    """Three phases on one walk: bind ``E`` under the prior, re-fit ``T`` with ``E`` fixed, then hard-EM.

    The transition phase keeps its final iterate even when the prior itself
    scored better, so prior edges the walk never used decay to the pseudocount.
    Per-phase NLL traces are returned in ``info``.
    """
    opts = opts or EmOptions(pseudocount=SCHEMA_PSEUDOCOUNT)
    emission_opts = emission_opts or EmOptions(pseudocount=MATCH_PSEUDOCOUNT, max_iters=opts.max_iters)
    binding = learn_emissions(prior, traj, n_obs, tie_clones=tie_clones, opts=emission_opts)
    clones = prior.clones or CloneStructure.from_sizes(np.ones(prior.n_states, dtype=int))
    bound = GroundedSchema(prior.T, binding.E, clones, name=prior.name)
    fitted = em_transitions(bound, traj, opts, clone_sparse=False, keep_best=False)
    refined = viterbi_refine(fitted.model, traj, pseudocount=opts.pseudocount, max_iters=refine_iters)
    info = {"emission_trace": binding.trace, "transition_trace": fitted.trace,
            "refine_trace": np.array(refined.trace), "refine_reverted": refined.reverted,
            "refine_no_path": refined.no_path}
    return FitResult(refined.model, fitted.trace, fitted.converged, info)
