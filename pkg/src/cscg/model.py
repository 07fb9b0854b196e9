"""Model data types for clone-structured cognitive graphs.

Arrays follow one layout throughout the package:

* transitions ``T`` has shape ``(n_actions, n_states, n_states)`` with
  ``T[a, j, k] = P(z_next = k | z = j, action = a)``;
* emissions ``E`` has shape ``(n_states, n_obs)``;
* ``pi`` has shape ``(n_states,)``.

All indices are 0-based.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROW_TOL = 1e-9

MAGIC = b"CSCG"
FORMAT_VERSION = 1

_FLAG_EMISSIONS = 1
_FLAG_PI = 2
_FLAG_CLONES = 4
_FLAG_QUANTIZER = 8


class ModelError(ValueError):
    """Raised when a model is malformed or cannot be loaded."""


class VersionMismatch(ModelError):
    pass


@dataclass(frozen=True)
class CloneStructure:
    """Partition of hidden states into contiguous clone groups."""

    group_of_state: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_of_state, dtype=np.int64)
        if g.ndim != 1 or g.size == 0:
            raise ModelError("clone structure needs at least one state")
        if g[0] != 0 or np.any(np.diff(g) < 0) or np.any(np.diff(g) > 1):
            raise ModelError("clone groups must be contiguous and numbered from 0")
        g.setflags(write=False)
        object.__setattr__(self, "group_of_state", g)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "CloneStructure":
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.size == 0 or np.any(sizes < 1):
            raise ModelError("every clone group must be non-empty")
        return cls(np.repeat(np.arange(sizes.size), sizes))

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_of_state)

    @property
    def n_groups(self) -> int:
        return int(self.group_of_state[-1]) + 1

    @property
    def n_states(self) -> int:
        return int(self.group_of_state.size)

    @property
    def bounds(self) -> np.ndarray:
        """``(n_groups + 1,)`` offsets; group ``k`` is ``bounds[k]:bounds[k+1]``."""
        return np.concatenate([[0], np.cumsum(self.group_sizes)]).astype(np.int64)

    def states_of(self, group: int) -> np.ndarray:
        b = self.bounds
        return np.arange(b[group], b[group + 1])

    def emission_matrix(self, n_obs: Optional[int] = None) -> np.ndarray:
        """Deterministic emission matrix where group ``k`` emits observation ``k``."""
        n_obs = self.n_groups if n_obs is None else n_obs
        if n_obs < self.n_groups:
            raise ModelError("fewer observations than clone groups")
        E = np.zeros((self.n_states, n_obs))
        E[np.arange(self.n_states), self.group_of_state] = 1.0
        return E

    def concat(self, other: "CloneStructure") -> "CloneStructure":
        return CloneStructure(np.concatenate([self.group_of_state,
                                              other.group_of_state + self.n_groups]))

    def __eq__(self, other):
        return (isinstance(other, CloneStructure)
                and np.array_equal(self.group_of_state, other.group_of_state))

    def __hash__(self):
        return hash(self.group_of_state.tobytes())


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UngroundedSchema:
    """Transition tensor, optionally with its clone structure."""

    T: np.ndarray
    clones: Optional[CloneStructure] = None
    name: str = ""
    version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "T", _frozen(self.T))
        if self.T.ndim != 3 or self.T.shape[1] != self.T.shape[2]:
            raise ModelError(f"transition tensor must be (A, Z, Z), got {self.T.shape}")
        if self.clones is not None and self.clones.n_states != self.T.shape[1]:
            raise ModelError("clone structure size does not match transitions")

    @property
    def n_actions(self) -> int:
        return self.T.shape[0]

    @property
    def n_states(self) -> int:
        return self.T.shape[1]


@dataclass(frozen=True, eq=False)
class GroundedSchema:
    """Transitions, clone structure and emission binding, plus the initial distribution."""

    T: np.ndarray
    E: np.ndarray
    clones: CloneStructure
    pi: Optional[np.ndarray] = None
    name: str = ""
    version: int = FORMAT_VERSION
    quantizer: Optional[object] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "T", _frozen(self.T))
        object.__setattr__(self, "E", _frozen(self.E))
        if self.pi is None:
            object.__setattr__(self, "pi", _frozen(np.full(self.T.shape[1], 1.0 / self.T.shape[1])))
        else:
            object.__setattr__(self, "pi", _frozen(self.pi))
        if self.T.ndim != 3 or self.T.shape[1] != self.T.shape[2]:
            raise ModelError(f"transition tensor must be (A, Z, Z), got {self.T.shape}")
        if self.E.ndim != 2 or self.E.shape[0] != self.T.shape[1]:
            raise ModelError("emission matrix rows must match the number of states")
        if self.pi.shape != (self.T.shape[1],):
            raise ModelError("initial distribution has the wrong length")
        if self.clones.n_states != self.T.shape[1]:
            raise ModelError("clone structure size does not match transitions")

    @property
    def n_actions(self) -> int:
        return self.T.shape[0]

    @property
    def n_states(self) -> int:
        return self.T.shape[1]

    @property
    def n_obs(self) -> int:
        return self.E.shape[1]

    def ungrounded(self, keep_clones: bool = True) -> UngroundedSchema:
        return UngroundedSchema(self.T, self.clones if keep_clones else None, name=self.name)

    def replace(self, **changes) -> "GroundedSchema":
        fields = dict(T=self.T, E=self.E, clones=self.clones, pi=self.pi,
                      name=self.name, version=self.version, quantizer=self.quantizer)
        fields.update(changes)
        return GroundedSchema(**fields)

    def is_deterministic(self) -> bool:
        return bool(np.all((self.E == 0) | (self.E == 1)) and np.all(self.E.sum(1) == 1))


@dataclass(frozen=True)
class Trajectory:
    """Observations ``x_0..x_{N-1}`` and the ``N - 1`` actions taken between them."""

    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observations)
        if obs.ndim == 1:
            obs = obs.astype(np.int64)
        else:
            obs = obs.astype(np.float64)
        acts = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if len(obs) == 0:
            raise ModelError("empty trajectory")
        if len(acts) != len(obs) - 1:
            raise ModelError(f"need {len(obs) - 1} actions for {len(obs)} observations, got {len(acts)}")
        obs.setflags(write=False)
        acts.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", acts)

    def __len__(self):
        return len(self.observations)

    @property
    def is_discrete(self) -> bool:
        return self.observations.ndim == 1

    def prefix(self, n: int) -> "Trajectory":
        return Trajectory(self.observations[:n], self.actions[:max(n - 1, 0)])

    def window(self, start: int, stop: int) -> "Trajectory":
        """Observations ``start..stop-1`` with the actions between them."""
        return Trajectory(self.observations[start:stop], self.actions[start:stop - 1])

    def relabel(self, mapping: np.ndarray) -> "Trajectory":
        return Trajectory(np.asarray(mapping)[self.observations], self.actions)


def as_trajectories(traj) -> list:
    if isinstance(traj, Trajectory):
        return [traj]
    out = list(traj)
    if not out:
        raise ModelError("empty trajectory list")
    return out


# --------------------------------------------------------------------------- validation

def _check_stochastic_rows(name, probs, rows_label, out):
    if not np.all(np.isfinite(probs)):
        out.append(f"{name}: non-finite entries")
        return
    bad = np.argwhere((probs < 0) | (probs > 1))
    for idx in bad[:5]:
        out.append(f"{name}: entry {tuple(int(i) for i in idx)} outside [0, 1]")
    sums = probs.sum(-1)
    for idx in np.argwhere(np.abs(sums - 1) > ROW_TOL)[:20]:
        label = tuple(int(i) for i in idx)
        out.append(f"{name}: row {rows_label}={label} sums to {sums[tuple(idx)]:.12g}")


def validate(model) -> list:
    """Return a list of violated invariants (empty when the model is valid)."""
    out = []
    T = np.asarray(model.T)
    if T.shape[0] < 1 or T.shape[1] < 1:
        out.append("transitions: need at least one action and one state")
        return out
    _check_stochastic_rows("transitions", T, "(action, from_state)", out)
    if isinstance(model, GroundedSchema):
        _check_stochastic_rows("emissions", model.E, "(state,)", out)
        pi = model.pi
        if not np.all(np.isfinite(pi)) or np.any(pi < 0) or np.any(pi > 1):
            out.append("initial distribution: entries outside [0, 1]")
        elif abs(pi.sum() - 1) > ROW_TOL:
            out.append(f"initial distribution: sums to {pi.sum():.12g}")
        out.extend(clone_violations(model.E, model.clones))
    return out


def clone_violations(E: np.ndarray, clones: CloneStructure) -> list:
    out = []
    b = clones.bounds
    for k in range(clones.n_groups):
        rows = E[b[k]:b[k + 1]]
        diff = np.nonzero(np.any(rows != rows[0], axis=1))[0]
        for d in diff[:5]:
            out.append(f"clone structure: state {int(b[k] + d)} differs from state {int(b[k])} in group {k}")
    return out


def respects_clones(E: np.ndarray, clones: CloneStructure) -> bool:
    return not clone_violations(E, clones)


def is_row_stochastic(a: np.ndarray, tol: float = ROW_TOL) -> bool:
    return bool(np.all(a >= 0) and np.all(np.abs(a.sum(-1) - 1) <= tol))


# --------------------------------------------------------------------------- construction

def uniform_model(n_actions: int, clones: CloneStructure, n_obs: Optional[int] = None) -> GroundedSchema:
    Z = clones.n_states
    T = np.full((n_actions, Z, Z), 1.0 / Z)
    return GroundedSchema(T, clones.emission_matrix(n_obs), clones)


def random_transitions(n_actions: int, n_states: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform(0, 1) entries, normalized per (action, from-state)."""
    T = rng.random((n_actions, n_states, n_states))
    return T / T.sum(-1, keepdims=True)


def block_diagonal(schemas: Sequence) -> np.ndarray:
    """Stack schema transition tensors along the diagonal of a joint tensor."""
    if not schemas:
        raise ModelError("no schemas given")
    n_actions = {s.T.shape[0] for s in schemas}
    if len(n_actions) != 1:
        raise ModelError(f"schemas disagree on the number of actions: {sorted(n_actions)}")
    A = n_actions.pop()
    Z = sum(s.T.shape[1] for s in schemas)
    T = np.zeros((A, Z, Z))
    off = 0
    for s in schemas:
        z = s.T.shape[1]
        T[:, off:off + z, off:off + z] = s.T
        off += z
    return T


def block_offsets(schemas: Sequence) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([s.T.shape[1] for s in schemas])]).astype(np.int64)


# --------------------------------------------------------------------------- serialization

_HEADER = struct.Struct("<4sHHIIII")  # magic, version, flags, n_actions, n_states, n_obs, n_groups


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def serialize(model) -> bytes:
    """Encode a grounded or ungrounded schema as a versioned little-endian blob."""
    grounded = isinstance(model, GroundedSchema)
    clones = model.clones
    flags = 0
    if grounded:
        flags |= _FLAG_EMISSIONS | _FLAG_PI
    if clones is not None:
        flags |= _FLAG_CLONES
    quantizer = getattr(model, "quantizer", None)
    if quantizer is not None:
        flags |= _FLAG_QUANTIZER
    A, Z, _ = model.T.shape
    n_obs = model.E.shape[1] if grounded else 0
    n_groups = clones.n_groups if clones is not None else 0
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, flags, A, Z, n_obs, n_groups), _pack_str(model.name)]
    if clones is not None:
        parts.append(clones.group_sizes.astype("<u4").tobytes())
    parts.append(np.ascontiguousarray(model.T, dtype="<f8").tobytes())
    if grounded:
        parts.append(np.ascontiguousarray(model.E, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(model.pi, dtype="<f8").tobytes())
    if quantizer is not None:
        K, d = quantizer.centroids.shape
        parts.append(struct.pack("<II", K, d))
        parts.append(np.ascontiguousarray(quantizer.centroids, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(quantizer.priors, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", quantizer.sigma2))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise ModelError(f"truncated payload: need {n} bytes at offset {self.pos}, "
                             f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64 if dtype == "<f8" else np.int64)


def deserialize(data: bytes):
    r = _Reader(data)
    magic, version, flags, A, Z, n_obs, n_groups = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise VersionMismatch(f"bad magic {bytes(magic)!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (name_len,) = struct.unpack("<I", r.take(4))
    name = bytes(r.take(name_len)).decode("utf-8")
    clones = None
    if flags & _FLAG_CLONES:
        sizes = r.array("<u4", (n_groups,))
        if sizes.sum() != Z:
            raise ModelError("clone group table does not sum to the number of states")
        clones = CloneStructure.from_sizes(sizes)
    T = r.array("<f8", (A, Z, Z))
    if flags & _FLAG_EMISSIONS:
        E = r.array("<f8", (Z, n_obs))
        pi = r.array("<f8", (Z,))
        if clones is None:
            raise ModelError("grounded model without clone structure")
        quantizer = None
        if flags & _FLAG_QUANTIZER:
            from .quantizer import Quantizer
            K, d = struct.unpack("<II", r.take(8))
            centroids = r.array("<f8", (K, d))
            priors = r.array("<f8", (K,))
            (sigma2,) = struct.unpack("<d", r.take(8))
            quantizer = Quantizer(centroids, priors, sigma2)
        model = GroundedSchema(T, E, clones, pi, name=name, version=version, quantizer=quantizer)
    else:
        model = UngroundedSchema(T, clones, name=name, version=version)
    if r.pos != len(r.data):
        raise ModelError(f"{len(r.data) - r.pos} trailing bytes after model payload")
    problems = validate(model)
    if problems:
        raise ModelError("invariant failure on load: " + "; ".join(problems[:5]))
    return model


def save(model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def export_edges(T: np.ndarray, threshold: float = 0.0) -> str:
    """Plain-text edge list: ``action from to prob`` per line."""
    lines = []
    for a, j, k in zip(*np.nonzero(T > threshold)):
        lines.append(f"{a} {j} {k} {T[a, j, k]:.17g}")
    return "\n".join(lines) + ("\n" if lines else "")
