"""Deterministic gridworld simulators and their exact CSCG models.

Every environment is reduced to a :class:`GridWorld`: a finite set of states
(cells, or cell-heading pairs for the egocentric variant), a next-state table
per action, and an observation per state. ``step`` is a table lookup, so it is
a pure function of (state, action).

Allocentric actions are ``0=up, 1=down, 2=left, 3=right``. A move into a
blocked cell or off the grid leaves the agent in place unless the room's
topology wraps that edge.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .model import CloneStructure, GroundedSchema, Trajectory

UP, DOWN, LEFT, RIGHT = range(4)
ACTION_NAMES = ("up", "down", "left", "right")
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])
FORWARD, TURN_LEFT, TURN_RIGHT = range(3)
TOPOLOGIES = ("plane", "cylinder", "torus")


class EnvironmentError_(ValueError):
    pass


# --------------------------------------------------------------------------- room specs

@dataclass(frozen=True, eq=False)
class RoomSpec:
    layout: np.ndarray
    topology: str = "plane"
    name: str = ""
    size_class: str = ""
    observation_map: Optional[np.ndarray] = None

    def __post_init__(self):
        layout = np.array(self.layout, dtype=bool)
        if layout.ndim != 2 or not layout.any():
            raise EnvironmentError_("room layout needs at least one accessible cell")
        if self.topology not in TOPOLOGIES:
            raise EnvironmentError_(f"unknown topology {self.topology!r}")
        layout.setflags(write=False)
        object.__setattr__(self, "layout", layout)
        obs = aliased_observation_map(layout) if self.observation_map is None else np.array(self.observation_map)
        if obs.shape != layout.shape:
            raise EnvironmentError_("observation map shape differs from layout")
        symbols = np.unique(obs[layout])
        if symbols[0] != 0 or not np.array_equal(symbols, np.arange(symbols.size)):
            raise EnvironmentError_("observation symbols must be contiguous from 0")
        obs = np.where(layout, obs, -1)
        obs.setflags(write=False)
        object.__setattr__(self, "observation_map", obs)

    @property
    def wraps(self):
        return self.topology in ("cylinder", "torus"), self.topology == "torus"


def wall_pattern(blocked: np.ndarray) -> np.ndarray:
    """4-bit code per cell from ``blocked[..., action]`` (bit ``a`` set when move ``a`` is blocked)."""
    return (blocked * (1 << np.arange(4))).sum(-1)


def _relabel(codes: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.full(codes.shape, -1, dtype=np.int64)
    uniq = np.unique(codes[mask])
    out[mask] = np.searchsorted(uniq, codes[mask])
    return out


def aliased_observation_map(layout: np.ndarray) -> np.ndarray:
    """Observation per cell from which of its four sides face a wall or the grid edge.

    Interior cells all share one symbol; edges and corners get position-type
    symbols (a plain rectangle has 9). Symbols are renumbered from 0 in the
    order of their wall codes.
    """
    layout = np.asarray(layout, dtype=bool)
    H, W = layout.shape
    padded = np.pad(layout, 1, constant_values=False)
    blocked = np.stack([~padded[1 + dr:1 + dr + H, 1 + dc:1 + dc + W] for dr, dc in MOVES], -1)
    return _relabel(wall_pattern(blocked), layout)


def rectangle(h: int, w: int, **kw) -> RoomSpec:
    return RoomSpec(np.ones((h, w), bool), **kw)


def square_with_hole(side: int, hole: int, **kw) -> RoomSpec:
    layout = np.ones((side, side), bool)
    lo = (side - hole) // 2
    layout[lo:lo + hole, lo:lo + hole] = False
    return RoomSpec(layout, **kw)


def u_shape(h: int, w: int, notch_w: int, notch_h: int, **kw) -> RoomSpec:
    layout = np.ones((h, w), bool)
    lo = (w - notch_w) // 2
    layout[:notch_h, lo:lo + notch_w] = False
    return RoomSpec(layout, **kw)


ROOM_KINDS = ("rectangle", "cylinder", "torus", "square_hole", "u_shape")
SIZE_CLASSES = ("small", "medium", "large")

_RECT_SIZES = {"small": (4, 7), "medium": (5, 8), "large": (6, 9)}
_HOLE_SIZES = {"small": (6, 2), "medium": (7, 3), "large": (8, 4)}
_U_SIZES = {"small": (6, 6, 2, 3), "medium": (7, 7, 3, 4), "large": (8, 8, 4, 5)}


def standard_room(kind: str, size: str = "medium") -> RoomSpec:
    """One of the five room types in one of three sizes (comparable cell counts per size)."""
    name = f"{kind}-{size}"
    if kind in ("rectangle", "cylinder", "torus"):
        topology = {"rectangle": "plane"}.get(kind, kind)
        return rectangle(*_RECT_SIZES[size], topology=topology, name=name, size_class=size)
    if kind == "square_hole":
        return square_with_hole(*_HOLE_SIZES[size], name=name, size_class=size)
    if kind == "u_shape":
        return u_shape(*_U_SIZES[size], name=name, size_class=size)
    raise EnvironmentError_(f"unknown room kind {kind!r}")


# --------------------------------------------------------------------------- text format

ROOM_FORMAT = "cscg-room/1"
COMPOSED_FORMAT = "cscg-composed/1"


def _room_dict(spec: RoomSpec) -> dict:
    d = {"name": spec.name, "topology": spec.topology, "size_class": spec.size_class,
         "layout": ["".join("." if c else "#" for c in row) for row in spec.layout]}
    if not np.array_equal(spec.observation_map, np.where(spec.layout, aliased_observation_map(spec.layout), -1)):
        d["observations"] = [[int(v) for v in row] for row in spec.observation_map]
    return d


def _room_from_dict(d: dict) -> RoomSpec:
    rows = d.get("layout")
    if not rows or len({len(r) for r in rows}) != 1 or set("".join(rows)) - {".", "#"}:
        raise EnvironmentError_("layout must be equal-length rows of '.' (open) and '#' (blocked)")
    layout = np.array([[c == "." for c in r] for r in rows])
    obs = d.get("observations")
    return RoomSpec(layout, d.get("topology", "plane"), d.get("name", ""), d.get("size_class", ""),
                    None if obs is None else np.where(layout, np.array(obs), -1))


def room_to_text(spec: RoomSpec) -> str:
    """YAML with a format tag, header fields and the grid as text rows (``.`` open, ``#`` blocked)."""
    return yaml.safe_dump({"format": ROOM_FORMAT, **_room_dict(spec)}, sort_keys=False)


def _load_tagged(text: str, tag: str) -> dict:
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise EnvironmentError_(f"not valid YAML: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != tag:
        raise EnvironmentError_(f"expected a document with format {tag!r}")
    return d


def room_from_text(text: str) -> RoomSpec:
    return _room_from_dict(_load_tagged(text, ROOM_FORMAT))


# --------------------------------------------------------------------------- bitmaps

def parse_pbm(text: str) -> np.ndarray:
    """Plain PBM (``P1``); ``1`` pixels are accessible."""
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P1":
        raise EnvironmentError_("not a plain PBM (P1) file")
    w, h = int(tokens[1]), int(tokens[2])
    bits = "".join(tokens[3:])
    if len(bits) != w * h or set(bits) - {"0", "1"}:
        raise EnvironmentError_("PBM payload does not match its header")
    return np.array([c == "1" for c in bits], dtype=bool).reshape(h, w)


def load_bitmap(path, **kw) -> RoomSpec:
    layout = parse_pbm(Path(path).read_text())
    kw.setdefault("name", Path(path).stem)
    return RoomSpec(layout, **kw)


def bitmap_rooms() -> list:
    """The ten digit-shaped rooms shipped with the package, in digit order."""
    base = resources.files("cscg") / "data" / "bitmaps"
    rooms = []
    for d in range(10):
        text = (base / f"digit_{d}.pbm").read_text()
        rooms.append(RoomSpec(parse_pbm(text), name=f"digit_{d}"))
    return rooms


# --------------------------------------------------------------------------- gridworld

@dataclass(eq=False)
class GridWorld:
    """Finite deterministic environment: ``next_state[s, a]`` and ``obs[s]``."""

    next_state: np.ndarray
    obs: np.ndarray
    coords: np.ndarray                  # (S, 2) grid position of each state
    name: str = ""
    room_of_state: Optional[np.ndarray] = None
    heading: Optional[np.ndarray] = None
    shape: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.obs = np.asarray(self.obs, dtype=np.int64)
        if self.room_of_state is None:
            self.room_of_state = np.zeros(len(self.obs), dtype=np.int64)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    @property
    def n_obs(self) -> int:
        return int(self.obs.max()) + 1

    def step(self, state: int, action: int):
        if not 0 <= action < self.n_actions:
            raise EnvironmentError_(f"invalid action {action}")
        s = int(self.next_state[state, action])
        return s, int(self.obs[s])

    def state_at(self, row: int, col: int, heading: int = 0) -> int:
        hits = np.nonzero((self.coords[:, 0] == row) & (self.coords[:, 1] == col))[0]
        if hits.size == 0:
            raise EnvironmentError_(f"no accessible cell at {(row, col)}")
        if self.heading is not None:
            hits = hits[self.heading[hits] == heading]
        return int(hits[0])

    def rollout(self, start: int, actions: Sequence[int]):
        states = np.empty(len(actions) + 1, dtype=np.int64)
        states[0] = start
        for i, a in enumerate(actions):
            states[i + 1] = self.next_state[states[i], a]
        return Trajectory(self.obs[states], np.asarray(actions, dtype=np.int64)), states

    def random_walk(self, n_steps: int, rng: np.random.Generator, start: Optional[int] = None):
        """``n_steps`` observations under uniformly random actions."""
        if start is None:
            start = int(rng.integers(self.n_states))
        actions = rng.integers(self.n_actions, size=max(n_steps - 1, 0))
        return self.rollout(start, actions)

    def distances_from(self, state: int) -> np.ndarray:
        """BFS step counts from ``state`` (``-1`` where unreachable)."""
        dist = np.full(self.n_states, -1, dtype=np.int64)
        dist[state] = 0
        queue = deque([state])
        while queue:
            s = queue.popleft()
            for t in self.next_state[s]:
                if dist[t] < 0:
                    dist[t] = dist[s] + 1
                    queue.append(t)
        return dist

    def is_connected(self) -> bool:
        return bool(np.all(self.distances_from(0) >= 0))

    def manhattan(self, s: int, t: int) -> int:
        d = np.abs(self.coords[s] - self.coords[t])
        if self.shape and self.meta.get("wrap"):
            wrap_r, wrap_c = self.meta["wrap"]
            H, W = self.shape
            if wrap_r:
                d[0] = min(d[0], H - d[0])
            if wrap_c:
                d[1] = min(d[1], W - d[1])
        return int(d.sum())

    def permuted(self, rng: np.random.Generator):
        """Same world with observation symbols relabeled by a random bijection."""
        sigma = rng.permutation(self.n_obs)
        world = GridWorld(self.next_state, sigma[self.obs], self.coords, self.name + "-perm",
                          self.room_of_state, self.heading, self.shape, dict(self.meta))
        return world, sigma


def permute_observations(world: GridWorld, seed: int):
    return world.permuted(np.random.default_rng(seed))


def make_world(spec: RoomSpec) -> GridWorld:
    layout = spec.layout
    H, W = layout.shape
    cells = np.argwhere(layout)
    index = np.full(layout.shape, -1, dtype=np.int64)
    index[cells[:, 0], cells[:, 1]] = np.arange(len(cells))
    wrap_r, wrap_c = spec.wraps
    nxt = np.empty((len(cells), 4), dtype=np.int64)
    for i, (r, c) in enumerate(cells):
        for a, (dr, dc) in enumerate(MOVES):
            rr, cc = r + dr, c + dc
            if wrap_r:
                rr %= H
            if wrap_c:
                cc %= W
            inside = 0 <= rr < H and 0 <= cc < W
            nxt[i, a] = index[rr, cc] if inside and layout[rr, cc] else i
    world = GridWorld(nxt, spec.observation_map[cells[:, 0], cells[:, 1]], cells, spec.name,
                      shape=(H, W), meta={"wrap": (wrap_r, wrap_c), "topology": spec.topology})
    if not world.is_connected():
        raise EnvironmentError_(f"room {spec.name!r} has unreachable cells")
    return world


def egocentric(world: GridWorld) -> GridWorld:
    """Heading-aware variant: states are (cell, heading); actions forward / turn left / turn right.

    Headings run clockwise ``0=up, 1=right, 2=down, 3=left``. The observation
    is the wall pattern seen relative to the heading (front, right, back, left).
    """
    n = world.n_states
    compass = np.array([UP, RIGHT, DOWN, LEFT])
    blocked = np.stack([world.next_state[:, a] == np.arange(n) for a in range(4)], -1)
    S = 4 * n
    nxt = np.empty((S, 3), dtype=np.int64)
    codes = np.empty(S, dtype=np.int64)
    for c in range(n):
        for h in range(4):
            s = 4 * c + h
            nxt[s, FORWARD] = 4 * world.next_state[c, compass[h]] + h
            nxt[s, TURN_LEFT] = 4 * c + (h - 1) % 4
            nxt[s, TURN_RIGHT] = 4 * c + (h + 1) % 4
            rel = [blocked[c, compass[(h + k) % 4]] for k in range(4)]
            codes[s] = sum(int(b) << k for k, b in enumerate(rel))
    obs = _relabel(codes, np.ones(S, bool))
    return GridWorld(nxt, obs, np.repeat(world.coords, 4, axis=0), world.name + "-ego",
                     np.repeat(world.room_of_state, 4), np.tile(np.arange(4), n), world.shape, dict(world.meta))


# --------------------------------------------------------------------------- composition

@dataclass(frozen=True)
class Door:
    """Passage between cell ``cell_a`` of room ``room_a`` and ``cell_b`` of ``room_b`` (local coords)."""

    room_a: int
    cell_a: tuple
    room_b: int
    cell_b: tuple


@dataclass(frozen=True, eq=False)
class ComposedSpec:
    rooms: tuple
    offsets: tuple
    doors: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.rooms) != len(self.offsets):
            raise EnvironmentError_("one offset per room")
        occupied = {}
        for i, (room, (r0, c0)) in enumerate(zip(self.rooms, self.offsets)):
            if room.topology != "plane":
                raise EnvironmentError_("only plane rooms can be composed")
            for r, c in np.argwhere(room.layout):
                key = (r + r0, c + c0)
                if key in occupied:
                    raise EnvironmentError_(f"rooms {occupied[key]} and {i} overlap at {key}")
                occupied[key] = i
        for d in self.doors:
            for room, cell in ((d.room_a, d.cell_a), (d.room_b, d.cell_b)):
                if not self.rooms[room].layout[cell]:
                    raise EnvironmentError_(f"door cell {cell} of room {room} is blocked")
            ga = np.add(self.offsets[d.room_a], d.cell_a)
            gb = np.add(self.offsets[d.room_b], d.cell_b)
            if np.abs(ga - gb).sum() != 1:
                raise EnvironmentError_(f"door cells {tuple(ga)} and {tuple(gb)} are not adjacent")


def side_by_side(a: RoomSpec, b: RoomSpec, door_rows: Optional[Iterable[int]] = None, name: str = "") -> ComposedSpec:
    """Place ``b`` immediately right of ``a``'s rightmost accessible column, joined by one door.

    Without ``door_rows`` the door goes on a row pair where both facing
    columns are open, shifting ``b`` vertically as little as possible (middle
    candidate among equals). ``door_rows`` gives rows of ``a`` to join with
    the same rows of ``b`` without a shift.
    """
    col_a = int(np.nonzero(a.layout.any(0))[0].max())
    col_b = int(np.nonzero(b.layout.any(0))[0].min())
    open_a = np.nonzero(a.layout[:, col_a])[0]
    open_b = np.nonzero(b.layout[:, col_b])[0]
    if door_rows is not None:
        door_rows = list(door_rows)
        pairs = [(r, r) for r in door_rows]
        shift = 0
    else:
        candidates = sorted(((ra - rb, ra, rb) for ra in open_a for rb in open_b), key=lambda c: (abs(c[0]), c))
        shift = candidates[0][0]
        same = [c for c in candidates if c[0] == shift]
        pairs = [same[len(same) // 2][1:]]
    top_a, top_b = max(0, -shift), max(0, shift)
    doors = tuple(Door(0, (ra, col_a), 1, (rb, col_b)) for ra, rb in pairs)
    offsets = ((top_a, 0), (top_b, col_a + 1 - col_b))
    return ComposedSpec((a, b), offsets, doors, name or f"{a.name}+{b.name}")


def composed_to_text(spec: ComposedSpec) -> str:
    doors = [{"room_a": d.room_a, "cell_a": list(map(int, d.cell_a)), "room_b": d.room_b,
              "cell_b": list(map(int, d.cell_b))} for d in spec.doors]
    return yaml.safe_dump({"format": COMPOSED_FORMAT, "name": spec.name,
                           "rooms": [_room_dict(r) for r in spec.rooms],
                           "offsets": [list(map(int, o)) for o in spec.offsets], "doors": doors}, sort_keys=False)


def composed_from_text(text: str) -> ComposedSpec:
    d = _load_tagged(text, COMPOSED_FORMAT)
    try:
        rooms = tuple(_room_from_dict(r) for r in d["rooms"])
        doors = tuple(Door(x["room_a"], tuple(x["cell_a"]), x["room_b"], tuple(x["cell_b"])) for x in d["doors"])
        offsets = tuple(tuple(o) for o in d["offsets"])
    except (KeyError, TypeError) as exc:
        raise EnvironmentError_(f"malformed composed spec: {exc}") from exc
    return ComposedSpec(rooms, offsets, doors, d.get("name", ""))


def make_composed_world(spec: ComposedSpec) -> GridWorld:
    worlds = [make_world(r) for r in spec.rooms]
    offs = np.concatenate([[0], np.cumsum([w.n_states for w in worlds])])
    nxt = np.concatenate([w.next_state + o for w, o in zip(worlds, offs)])
    coords = np.concatenate([w.coords + np.asarray(off) for w, off in zip(worlds, spec.offsets)])
    room_of = np.concatenate([np.full(w.n_states, i) for i, w in enumerate(worlds)])
    for d in spec.doors:
        sa = offs[d.room_a] + worlds[d.room_a].state_at(*d.cell_a)
        sb = offs[d.room_b] + worlds[d.room_b].state_at(*d.cell_b)
        delta = coords[sb] - coords[sa]
        a_ab = int(np.nonzero((MOVES == delta).all(1))[0][0])
        a_ba = int(np.nonzero((MOVES == -delta).all(1))[0][0])
        nxt[sa, a_ab] = sb
        nxt[sb, a_ba] = sa
    blocked = np.stack([nxt[:, a] == np.arange(len(nxt)) for a in range(4)], -1)
    obs = _relabel(wall_pattern(blocked), np.ones(len(nxt), bool))
    H = int(coords[:, 0].max()) + 1
    W = int(coords[:, 1].max()) + 1
    world = GridWorld(nxt, obs, coords, spec.name, room_of, shape=(H, W), meta={"wrap": (False, False)})
    world.meta["room_offsets"] = offs
    if not world.is_connected():
        raise EnvironmentError_("composed environment is not connected")
    return world


def door_frontiers(spec: ComposedSpec):
    """Per-room exits ``(state, action)`` and entry states, indexed in each room's own model."""
    from .composition import FrontierSpec

    worlds = [make_world(r) for r in spec.rooms]
    orders = [ground_truth_order(w) for w in worlds]
    exits = [[] for _ in worlds]
    entries = [[] for _ in worlds]
    for d in spec.doors:
        ga = np.add(spec.offsets[d.room_a], d.cell_a)
        gb = np.add(spec.offsets[d.room_b], d.cell_b)
        delta = gb - ga
        a_ab = int(np.nonzero((MOVES == delta).all(1))[0][0])
        a_ba = int(np.nonzero((MOVES == -delta).all(1))[0][0])
        za = int(orders[d.room_a][1][worlds[d.room_a].state_at(*d.cell_a)])
        zb = int(orders[d.room_b][1][worlds[d.room_b].state_at(*d.cell_b)])
        exits[d.room_a].append((za, a_ab))
        exits[d.room_b].append((zb, a_ba))
        entries[d.room_a].append(za)
        entries[d.room_b].append(zb)
    return [FrontierSpec(tuple(x), tuple(sorted(set(e)))) for x, e in zip(exits, entries)]


# --------------------------------------------------------------------------- ground truth

def ground_truth_order(world: GridWorld):
    """``(env_state_of_model_state, model_state_of_env_state)`` with clones grouped by observation."""
    order = np.lexsort((np.arange(world.n_states), world.obs))
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    return order, inverse


def ground_truth_model(world: GridWorld, name: str = "") -> GroundedSchema:
    """Exact CSCG of a deterministic world: one hidden state per environment state."""
    order, inverse = ground_truth_order(world)
    S, A = world.n_states, world.n_actions
    T = np.zeros((A, S, S))
    for a in range(A):
        T[a, np.arange(S), inverse[world.next_state[order, a]]] = 1.0
    clones = CloneStructure.from_sizes(np.bincount(world.obs, minlength=world.n_obs))
    E = clones.emission_matrix(world.n_obs)
    return GroundedSchema(T, E, clones, name=name or world.name)


# --------------------------------------------------------------------------- Memory & Planning Game

class MemoryPlanningGame:
    """4x4 toroidal symbol grid; symbols are reshuffled every episode.

    ``move`` and ``collect`` each consume one of the episode's 100 steps.
    Collecting on the goal pays 1, then the agent is respawned at a random cell
    and a new goal (different from that cell) is drawn.
    """

    SIZE = 4
    EPISODE_STEPS = 100

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.world = make_world(rectangle(self.SIZE, self.SIZE, topology="torus", name="mpg"))
        self.n_cells = self.world.n_states
        self.reset()

    def reset(self):
        self.symbols = self.rng.permutation(self.n_cells)   # symbol shown at each cell
        self.steps = 0
        self.reward = 0
        self._respawn()
        return self.observe()

    def _respawn(self):
        self.cell = int(self.rng.integers(self.n_cells))
        goal = int(self.rng.integers(self.n_cells - 1))
        self.goal_cell = goal + (goal >= self.cell)

    @property
    def goal_symbol(self) -> int:
        return int(self.symbols[self.goal_cell])

    @property
    def done(self) -> bool:
        return self.steps >= self.EPISODE_STEPS

    def observe(self):
        return int(self.symbols[self.cell]), self.goal_symbol

    def move(self, action: int) -> int:
        if self.done:
            raise EnvironmentError_("episode finished")
        self.cell, _ = self.world.step(self.cell, action)
        self.steps += 1
        return int(self.symbols[self.cell])

    def collect(self) -> int:
        if self.done:
            raise EnvironmentError_("episode finished")
        self.steps += 1
        if self.cell != self.goal_cell:
            return 0
        self.reward += 1
        self._respawn()
        return 1

    def distance_to_goal(self) -> int:
        return int(self.world.distances_from(self.cell)[self.goal_cell])


def continuous_observations(obs: np.ndarray, n_symbols: int, dim: int = 16, noise: float = 0.1,
                            seed: int = 0, prototypes: Optional[np.ndarray] = None) -> np.ndarray:
    """Stand-in for image embeddings: a fixed random vector per symbol plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = np.random.default_rng([seed, 1]).normal(size=(n_symbols, dim))
    return prototypes[np.asarray(obs)] + noise * rng.normal(size=(len(obs), prototypes.shape[1]))
