"""Experiment runners behind the command line and the acceptance suite.

Every runner takes one dataclass config, derives all randomness from
``config.seed`` plus the index of the unit of work, and returns plain rows
(lists of dicts) in a fixed order, so results do not depend on how many
worker processes were used.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from .composition import build_prior, learn_composed
from .environments import (ROOM_KINDS, SIZE_CLASSES, MemoryPlanningGame, bitmap_rooms, door_frontiers,
                           ground_truth_model, make_composed_world, make_world, rectangle, side_by_side,
                           square_with_hole, standard_room)
from .inference import nll
from .learn_e import learn_emissions
from .learn_t import MATCH_PSEUDOCOUNT, SCHEMA_PSEUDOCOUNT, EmOptions, learn_transitions
from .model import CloneStructure, UngroundedSchema
from .planner import (MpgAgent, MpgConfig, NavigationConfig, EdgeCoveragePolicy, learn_mpg_schema, navigate,
                      policy_walk, unique_observation_states)
from .schemas import SchemaLibrary, decision_index, extract_schema, match, sliding_window_match


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- config plumbing

def config_hash(cfg) -> str:
    """Short stable digest of a config's values."""
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _coerce(value, default, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return value
    return value


def build_config(cls, values: dict):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys and mistyped values."""
    if not isinstance(values, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), k) for k, v in values.items()}
    cfg = cls(**kwargs)
    check = getattr(cfg, "validate", None)
    if check is not None:
        check()
    return cfg


def fan_out(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally across processes; output order follows ``tasks``."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def mean_ci(values) -> tuple:
    """Mean and the half-width of a 95% interval from the standard error."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(x.size))


def _room(kind: str, size: str):
    if kind.startswith("digit_"):
        return bitmap_rooms()[int(kind.split("_", 1)[1])]
    return standard_room(kind, size)


def _check_choice(name, value, choices):
    if value not in choices:
        raise ConfigError(f"{name} must be one of {', '.join(map(str, choices))}; got {value!r}")


# --------------------------------------------------------------------------- train

@dataclass
class TrainConfig:
    room: str = "rectangle"         # a room kind or digit_0 .. digit_9
    size: str = "medium"
    n_clones: int = 20
    walk_steps: int = 50000
    em_iters: int = 100
    pseudocount: float = SCHEMA_PSEUDOCOUNT
    prune: float = 1e-3
    seed: int = 0

    def validate(self):
        if not self.room.startswith("digit_"):
            _check_choice("room", self.room, ROOM_KINDS)
        _check_choice("size", self.size, SIZE_CLASSES)
        if self.n_clones < 1 or self.walk_steps < 2 or self.em_iters < 1:
            raise ConfigError("n_clones, walk_steps and em_iters must be positive (walk_steps >= 2)")


def train_schema(cfg: TrainConfig, index: int = 0):
    """Learn a model from one random walk and strip it to a schema; returns ``(model, schema, trace)``."""
    world = make_world(_room(cfg.room, cfg.size))
    walk, _ = world.random_walk(cfg.walk_steps, rng_for(cfg.seed, 0, index))
    clones = CloneStructure.from_sizes(np.full(world.n_obs, cfg.n_clones))
    fit = learn_transitions(walk, clones, EmOptions(max_iters=cfg.em_iters, pseudocount=cfg.pseudocount),
                            n_obs=world.n_obs, name=cfg.room)
    schema = extract_schema(fit.model, walk, name=cfg.room, prune=cfg.prune)
    return fit.model, schema, fit.trace


# --------------------------------------------------------------------------- bind

@dataclass
class BindConfig:
    schema: str = ""                # path to a saved schema or model; empty = ground truth of the room
    room: str = "rectangle"
    size: str = "medium"
    walk_steps: int = 500
    tie_clones: bool = True
    em_iters: int = 100
    seed: int = 0

    def validate(self):
        if not self.room.startswith("digit_"):
            _check_choice("room", self.room, ROOM_KINDS)
        _check_choice("size", self.size, SIZE_CLASSES)


def bind_schema(cfg: BindConfig, schema):
    """Bind ``schema`` to a walk in the room with freshly permuted observation labels."""
    world = make_world(_room(cfg.room, cfg.size))
    rng = rng_for(cfg.seed, 1)
    permuted, _ = world.permuted(rng)
    walk, _ = permuted.random_walk(cfg.walk_steps, rng)
    tie = cfg.tie_clones and getattr(schema, "clones", None) is not None
    return learn_emissions(schema, walk, permuted.n_obs, tie_clones=tie,
                           opts=EmOptions(max_iters=cfg.em_iters, pseudocount=MATCH_PSEUDOCOUNT))


# --------------------------------------------------------------------------- whole-walk matching

@dataclass
class MatchConfig:
    suite: str = "rooms"            # rooms: 5 kinds x 3 sizes; bitmaps: the ten digit rooms
    library_size: str = "medium"
    test_sizes: list = field(default_factory=lambda: list(SIZE_CLASSES))
    n_clones: int = 20
    train_steps: int = 20000
    em_iters: int = 100
    prune: float = 1e-3
    n_walks: int = 25
    walk_steps: int = 150
    eval_interval: int = 5
    margin: float = 0.05
    tie_clones: bool = True
    seed: int = 0

    def validate(self):
        _check_choice("suite", self.suite, ("rooms", "bitmaps"))
        for s in self.test_sizes:
            _check_choice("test_sizes entry", s, SIZE_CLASSES)
        if self.n_walks < 1 or self.walk_steps < self.eval_interval or self.eval_interval < 1:
            raise ConfigError("need n_walks >= 1 and walk_steps >= eval_interval >= 1")

    def library_rooms(self) -> list:
        if self.suite == "bitmaps":
            return [f"digit_{d}" for d in range(10)]
        return list(ROOM_KINDS)

    def test_cells(self) -> list:
        if self.suite == "bitmaps":
            return [(name, self.library_size) for name in self.library_rooms()]
        return [(kind, size) for kind in ROOM_KINDS for size in self.test_sizes]


def _learn_library_entry(args):
    cfg, index, room = args
    tcfg = TrainConfig(room=room, size=cfg.library_size, n_clones=cfg.n_clones, walk_steps=cfg.train_steps,
                       em_iters=cfg.em_iters, prune=cfg.prune, seed=cfg.seed)
    return train_schema(tcfg, index)[1]


def learn_library(cfg: MatchConfig, workers: int = 1) -> SchemaLibrary:
    rooms = cfg.library_rooms()
    return SchemaLibrary(fan_out(_learn_library_entry, [(cfg, i, r) for i, r in enumerate(rooms)], workers))


def _match_walk(args):
    cfg, library, cell_index, walk_index = args
    kind, size = cfg.test_cells()[cell_index]
    world = make_world(_room(kind, size))
    rng = rng_for(cfg.seed, 2, cell_index, walk_index)
    permuted, _ = world.permuted(rng)
    walk, _ = permuted.random_walk(cfg.walk_steps, rng)
    report = match(library, walk, permuted.n_obs, tie_clones=cfg.tie_clones, eval_interval=cfg.eval_interval,
                   margin=cfg.margin)
    return report


def run_matching(cfg: MatchConfig, library: Optional[SchemaLibrary] = None, workers: int = 1):
    """Per-walk NLL traces plus, per test cell, the decision taken on the walk-averaged trace.

    Returns ``(trace_rows, cell_rows)``.
    """
    library = library or learn_library(cfg, workers)
    cells = cfg.test_cells()
    tasks = [(cfg, library, c, w) for c in range(len(cells)) for w in range(cfg.n_walks)]
    reports = fan_out(_match_walk, tasks, workers)
    trace_rows, cell_rows = [], []
    for c, (kind, size) in enumerate(cells):
        mine = reports[c * cfg.n_walks:(c + 1) * cfg.n_walks]
        for w, rep in enumerate(mine):
            for step, name, value in rep.rows():
                trace_rows.append({"room": kind, "size": size, "walk": w, "step": step, "schema": name, "nll": value})
        mean_nll = np.mean([r.nll for r in mine], axis=0)
        winner = int(np.argmin(mean_nll[:, -1]))
        d = decision_index(mean_nll, winner, cfg.margin)
        per_walk = [r.decision_step for r in mine if r.winner == kind and r.decided]
        cell_rows.append({
            "room": kind, "size": size, "winner": library.names[winner], "correct": library.names[winner] == kind,
            "decision_step": "" if d is None else int(mine[0].steps[d]),
            "walks_decided_correct": len(per_walk), "n_walks": cfg.n_walks,
        })
    return trace_rows, cell_rows


# --------------------------------------------------------------------------- sliding-window matching

DIGIT_PAIRS = [[2, 3], [5, 1], [5, 3], [2, 7], [0, 9], [9, 3], [4, 6], [8, 7]]


@dataclass
class WindowConfig:
    pairs: list = field(default_factory=lambda: [list(p) for p in DIGIT_PAIRS])
    walk_steps: int = 20000
    window: int = 200
    stride: int = 1
    n_seeds: int = 5
    tie_clones: bool = True
    temperature: float = 1.0
    seed: int = 0

    def validate(self):
        for p in self.pairs:
            if len(p) != 2 or not all(0 <= int(d) <= 9 for d in p) or p[0] == p[1]:
                raise ConfigError(f"pairs entries must be two different digits, got {p!r}")
        if self.window < 1 or self.window > self.walk_steps or self.stride < 1:
            raise ConfigError("need 1 <= window <= walk_steps and stride >= 1")


def location_accuracy(probs_correct: np.ndarray, cells: np.ndarray, n_cells: int) -> float:
    """Fraction of visited cells whose average probability of the correct schema exceeds one half."""
    total = np.bincount(cells, weights=probs_correct, minlength=n_cells)
    visits = np.bincount(cells, minlength=n_cells)
    seen = visits > 0
    return float(np.mean(total[seen] / visits[seen] > 0.5))


def _ground_truth_schema(room, name: str) -> UngroundedSchema:
    truth = ground_truth_model(make_world(room))
    return UngroundedSchema(truth.T, truth.clones, name)


def _window_run(args):
    cfg, pair_index, seed_index = args
    a, b = cfg.pairs[pair_index]
    rooms = bitmap_rooms()
    spec = side_by_side(rooms[a], rooms[b])
    world = make_composed_world(spec)
    library = SchemaLibrary([_ground_truth_schema(rooms[d], f"digit_{d}") for d in (a, b)])
    walk, states = world.random_walk(cfg.walk_steps, rng_for(cfg.seed, 3, pair_index, seed_index))
    rep = sliding_window_match(library, walk, world.n_obs, window=cfg.window, stride=cfg.stride,
                               tie_clones=cfg.tie_clones, temperature=cfg.temperature)
    cells = states[rep.steps]
    truth = world.room_of_state[cells]
    correct = rep.probs[np.arange(len(cells)), truth]
    acc = location_accuracy(correct, cells, world.n_states)
    step_acc = float(np.mean(rep.selected == truth))
    return acc, step_acc, rep, cells, truth


def run_window(cfg: WindowConfig, workers: int = 1):
    """Returns ``(summary_rows, step_rows)``: accuracy per (pair, seed) and per-window probabilities."""
    tasks = [(cfg, p, s) for p in range(len(cfg.pairs)) for s in range(cfg.n_seeds)]
    results = fan_out(_window_run, tasks, workers)
    summary, steps = [], []
    for (_, p, s), (acc, step_acc, rep, cells, truth) in zip(tasks, results):
        pair = f"{cfg.pairs[p][0]}+{cfg.pairs[p][1]}"
        summary.append({"pair": pair, "seed": s, "location_accuracy": acc, "step_accuracy": step_acc})
        for n, cell, room, prob in zip(rep.steps, cells, truth, rep.probs[:, 0]):
            steps.append({"pair": pair, "seed": s, "step": int(n), "cell": int(cell), "true_room": int(room),
                          "p_first": float(prob)})
    return summary, steps


# --------------------------------------------------------------------------- composition sweep

@dataclass
class ComposeConfig:
    rooms: list = field(default_factory=lambda: ["rectangle", "u_shape"])
    size: str = "small"
    lengths: list = field(default_factory=lambda: [1000, 2000, 5000, 10000])
    n_seeds: int = 5
    scratch_clones: int = 10
    composed_iters: int = 50
    scratch_iters: int = 100
    holdout_steps: int = 2000
    seed: int = 0

    def validate(self):
        if len(self.rooms) != 2:
            raise ConfigError("rooms must name exactly two room kinds")
        for r in self.rooms:
            _check_choice("rooms entry", r, ("rectangle", "square_hole", "u_shape"))
        _check_choice("size", self.size, SIZE_CLASSES)
        if not self.lengths or min(self.lengths) < 2:
            raise ConfigError("lengths must be a non-empty list of walk lengths >= 2")


def _composed_setup(cfg: ComposeConfig):
    a, b = (standard_room(r, cfg.size) for r in cfg.rooms)
    spec = side_by_side(a, b)
    world = make_composed_world(spec)
    schemas = [ground_truth_model(make_world(r)).ungrounded(keep_clones=True) for r in (a, b)]
    prior = build_prior(schemas, door_frontiers(spec), name=spec.name)
    return world, prior


def _compose_run(args):
    cfg, length, seed_index = args
    world, prior = _composed_setup(cfg)
    holdout, _ = world.random_walk(cfg.holdout_steps, rng_for(cfg.seed, 4, seed_index))
    walk, _ = world.random_walk(length, rng_for(cfg.seed, 5, seed_index, length))
    with_schemas = learn_composed(prior, walk, world.n_obs, EmOptions(max_iters=cfg.composed_iters))
    clones = CloneStructure.from_sizes(np.full(world.n_obs, cfg.scratch_clones))
    scratch = learn_transitions(walk, clones, EmOptions(max_iters=cfg.scratch_iters), n_obs=world.n_obs)
    truth = ground_truth_model(world)
    return (nll(with_schemas.model, holdout), nll(scratch.model, holdout), nll(truth, holdout))


def run_compose(cfg: ComposeConfig, workers: int = 1) -> list:
    """One row per (length, mode, seed) with held-out NLL and the ground-truth model's NLL."""
    tasks = [(cfg, L, s) for L in cfg.lengths for s in range(cfg.n_seeds)]
    results = fan_out(_compose_run, tasks, workers)
    rows = []
    for (_, L, s), (with_s, scratch, truth) in zip(tasks, results):
        for mode, value in (("schemas", with_s), ("scratch", scratch)):
            rows.append({"length": L, "mode": mode, "seed": s, "heldout_nll": value, "ground_truth_nll": truth})
    return rows


# --------------------------------------------------------------------------- shortcut planning

@dataclass
class PlanConfig:
    room: str = "rectangle"         # rectangle or square_hole
    size: str = "medium"
    growth: list = field(default_factory=lambda: [0, 2])   # cells added to each side length of the test room
    lambdas: list = field(default_factory=lambda: [0.2, 0.0])
    trials: int = 50
    walk_steps: int = 200
    repeat: int = 3
    max_steps: int = 150
    max_replans: int = 30
    threshold: float = 0.0
    goal_mass: float = 0.5
    coverage_trials: int = 20
    seed: int = 0

    def validate(self):
        _check_choice("room", self.room, ("rectangle", "square_hole"))
        _check_choice("size", self.size, SIZE_CLASSES)
        if any(g < 0 for g in self.growth):
            raise ConfigError("growth entries must be non-negative")

    def navigation(self, lam: float) -> NavigationConfig:
        return NavigationConfig(walk_steps=self.walk_steps, repeat=self.repeat, lam=lam, threshold=self.threshold,
                                goal_mass=self.goal_mass, max_steps=self.max_steps, max_replans=self.max_replans)


def grown_room(kind: str, size: str, growth: int):
    base = standard_room(kind, size)
    if growth == 0:
        return base
    if kind == "rectangle":
        h, w = base.layout.shape
        return rectangle(h + growth, w + growth, name=f"{base.name}+{growth}")
    side = base.layout.shape[0]
    hole = int((~base.layout).sum() ** 0.5)
    return square_with_hole(side + growth, hole, name=f"{base.name}+{growth}")


def _plan_trial(args):
    cfg, mode, growth, lam, trial = args
    schema = ground_truth_model(make_world(standard_room(cfg.room, cfg.size))).ungrounded(keep_clones=True)
    world = make_world(grown_room(cfg.room, cfg.size, growth))
    seed = [cfg.seed, 6, growth, int(round(lam * 1000)), trial, int(mode == "coverage")]
    if mode == "coverage":
        rng = np.random.default_rng(seed)
        start = int(rng.choice(unique_observation_states(world)))
        walk, states = policy_walk(world, EdgeCoveragePolicy(world), 8 * world.n_states, start)
        log = navigate(schema, world, cfg=cfg.navigation(lam), seed=seed, initial=walk, initial_states=states)
    else:
        log = navigate(schema, world, cfg=cfg.navigation(lam), seed=seed)
    return log


def run_plan(cfg: PlanConfig, workers: int = 1) -> list:
    """Shortcut-task episodes: full-coverage walks in the matched room, then repeated-action walks per growth/λ."""
    tasks = [(cfg, "coverage", 0, lam, t) for lam in cfg.lambdas[:1] for t in range(cfg.coverage_trials)]
    tasks += [(cfg, "random", g, lam, t) for g in cfg.growth for lam in cfg.lambdas for t in range(cfg.trials)]
    logs = fan_out(_plan_trial, tasks, workers)
    return [{"walk": mode, "growth": g, "lambda": lam, "trial": t, "success": log.success,
             "final_distance": log.final_distance, "replans": log.replans, "steps": log.steps,
             "bfs_distance": log.bfs_distance}
            for (_, mode, g, lam, t), log in zip(tasks, logs)]


# --------------------------------------------------------------------------- memory & planning game

@dataclass
class MpgExperimentConfig:
    learn_episodes: int = 10
    episodes: int = 100
    exploration: str = "hamiltonian-4x4"
    threshold: float = 0.7
    prune: float = 0.05
    em_iters: int = 50
    seed: int = 0

    def validate(self):
        _check_choice("exploration", self.exploration, ("random", "up-right-random", "hamiltonian-4x4"))
        if self.learn_episodes < 1 or self.episodes < 1:
            raise ConfigError("learn_episodes and episodes must be positive")

    def agent(self) -> MpgConfig:
        return MpgConfig(exploration=self.exploration, threshold=self.threshold, em_iters=self.em_iters,
                         prune=self.prune, n_episodes=self.learn_episodes)


def learn_mpg(cfg: MpgExperimentConfig):
    return learn_mpg_schema(MemoryPlanningGame(seed=[cfg.seed, 7]), cfg.learn_episodes, seed=cfg.seed)


def _mpg_episode(args):
    cfg, T, episode = args
    game = MemoryPlanningGame(seed=[cfg.seed, 8, episode])
    return MpgAgent(T, cfg.agent()).play(game, seed=episode)


def run_mpg(cfg: MpgExperimentConfig, schema_T: Optional[np.ndarray] = None, workers: int = 1):
    """Learn the grid schema (unless given), then play scored episodes; returns ``(schema_T, rows)``."""
    if schema_T is None:
        schema_T = learn_mpg(cfg).model.T
    results = fan_out(_mpg_episode, [(cfg, schema_T, e) for e in range(cfg.episodes)], workers)
    rows = []
    for e, res in enumerate(results):
        scored = [(m, b) for m, b, explored in res.tasks if explored]
        rows.append({"episode": e, "reward": res.reward, "tasks": len(res.tasks), "scored_tasks": len(scored),
                     "optimal_tasks": sum(m == b for m, b in scored)})
    return schema_T, rows
