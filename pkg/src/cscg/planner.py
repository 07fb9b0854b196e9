"""Localization, max-product planning and the execute / replan loops built on them."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .environments import MOVES, GridWorld, MemoryPlanningGame
from .inference import ZeroProbabilityError, filtered_belief, map_decode
from .learn_e import EmissionFitter
from .learn_t import MATCH_PSEUDOCOUNT, EmOptions, FitResult, learn_shared_schema
from .schemas import prune_transitions
from .model import GroundedSchema, ModelError, Trajectory, UngroundedSchema

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7
DEFAULT_LAMBDA = 0.2


class NoPlanError(RuntimeError):
    def __init__(self, message: str, probability: float = 0.0):
        super().__init__(message)
        self.probability = probability


# --------------------------------------------------------------------------- smoothing / localization

def smooth_diagonal(T: np.ndarray, lam: float) -> np.ndarray:
    """Add ``lam * max(T)`` to every self-transition, then renormalize rows."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    T = np.array(T, dtype=np.float64)
    if lam == 0:
        return T
    idx = np.arange(T.shape[1])
    T[:, idx, idx] += lam * T.max()
    return T / T.sum(-1, keepdims=True)


def localize(model: GroundedSchema, history: Trajectory):
    """``(filtered belief over the current state, MAP current state)``.

    A history that the model cannot explain raises ``ZeroProbabilityError``.
    """
    if len(history) == 0:
        raise ModelError("empty history")
    belief = filtered_belief(model, history)
    return belief, int(map_decode(model, history)[-1])


# --------------------------------------------------------------------------- planning

@dataclass
class PlanResult:
    actions: list
    states: list               # predicted states, starting with the start state
    probability: float
    replans: int = 0

    def __len__(self):
        return len(self.actions)


def goal_states(model: GroundedSchema, symbol: int) -> np.ndarray:
    """States whose most likely emission is ``symbol``."""
    E = model.E
    return np.nonzero((E.argmax(1) == symbol) & (E[:, symbol] > 0))[0]


def plan(T: np.ndarray, start: Union[int, np.ndarray], goal: Iterable[int], threshold: float = DEFAULT_THRESHOLD,
         horizon: Optional[int] = None) -> PlanResult:
    """Most probable action sequence from ``start`` into any goal state.

    ``start`` is a state index or a belief vector (its argmax is used). Among
    equally probable paths the shortest wins, then the lexicographically
    smallest action sequence. Raises ``NoPlanError`` below ``threshold``.
    """
    T = np.asarray(T, dtype=np.float64)
    A, Z, _ = T.shape
    start = int(np.argmax(start)) if np.ndim(start) else int(start)
    goal_mask = np.zeros(Z, dtype=bool)
    goal = np.fromiter(goal, dtype=np.int64)
    if goal.size == 0:
        raise NoPlanError("empty goal set")
    goal_mask[goal] = True
    if goal_mask[start]:
        return PlanResult([], [start], 1.0)
    horizon = 4 * Z if horizon is None else horizon
    values = [goal_mask.astype(np.float64)]   # values[k][s]: best probability of reaching a goal in k steps
    best_k, best_p = None, 0.0
    for k in range(1, horizon + 1):
        v = (T * values[-1][None, None, :]).max(2).max(0)
        values.append(v)
        if v[start] > best_p:
            best_k, best_p = k, v[start]
        if v.max() <= best_p:
            break
    if best_k is None or best_p < threshold or best_p == 0.0:
        raise NoPlanError(f"no plan reaches the goal with probability >= {threshold}", best_p)
    actions, states = [], [start]
    s = start
    prob = 1.0
    for k in range(best_k, 0, -1):
        cand = T[:, s, :] * values[k - 1][None, :]
        a, nxt = np.unravel_index(int(np.argmax(cand)), cand.shape)   # row-major: smallest action first
        prob *= T[a, s, nxt]
        actions.append(int(a))
        states.append(int(nxt))
        s = int(nxt)
    return PlanResult(actions, states, float(prob))


# --------------------------------------------------------------------------- exploration policies

class ExplorationPolicy:
    """Action stream for exploring; ``__call__`` takes the agent's true state (used only by edge coverage)."""

    def __call__(self, state: Optional[int] = None) -> int:
        raise NotImplementedError


class RandomPolicy(ExplorationPolicy):
    def __init__(self, n_actions: int, seed: int = 0, allowed: Optional[Iterable[int]] = None):
        self.rng = np.random.default_rng(seed)
        self.allowed = np.arange(n_actions) if allowed is None else np.fromiter(allowed, dtype=np.int64)

    def __call__(self, state=None) -> int:
        return int(self.allowed[self.rng.integers(len(self.allowed))])


class CyclePolicy(ExplorationPolicy):
    def __init__(self, pattern: Iterable[int]):
        self.pattern = list(pattern)
        self.t = 0

    def __call__(self, state=None) -> int:
        a = self.pattern[self.t % len(self.pattern)]
        self.t += 1
        return a


class EdgeCoveragePolicy(ExplorationPolicy):
    """Walks (via BFS over the true graph) to the nearest least-tried (state, action) pair and tries it."""

    def __init__(self, world: GridWorld):
        self.world = world
        self.counts = np.zeros((world.n_states, world.n_actions), dtype=np.int64)

    def __call__(self, state: Optional[int] = None) -> int:
        if state is None:
            raise ModelError("edge coverage needs the true state")
        target = self.counts.min()
        a = self._next_action(state, target)
        self.counts[state, a] += 1
        return a

    def _next_action(self, state: int, target: int) -> int:
        nxt = self.world.next_state
        first = {state: None}
        queue = deque([state])
        while queue:
            s = queue.popleft()
            hits = np.nonzero(self.counts[s] == target)[0]
            if hits.size:
                if s == state:
                    return int(hits[0])
                while first[s][0] != state:
                    s = first[s][0]
                return first[s][1]
            for a in range(self.world.n_actions):
                t = int(nxt[s, a])
                if t not in first:
                    first[t] = (s, a)
                    queue.append(t)
        raise ModelError("no reachable (state, action) pair")


def exploration_policy(kind: str, world: Optional[GridWorld] = None, seed: int = 0, n_actions: int = 4):
    if kind == "random":
        return RandomPolicy(n_actions, seed)
    if kind == "up-right-random":
        return RandomPolicy(n_actions, seed, allowed=(0, 3))
    if kind == "hamiltonian-4x4":
        if world is None or world.shape != (4, 4) or world.meta.get("topology") != "torus":
            raise ModelError("the Hamiltonian cycle policy needs the 4x4 toroidal grid")
        return CyclePolicy([0, 0, 0, 3])
    if kind == "edge-coverage":
        if world is None:
            raise ModelError("edge coverage needs the environment")
        return EdgeCoveragePolicy(world)
    raise ModelError(f"unknown exploration policy {kind!r}")


def policy_walk(world: GridWorld, policy: ExplorationPolicy, n_steps: int, start: int):
    """``n_steps`` observations following ``policy``; returns the trajectory and true states."""
    states = [start]
    actions = []
    for _ in range(n_steps - 1):
        a = policy(states[-1])
        actions.append(a)
        states.append(int(world.next_state[states[-1], a]))
    return Trajectory(world.obs[states], np.array(actions, dtype=np.int64)), np.array(states)


def repeated_action_walk(world: GridWorld, n_steps: int, rng: np.random.Generator, start: int, repeat: int = 3):
    """Random actions, each executed ``repeat`` times in a row."""
    n_moves = max(n_steps - 1, 0)
    actions = np.repeat(rng.integers(world.n_actions, size=-(-n_moves // repeat)), repeat)[:n_moves]
    return world.rollout(start, actions)


# --------------------------------------------------------------------------- shortcut navigation

@dataclass
class NavigationConfig:
    walk_steps: int = 200
    repeat: int = 3
    lam: float = DEFAULT_LAMBDA
    threshold: float = 0.0
    goal_mass: float = 0.5
    max_steps: int = 150
    max_replans: int = 30
    tie_clones: bool = True
    em_iters: int = 100


@dataclass
class EpisodeLog:
    success: bool
    final_distance: int
    replans: int
    steps: int
    bfs_distance: int
    records: list = field(default_factory=list)   # (action, observation, belief entropy)


def _entropy(p: np.ndarray) -> float:
    q = p[p > 0]
    return float(-(q * np.log(q)).sum())


def unique_observation_states(world: GridWorld) -> np.ndarray:
    """States whose observation no other state shares (corners, for wall-pattern observations)."""
    counts = np.bincount(world.obs)
    return np.nonzero(counts[world.obs] == 1)[0]


def navigate(schema: UngroundedSchema, world: GridWorld, start: Optional[int] = None,
             cfg: Optional[NavigationConfig] = None, seed: int = 0,
             initial: Optional[Trajectory] = None, initial_states: Optional[np.ndarray] = None,
             binding: Optional[np.ndarray] = None) -> EpisodeLog:
    """Return-to-start task: walk, bind, decode start and current state, plan back, execute, replan.

    The initial walk is a repeated-action random walk unless ``initial`` (with
    its true ``initial_states``) is given. Without ``start`` it begins at a
    randomly chosen cell whose observation is unique in the room. ``binding``
    fixes the emission matrix instead of re-learning it from all experience
    before every plan. Start and current state are re-decoded every time.
    """
    cfg = cfg or NavigationConfig()
    rng = np.random.default_rng(seed)
    if initial is None:
        if start is None:
            start = int(rng.choice(unique_observation_states(world)))
        initial, initial_states = repeated_action_walk(world, cfg.walk_steps, rng, start, cfg.repeat)
    goal_cell = int(initial_states[0])
    T = smooth_diagonal(schema.T, cfg.lam)
    smoothed = UngroundedSchema(T, schema.clones, schema.name)
    fitter = EmissionFitter(smoothed, world.n_obs, cfg.tie_clones and schema.clones is not None,
                            opts=EmOptions(pseudocount=MATCH_PSEUDOCOUNT, max_iters=cfg.em_iters))
    obs = list(initial.observations)
    acts = list(initial.actions)
    true_state = int(initial_states[-1])
    bfs = int(world.distances_from(true_state)[goal_cell])
    records = []
    plans = 0
    executed = 0
    while executed < cfg.max_steps and plans <= cfg.max_replans:
        traj = Trajectory(np.array(obs), np.array(acts, dtype=np.int64))
        try:
            model = (fitter.fit(traj).model if binding is None
                     else GroundedSchema(T, binding, fitter.clones, fitter.pi))
            path = map_decode(model, traj)
            belief = filtered_belief(model, traj)
        except ZeroProbabilityError:
            break
        goal_set = [int(path[0])]
        current = int(path[-1])
        if current in goal_set:
            if belief[goal_set].sum() >= cfg.goal_mass:
                break
            # believed position is the goal but not confidently: gather one more observation
            steps = [(int(rng.integers(world.n_actions)), None)]
        else:
            try:
                p = plan(T, current, goal_set, threshold=cfg.threshold)
            except NoPlanError:
                break
            steps = list(zip(p.actions, p.states[1:]))
        plans += 1
        for a, predicted in steps:
            true_state = int(world.next_state[true_state, a])
            x = int(world.obs[true_state])
            acts.append(a)
            obs.append(x)
            executed += 1
            records.append((a, x, _entropy(belief)))
            if predicted is None or model.E[predicted].argmax() != x or executed >= cfg.max_steps:
                break
    final = world.manhattan(true_state, goal_cell)
    return EpisodeLog(true_state == goal_cell, final, max(plans - 1, 0), executed, bfs, records)


# --------------------------------------------------------------------------- Memory & Planning Game agent

@dataclass
class MpgConfig:
    exploration: str = "hamiltonian-4x4"
    threshold: float = DEFAULT_THRESHOLD
    em_iters: int = 50
    prune: float = 0.05      # edges below this are dropped from the learned schema before planning
    n_episodes: int = 10     # random-walk episodes used to learn the schema


@dataclass
class MpgEpisode:
    reward: int
    tasks: list   # (steps to goal in moves, BFS distance at spawn, explored-before-task flag)


def random_episodes(game: MemoryPlanningGame, n_episodes: int, rng: np.random.Generator) -> list:
    """Uniformly random moves for whole episodes; the symbols are reshuffled between them."""
    out = []
    for _ in range(n_episodes):
        game.reset()
        obs, acts = [game.observe()[0]], []
        while not game.done:
            a = int(rng.integers(len(MOVES)))
            obs.append(game.move(a))
            acts.append(a)
        out.append(Trajectory(np.array(obs), np.array(acts)))
    return out


def learn_mpg_schema(game: MemoryPlanningGame, n_episodes: int = 10, seed: int = 0,
                     opts: Optional[EmOptions] = None) -> FitResult:
    """Learn the grid's transition schema from random episodes of the game itself."""
    rng = np.random.default_rng(seed)
    episodes = random_episodes(game, n_episodes, rng)
    n = game.n_cells
    return learn_shared_schema(episodes, n, n, len(MOVES), opts or EmOptions(), bijective=True)


class MpgAgent:
    """Plays one MPG episode with a fixed 4x4 schema, binding symbols online.

    The collect action is modelled as an extra action whose transition row is
    uniform (the agent is respawned anywhere). The first state of the episode
    is anchored to schema state 0, which is free because the grid looks the
    same from every cell.
    """

    def __init__(self, schema_T: np.ndarray, cfg: Optional[MpgConfig] = None):
        self.cfg = cfg or MpgConfig()
        A, Z, _ = schema_T.shape
        schema_T = prune_transitions(np.asarray(schema_T, dtype=np.float64), self.cfg.prune)
        self.n_moves = A
        T = np.concatenate([schema_T, np.full((1, Z, Z), 1.0 / Z)])
        self.T_moves = schema_T
        self.schema = UngroundedSchema(T, name="mpg")
        self.n_states = Z
        pi = np.zeros(Z)
        pi[0] = 1.0
        self.fitter = EmissionFitter(self.schema, Z, tie_clones=False, pi=pi,
                                     opts=EmOptions(pseudocount=MATCH_PSEUDOCOUNT, max_iters=self.cfg.em_iters))

    def play(self, game: MemoryPlanningGame, seed: int = 0) -> MpgEpisode:
        """One episode. Goals are ignored until every symbol has been seen once."""
        game.reset()
        policy = exploration_policy(self.cfg.exploration, game.world, seed=seed, n_actions=self.n_moves)
        collect = self.n_moves
        obs, acts = [game.observe()[0]], []
        explored = False
        E = None
        tasks = []
        task_moves, task_bfs, task_explored = 0, game.distance_to_goal(), False
        while not game.done:
            here, goal_sym = game.observe()
            if explored and here == goal_sym:
                game.collect()
                tasks.append((task_moves, task_bfs, task_explored))
                if game.done:
                    break
                acts.append(collect)
                obs.append(game.observe()[0])
                task_moves, task_bfs, task_explored = 0, game.distance_to_goal(), True
                continue
            action = None
            if explored:
                traj = Trajectory(np.array(obs), np.array(acts, dtype=np.int64))
                if E is None:
                    E = self.fitter.fit(traj).E
                bound = GroundedSchema(self.schema.T, E, self.fitter.clones, self.fitter.pi)
                action = self._planned_action(bound, traj, goal_sym)
            if action is None:
                action = policy()
            obs.append(game.move(action))
            acts.append(action)
            task_moves += 1
            explored = explored or len(set(obs)) == self.n_states
        return MpgEpisode(game.reward, tasks)

    def _planned_action(self, model, traj, goal_sym) -> Optional[int]:
        try:
            belief = filtered_belief(model, traj)
        except ZeroProbabilityError:
            return None
        current = int(np.argmax(belief))
        goals = goal_states(model, goal_sym)
        if goals.size == 0:
            return None
        try:
            p = plan(self.T_moves, current, goals, threshold=0.0)
        except NoPlanError:
            return None
        success = belief[current] * p.probability * model.E[p.states[-1], goal_sym]
        if success < self.cfg.threshold or not p.actions:
            return None
        return p.actions[0]
