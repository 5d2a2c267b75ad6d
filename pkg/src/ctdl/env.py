"""Grid world and continuous mountain car behind one reset/step interface.

Observations are float64 numpy vectors of length 2. Grid world actions are
integer indices (0=up, 1=down, 2=left, 3=right; up increases y). Mountain car
actions are real forces, clamped to [-1, 1].
"""
from __future__ import annotations

import math
import numbers
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .errors import ConfigurationError

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}
ACTION_NAMES = {UP: "up", DOWN: "down", LEFT: "left", RIGHT: "right"}

Cell = tuple[int, int]
Action = Union[int, float]


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


@dataclass
class GridWorldSpec:
    width: int
    height: int
    start: Cell = (0, 0)
    goal: Cell = (1, 1)
    penalty_cells: frozenset = field(default_factory=frozenset)
    step_reward: float = -0.05
    goal_reward: float = 1.0
    penalty_reward: float = -1.0
    max_steps: int = 1000

    kind = "gridworld"

    def __post_init__(self):
        self.start = tuple(int(v) for v in self.start)
        self.goal = tuple(int(v) for v in self.goal)
        self.penalty_cells = frozenset(tuple(int(v) for v in c) for c in self.penalty_cells)
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise ConfigurationError(f"{name} {cell} outside {self.width}x{self.height} grid")
        if self.start == self.goal:
            raise ConfigurationError("start and goal coincide")
        for cell in self.penalty_cells:
            if not self.in_bounds(cell):
                raise ConfigurationError(f"penalty cell {cell} outside grid")
        if self.goal in self.penalty_cells:
            raise ConfigurationError("goal cannot be a penalty cell")
        if self.start in self.penalty_cells:
            raise ConfigurationError("start cannot be a penalty cell")

    def in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "width": self.width,
            "height": self.height,
            "start": list(self.start),
            "goal": list(self.goal),
            "penalties": sorted(list(c) for c in self.penalty_cells),
            "rewards": {"step": self.step_reward, "goal": self.goal_reward, "penalty": self.penalty_reward},
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridWorldSpec":
        rewards = d.get("rewards", {})
        unknown = set(rewards) - {"step", "goal", "penalty"}
        if unknown:
            raise ConfigurationError(f"unknown reward keys {sorted(unknown)}")
        try:
            return cls(
                width=int(d["width"]),
                height=int(d["height"]),
                start=tuple(d.get("start", (0, 0))),
                goal=tuple(d["goal"]),
                penalty_cells=frozenset(tuple(c) for c in d.get("penalties", [])),
                step_reward=float(rewards.get("step", -0.05)),
                goal_reward=float(rewards.get("goal", 1.0)),
                penalty_reward=float(rewards.get("penalty", -1.0)),
                max_steps=int(d.get("max_steps", 1000)),
            )
        except KeyError as e:
            raise ConfigurationError(f"gridworld spec missing key {e}") from None


@dataclass
class MountainCarSpec:
    power: float = 0.0015
    gravity_coeff: float = 0.0025
    goal_position: float = 0.45
    goal_reward: float = 100.0
    action_cost: float = 0.1
    min_position: float = -1.2
    max_position: float = 0.6
    max_speed: float = 0.07
    max_steps: int = 1000
    start_position_range: tuple[float, float] = (-0.6, -0.4)

    kind = "mountain_car"

    def __post_init__(self):
        self.start_position_range = tuple(float(v) for v in self.start_position_range)
        self.validate()

    def validate(self) -> None:
        if self.power <= 0 or self.gravity_coeff <= 0 or self.action_cost <= 0:
            raise ConfigurationError("power, gravity_coeff and action_cost must be positive")
        if not self.min_position < self.max_position or self.max_speed <= 0:
            raise ConfigurationError("zero-width position or velocity bounds")
        if not self.min_position <= self.goal_position <= self.max_position:
            raise ConfigurationError("goal_position outside position bounds")
        lo, hi = self.start_position_range
        if lo > hi or lo < self.min_position or hi > self.max_position:
            raise ConfigurationError(f"bad start_position_range {self.start_position_range}")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "power": self.power,
            "gravity": self.gravity_coeff,
            "goal_position": self.goal_position,
            "goal_reward": self.goal_reward,
            "action_cost": self.action_cost,
            "position_bounds": [self.min_position, self.max_position],
            "max_speed": self.max_speed,
            "max_steps": self.max_steps,
            "start_position_range": list(self.start_position_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MountainCarSpec":
        kw: dict[str, Any] = {}
        names = {
            "power": "power",
            "gravity": "gravity_coeff",
            "goal_position": "goal_position",
            "goal_reward": "goal_reward",
            "action_cost": "action_cost",
            "max_speed": "max_speed",
        }
        for key, attr in names.items():
            if key in d:
                kw[attr] = float(d[key])
        if "position_bounds" in d:
            kw["min_position"], kw["max_position"] = (float(v) for v in d["position_bounds"])
        if "max_steps" in d:
            kw["max_steps"] = int(d["max_steps"])
        if "start_position_range" in d:
            kw["start_position_range"] = tuple(d["start_position_range"])
        return cls(**kw)


def spec_from_dict(d: dict):
    kind = d.get("kind", "gridworld")
    if kind == "gridworld":
        return GridWorldSpec.from_dict(d)
    if kind == "mountain_car":
        return MountainCarSpec.from_dict(d)
    raise ConfigurationError(f"unknown environment kind {kind!r}")


def _check_discrete(action) -> int:
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, numbers.Integral):
        raise TypeError(f"grid world expects an integer action index, got {type(action).__name__}")
    a = int(action)
    if a not in MOVES:
        raise TypeError(f"action index {a} outside 0..3")
    return a


def _check_continuous(action) -> float:
    if isinstance(action, (bool, np.bool_, numbers.Integral)):
        raise TypeError("mountain car expects a real-valued force, got an integer index")
    arr = np.asarray(action, dtype=float).reshape(-1)
    if arr.size != 1:
        raise TypeError(f"mountain car expects a 1-dimensional force, got shape {np.shape(action)}")
    return float(arr[0])


def grid_transition(spec: GridWorldSpec, state, action) -> tuple[np.ndarray, float, bool]:
    """Pure grid dynamics: (next_obs, reward, reached_goal)."""
    a = _check_discrete(action)
    dx, dy = MOVES[a]
    x = min(max(int(state[0]) + dx, 0), spec.width - 1)
    y = min(max(int(state[1]) + dy, 0), spec.height - 1)
    cell = (x, y)
    reward = spec.step_reward
    if cell == spec.goal:
        reward += spec.goal_reward
    elif cell in spec.penalty_cells:
        reward += spec.penalty_reward
    return np.array(cell, dtype=float), reward, cell == spec.goal


def mc_transition(spec: MountainCarSpec, state, action) -> tuple[np.ndarray, float, bool]:
    """Pure mountain car dynamics: (next_obs, reward, reached_goal)."""
    force = min(max(_check_continuous(action), -1.0), 1.0)
    position, velocity = float(state[0]), float(state[1])
    velocity += force * spec.power - spec.gravity_coeff * math.cos(3 * position)
    velocity = min(max(velocity, -spec.max_speed), spec.max_speed)
    position += velocity
    position = min(max(position, spec.min_position), spec.max_position)
    if position == spec.min_position:
        velocity = 0.0
    done = position >= spec.goal_position
    reward = (spec.goal_reward if done else 0.0) - spec.action_cost * force * force
    return np.array([position, velocity]), reward, done


class GridWorld:
    discrete = True
    n_actions = 4
    obs_dim = 2

    def __init__(self, spec: GridWorldSpec):
        spec.validate()
        self.spec = spec
        self.state = np.array(spec.start, dtype=float)
        self.t = 0

    @property
    def max_steps(self) -> int:
        return self.spec.max_steps

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = np.array(self.spec.start, dtype=float)
        self.t = 0
        return self.state.copy()

    def step(self, action) -> StepResult:
        nxt, reward, done = grid_transition(self.spec, self.state, action)
        self.state = nxt
        self.t += 1
        return StepResult(nxt.copy(), reward, done, (not done) and self.t >= self.spec.max_steps)

    def normalize(self, obs) -> np.ndarray:
        return normalize(self.spec, obs)

    def denormalize(self, obs) -> np.ndarray:
        return denormalize(self.spec, obs)


class MountainCar:
    discrete = False
    n_actions = 1
    obs_dim = 2

    def __init__(self, spec: MountainCarSpec):
        spec.validate()
        self.spec = spec
        self.state = np.array([sum(spec.start_position_range) / 2, 0.0])
        self.t = 0

    @property
    def max_steps(self) -> int:
        return self.spec.max_steps

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        lo, hi = self.spec.start_position_range
        rng = rng if rng is not None else np.random.default_rng()
        position = lo if lo == hi else float(rng.uniform(lo, hi))
        self.state = np.array([position, 0.0])
        self.t = 0
        return self.state.copy()

    def step(self, action) -> StepResult:
        nxt, reward, done = mc_transition(self.spec, self.state, action)
        self.state = nxt
        self.t += 1
        return StepResult(nxt.copy(), reward, done, (not done) and self.t >= self.spec.max_steps)

    def normalize(self, obs) -> np.ndarray:
        return normalize(self.spec, obs)

    def denormalize(self, obs) -> np.ndarray:
        return denormalize(self.spec, obs)


def bounds(spec) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(spec, GridWorldSpec):
        lo = np.zeros(2)
        span = np.array([spec.width - 1, spec.height - 1], dtype=float)
    elif isinstance(spec, MountainCarSpec):
        lo = np.array([spec.min_position, -spec.max_speed])
        span = np.array([spec.max_position - spec.min_position, 2 * spec.max_speed])
    else:
        raise ConfigurationError(f"no bounds for {type(spec).__name__}")
    if np.any(span <= 0):
        raise ConfigurationError("zero-width bound: cannot normalize (grid width/height must exceed 1)")
    return lo, span


def normalize(spec, obs) -> np.ndarray:
    """Map an observation linearly onto [0, 1]^2 using the environment bounds."""
    lo, span = bounds(spec)
    return (np.asarray(obs, dtype=float) - lo) / span


def denormalize(spec, obs) -> np.ndarray:
    lo, span = bounds(spec)
    return np.asarray(obs, dtype=float) * span + lo


def make_env(spec):
    if isinstance(spec, GridWorldSpec):
        return GridWorld(spec)
    if isinstance(spec, MountainCarSpec):
        return MountainCar(spec)
    raise ConfigurationError(f"unknown spec type {type(spec).__name__}")


def return_range(spec) -> tuple[float, float]:
    """(worst, best) attainable single-episode return, used to put domains on one scale."""
    if isinstance(spec, GridWorldSpec):
        best = spec.goal_reward + spec.step_reward * shortest_path_length(spec)
        worst = spec.max_steps * (spec.step_reward + min(spec.penalty_reward, 0.0))
    else:
        best = spec.goal_reward
        worst = -spec.action_cost * spec.max_steps
    return worst, best


def shortest_path_length(spec: GridWorldSpec, avoid_penalties: bool = True) -> int:
    """BFS step count from start to goal; penalty cells are impassable when avoided.

    Falls back to the unconstrained distance if penalties wall the goal off.
    """
    from collections import deque

    blocked = spec.penalty_cells if avoid_penalties else frozenset()
    seen = {spec.start: 0}
    queue = deque([spec.start])
    while queue:
        cell = queue.popleft()
        if cell == spec.goal:
            return seen[cell]
        for dx, dy in MOVES.values():
            nxt = (cell[0] + dx, cell[1] + dy)
            if spec.in_bounds(nxt) and nxt not in blocked and nxt not in seen:
                seen[nxt] = seen[cell] + 1
                queue.append(nxt)
    if avoid_penalties:
        return shortest_path_length(spec, avoid_penalties=False)
    raise ConfigurationError("goal unreachable")
