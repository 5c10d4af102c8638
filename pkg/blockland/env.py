"""
Deterministic simulation of a Blockland level with two agents, two boxes
and one cart.

Positions are continuous, actions discrete. The robot lives on the low-x
side of the road, the human on the high-x side; moves are clamped to the
agent's own side, so an agent may stand on a road edge but never inside
the road.

Action encoding (fixed):

    ==  ==========  ==============
    0   MOVE_UP     y += move_step
    1   MOVE_DOWN   y -= move_step
    2   MOVE_LEFT   x -= move_step
    3   MOVE_RIGHT  x += move_step
    4   NOOP
    5   INTERACT
    ==  ==========  ==============

Within one step the robot's action is resolved before the human's.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from blockland import UsageError
from blockland.level import LevelSpec
from blockland.typechecking import Point

log = logging.getLogger("blockland.env")

OBSERVATION_SIZE = 12

#: names of the observation components, in order
OBSERVATION_FIELDS = (
    "self_x",
    "self_y",
    "other_x",
    "other_y",
    "box1_x",
    "box1_y",
    "box2_x",
    "box2_y",
    "cart_x",
    "cart_y",
    "self_held",
    "other_held",
)


class Action(IntEnum):
    MOVE_UP = 0
    MOVE_DOWN = 1
    MOVE_LEFT = 2
    MOVE_RIGHT = 3
    NOOP = 4
    INTERACT = 5


N_ACTIONS = len(Action)

MOVE_ACTIONS = (Action.MOVE_UP, Action.MOVE_DOWN, Action.MOVE_LEFT, Action.MOVE_RIGHT)

_DISPLACEMENT = {
    Action.MOVE_UP: (0.0, 1.0),
    Action.MOVE_DOWN: (0.0, -1.0),
    Action.MOVE_LEFT: (-1.0, 0.0),
    Action.MOVE_RIGHT: (1.0, 0.0),
}


class Agent(Enum):
    ROBOT = "robot"
    HUMAN = "human"

    @property
    def other(self) -> "Agent":
        return Agent.HUMAN if self is Agent.ROBOT else Agent.ROBOT


class BoxLocation(Enum):
    ON_FLOOR = "floor"
    HELD_BY_ROBOT = "robot"
    HELD_BY_HUMAN = "human"
    ON_CART = "cart"


_HELD_BY = {Agent.ROBOT: BoxLocation.HELD_BY_ROBOT, Agent.HUMAN: BoxLocation.HELD_BY_HUMAN}


@dataclass(frozen=True)
class BoxState:
    pos: Point
    location: BoxLocation = BoxLocation.ON_FLOOR


@dataclass(frozen=True)
class EnvState:
    """The complete world state. Instances are immutable; :func:`step` returns new ones."""

    t: int
    robot_pos: Point
    human_pos: Point
    boxes: Tuple[BoxState, BoxState]
    terminated: bool = False
    truncated: bool = False

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated

    def position_of(self, agent: Agent) -> Point:
        return self.robot_pos if agent is Agent.ROBOT else self.human_pos

    def held_box(self, agent: Agent) -> Optional[int]:
        """Index of the box held by ``agent``, or None."""
        for index, box in enumerate(self.boxes):
            if box.location is _HELD_BY[agent]:
                return index
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "robot_pos": list(self.robot_pos),
            "human_pos": list(self.human_pos),
            "boxes": [{"pos": list(b.pos), "location": b.location.value} for b in self.boxes],
            "terminated": self.terminated,
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "EnvState":
        boxes = tuple(
            BoxState(pos=tuple(b["pos"]), location=BoxLocation(b["location"]))
            for b in document["boxes"]
        )
        return cls(
            t=int(document["t"]),
            robot_pos=tuple(document["robot_pos"]),
            human_pos=tuple(document["human_pos"]),
            boxes=boxes,  # type: ignore
            terminated=bool(document["terminated"]),
            truncated=bool(document["truncated"]),
        )


@dataclass(frozen=True)
class StepResult:
    """What one step reports back.

    :attr robot_pickups: boxes the robot picked up during this step (0 or 1)
    :attr robot_places: boxes the robot placed on the cart during this step (0 or 1)
    """

    obs_robot: np.ndarray
    obs_human: np.ndarray
    reward_robot: float
    terminated: bool
    truncated: bool
    robot_pickups: int = 0
    robot_places: int = 0


def reset(spec: LevelSpec, seed: int = 0) -> Tuple[EnvState, np.ndarray, np.ndarray]:
    """Start an episode.

    The initial state does not depend on ``seed``; the seed only feeds the
    random streams of whoever drives the episode.
    """
    del seed
    state = EnvState(
        t=0,
        robot_pos=spec.robot_spawn,
        human_pos=spec.human_spawn,
        boxes=tuple(BoxState(pos=p) for p in spec.box_spawns),  # type: ignore
    )
    return state, observe(state, spec, Agent.ROBOT), observe(state, spec, Agent.HUMAN)


def _clamp(value: float, low: float, high: float) -> float:
    return low if value < low else high if value > high else value


def _side(spec: LevelSpec, agent: Agent) -> Tuple[float, float]:
    """Allowed x interval of ``agent``."""
    if agent is Agent.ROBOT:
        return 0.0, spec.road_low_edge
    return spec.road_high_edge, spec.x_max


def _resolve(
    state: EnvState, spec: LevelSpec, agent: Agent, action: Action
) -> Tuple[EnvState, int, int]:
    """Apply the action of one agent. Returns the new state, pickups and places."""
    pos = state.position_of(agent)
    boxes = list(state.boxes)
    held = state.held_box(agent)
    pickups = places = 0

    if action in _DISPLACEMENT:
        dx, dy = _DISPLACEMENT[action]
        x_low, x_high = _side(spec, agent)
        pos = (
            _clamp(pos[0] + dx * spec.move_step, x_low, x_high),
            _clamp(pos[1] + dy * spec.move_step, 0.0, spec.y_max),
        )
        if held is not None:
            boxes[held] = replace(boxes[held], pos=pos)

    elif action is Action.INTERACT:
        if held is None:
            nearest, nearest_distance = None, math.inf
            for index, box in enumerate(boxes):
                if box.location is not BoxLocation.ON_FLOOR:
                    continue
                distance = math.hypot(box.pos[0] - pos[0], box.pos[1] - pos[1])
                # ties keep the lower index
                if distance <= spec.interact_radius and distance < nearest_distance:
                    nearest, nearest_distance = index, distance
            if nearest is not None:
                boxes[nearest] = BoxState(pos=pos, location=_HELD_BY[agent])
                pickups = 1
        else:
            cart = spec.cart_pos
            if math.hypot(cart[0] - pos[0], cart[1] - pos[1]) <= spec.interact_radius:
                boxes[held] = BoxState(pos=cart, location=BoxLocation.ON_CART)
                places = 1

    if agent is Agent.ROBOT:
        state = replace(state, robot_pos=pos, boxes=tuple(boxes))
    else:
        state = replace(state, human_pos=pos, boxes=tuple(boxes))
    return state, pickups, places


def step(
    state: EnvState, spec: LevelSpec, a_robot: int, a_human: int
) -> Tuple[EnvState, StepResult]:
    """Advance the world by one step. This is a pure function of its arguments.

    :raises blockland.UsageError: if the episode already ended or an action is invalid
    """
    if state.done:
        raise UsageError("step called after the episode ended; call reset first")
    try:
        a_robot, a_human = Action(a_robot), Action(a_human)
    except ValueError as e:
        raise UsageError(f"invalid action: {e}") from None

    state, pickups, places = _resolve(state, spec, Agent.ROBOT, a_robot)
    state, _, _ = _resolve(state, spec, Agent.HUMAN, a_human)

    t = state.t + 1
    terminated = all(b.location is BoxLocation.ON_CART for b in state.boxes)
    truncated = not terminated and t >= spec.max_steps
    state = replace(state, t=t, terminated=terminated, truncated=truncated)

    reward = pickups * spec.reward_pickup + places * spec.reward_place - spec.step_penalty
    result = StepResult(
        obs_robot=observe(state, spec, Agent.ROBOT),
        obs_human=observe(state, spec, Agent.HUMAN),
        reward_robot=reward,
        terminated=terminated,
        truncated=truncated,
        robot_pickups=pickups,
        robot_places=places,
    )
    return state, result


def observe(state: EnvState, spec: LevelSpec, agent: Agent) -> np.ndarray:
    """The 12-component egocentric observation of ``agent``.

    Positions are mapped by ``x -> 2 x / x_max - 1`` and ``y -> 2 y / y_max - 1``.
    """
    sx = 2.0 / spec.x_max
    sy = 2.0 / spec.y_max
    own = state.position_of(agent)
    other = state.position_of(agent.other)
    box1, box2 = state.boxes
    cart = spec.cart_pos
    return np.array(
        [
            own[0] * sx - 1.0,
            own[1] * sy - 1.0,
            other[0] * sx - 1.0,
            other[1] * sy - 1.0,
            box1.pos[0] * sx - 1.0,
            box1.pos[1] * sy - 1.0,
            box2.pos[0] * sx - 1.0,
            box2.pos[1] * sy - 1.0,
            cart[0] * sx - 1.0,
            cart[1] * sy - 1.0,
            0.0 if state.held_box(agent) is None else 1.0,
            0.0 if state.held_box(agent.other) is None else 1.0,
        ],
        dtype=np.float64,
    )


def episode_return(trace: Iterable[StepResult]) -> float:
    """The robot's accumulated reward over one episode."""
    return math.fsum(result.reward_robot for result in trace)


def minimum_delivery_steps(spec: LevelSpec) -> int:
    """Fewest steps in which the robot alone can put both boxes on the cart.

    Breadth-first search over the states reachable with the human idle.
    """
    start, _, _ = reset(spec)
    frontier = deque([(start, 0)])
    seen = {(start.robot_pos, start.boxes)}
    while frontier:
        state, depth = frontier.popleft()
        for action in Action:
            successor, result = step(state, spec, action, Action.NOOP)
            if result.terminated:
                return depth + 1
            if result.truncated:
                continue
            key = (successor.robot_pos, successor.boxes)
            if key not in seen:
                seen.add(key)
                frontier.append((successor, depth + 1))
    raise UsageError(f"level {spec.name} cannot be completed by the robot")


class BlocklandEnv:
    """A stateful wrapper around :func:`reset` and :func:`step` for one episode stream."""

    def __init__(self, spec: LevelSpec) -> None:
        self.spec = spec
        self.state, self.obs_robot, self.obs_human = reset(spec)

    def reset(self, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        self.state, self.obs_robot, self.obs_human = reset(self.spec, seed)
        return self.obs_robot, self.obs_human

    def step(self, a_robot: int, a_human: int) -> StepResult:
        self.state, result = step(self.state, self.spec, a_robot, a_human)
        self.obs_robot, self.obs_human = result.obs_robot, result.obs_human
        return result

    def observation(self, agent: Agent) -> np.ndarray:
        return self.obs_robot if agent is Agent.ROBOT else self.obs_human

    def restore(self, state: EnvState) -> None:
        self.state = state
        self.obs_robot = observe(state, self.spec, Agent.ROBOT)
        self.obs_human = observe(state, self.spec, Agent.HUMAN)


def trace_counts(trace: Sequence[StepResult]) -> Tuple[int, int]:
    """Total robot pickups and places of an episode trace."""
    return (
        sum(r.robot_pickups for r in trace),
        sum(r.robot_places for r in trace),
    )
