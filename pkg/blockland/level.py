"""
This module contains :class:`LevelSpec`, the immutable description of a
Blockland level, and its JSON representation.

The JSON document has these fields (all positions in world units)::

    name             str      level name
    world_extent     [x, y]   the world is [0, x] x [0, y]
    road_x_range     [lo, hi] closed interval of x neither agent may enter
    robot_spawn      [x, y]   must lie strictly below lo
    human_spawn      [x, y]   must lie strictly above hi
    box_spawns       [[x, y], [x, y]]
    cart_pos         [x, y]
    move_step        float    displacement of one move action
    interact_radius  float    Euclidean reach of the interact action
    max_steps        int      episode cap
    reward_pickup    float
    reward_place     float
    step_penalty     float    subtracted from the robot reward every step
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Tuple

from pkg_resources import resource_string

from blockland import ConfigurationError
from blockland import typechecking
from blockland.typechecking import Point
from blockland.util import write_json

log = logging.getLogger("blockland.level")


def _point(name: str, value) -> Point:
    try:
        x, y = value
        return float(x), float(y)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a pair of numbers, got {value!r}")


@dataclass(frozen=True)
class LevelSpec:
    """Geometry, reward constants and episode limit of one level.

    Construction validates the level; invalid geometry raises
    :class:`~blockland.ConfigurationError`.
    """

    world_extent: Point = (12.0, 8.0)
    road_x_range: Point = (5.0, 7.0)
    robot_spawn: Point = (2.5, 4.0)
    human_spawn: Point = (9.5, 4.0)
    box_spawns: Tuple[Point, Point] = ((1.0, 1.0), (4.0, 7.0))
    cart_pos: Point = (1.0, 7.0)
    move_step: float = 0.25
    interact_radius: float = 1.0
    max_steps: int = 500
    reward_pickup: float = 1.0
    reward_place: float = 2.0
    step_penalty: float = 0.005
    name: str = field(default="twosides", compare=False)

    def __post_init__(self):
        x_max, y_max = self.world_extent
        lo, hi = self.road_x_range
        if not (x_max > 0 and y_max > 0):
            raise ConfigurationError("world_extent must be positive")
        if not 0 < lo <= hi < x_max:
            raise ConfigurationError(
                f"road_x_range {self.road_x_range} must lie inside (0, {x_max})"
            )
        if len(self.box_spawns) != 2:
            raise ConfigurationError("exactly two box_spawns are required")
        if self.move_step <= 0 or self.interact_radius <= 0:
            raise ConfigurationError("move_step and interact_radius must be positive")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")

        low_side = [("robot_spawn", self.robot_spawn), ("cart_pos", self.cart_pos)]
        low_side += [(f"box_spawns[{i}]", p) for i, p in enumerate(self.box_spawns)]
        for name, (x, y) in low_side:
            if not 0 <= x < lo or not 0 <= y <= y_max:
                raise ConfigurationError(
                    f"{name} ({x}, {y}) must lie strictly on the robot side of the road"
                )
        x, y = self.human_spawn
        if not hi < x <= x_max or not 0 <= y <= y_max:
            raise ConfigurationError(
                f"human_spawn ({x}, {y}) must lie strictly on the human side of the road"
            )

    @property
    def x_max(self) -> float:
        return self.world_extent[0]

    @property
    def y_max(self) -> float:
        return self.world_extent[1]

    @property
    def road_low_edge(self) -> float:
        return self.road_x_range[0]

    @property
    def road_high_edge(self) -> float:
        return self.road_x_range[1]

    @property
    def max_return(self) -> float:
        """The largest episodic return before step penalties."""
        return 2 * (self.reward_pickup + self.reward_place)

    def to_dict(self) -> typechecking.LevelDict:
        return {
            "name": self.name,
            "world_extent": list(self.world_extent),
            "road_x_range": list(self.road_x_range),
            "robot_spawn": list(self.robot_spawn),
            "human_spawn": list(self.human_spawn),
            "box_spawns": [list(p) for p in self.box_spawns],
            "cart_pos": list(self.cart_pos),
            "move_step": self.move_step,
            "interact_radius": self.interact_radius,
            "max_steps": self.max_steps,
            "reward_pickup": self.reward_pickup,
            "reward_place": self.reward_place,
            "step_penalty": self.step_penalty,
        }

    @classmethod
    def from_dict(cls, document) -> "LevelSpec":
        known = set(cls.__dataclass_fields__)  # pylint: disable=no-member
        unknown = set(document) - known
        if unknown:
            raise ConfigurationError(f"unknown level fields: {sorted(unknown)}")
        kwargs = dict(document)
        for key in ("world_extent", "road_x_range", "robot_spawn", "human_spawn", "cart_pos"):
            if key in kwargs:
                kwargs[key] = _point(key, kwargs[key])
        if "box_spawns" in kwargs:
            kwargs["box_spawns"] = tuple(
                _point(f"box_spawns[{i}]", p) for i, p in enumerate(kwargs["box_spawns"])
            )
        for key in ("move_step", "interact_radius", "reward_pickup", "reward_place", "step_penalty"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        if "max_steps" in kwargs:
            kwargs["max_steps"] = int(kwargs["max_steps"])
        return cls(**kwargs)


def load_level(path: typechecking.StringPathLike) -> LevelSpec:
    """Read a level from a JSON file. The name ``twosides`` selects the shipped level."""
    if str(path) == "twosides":
        return twosides()
    with open(path, "r") as f:
        try:
            document = json.load(f)
        except ValueError as e:
            raise ConfigurationError(f"level file {path} is not valid JSON: {e}")
    return LevelSpec.from_dict(document)


def save_level(spec: LevelSpec, path: typechecking.StringPathLike) -> None:
    write_json(path, spec.to_dict())


def twosides() -> LevelSpec:
    """The canonical level, read from the packaged ``twosides.json``."""
    document = json.loads(resource_string("blockland", "data/twosides.json"))
    return LevelSpec.from_dict(document)
