"""Types for mypy type-checking
"""

import typing

if typing.TYPE_CHECKING:
    import os

import mypy_extensions

# Used by the IO module
FileLike = typing.IO[typing.Any]
StringPathLike = typing.Union[str, "os.PathLike[str]"]
AcceptedIOType = typing.Optional[typing.Union[FileLike, StringPathLike]]

Point = typing.Tuple[float, float]

LevelDict = mypy_extensions.TypedDict(
    "LevelDict",
    {
        "name": str,
        "world_extent": typing.List[float],
        "road_x_range": typing.List[float],
        "robot_spawn": typing.List[float],
        "human_spawn": typing.List[float],
        "box_spawns": typing.List[typing.List[float]],
        "cart_pos": typing.List[float],
        "move_step": float,
        "interact_radius": float,
        "max_steps": int,
        "reward_pickup": float,
        "reward_place": float,
        "step_penalty": float,
    },
)

LayerDict = mypy_extensions.TypedDict(
    "LayerDict", {"weights": typing.List[typing.List[float]], "biases": typing.List[float]}
)

CheckpointMeta = mypy_extensions.TypedDict(
    "CheckpointMeta",
    {
        "architecture": typing.Dict[str, typing.Any],
        "seed": int,
        "trained_env_steps": int,
        "opponent_tag": str,
        "role": str,
        "assumptions": typing.Dict[str, str],
    },
    total=False,
)

OptimizerDict = mypy_extensions.TypedDict(
    "OptimizerDict",
    {
        "step_count": int,
        "beta1": float,
        "beta2": float,
        "eps": float,
        "m_actor": typing.List[LayerDict],
        "m_critic": typing.List[LayerDict],
        "v_actor": typing.List[LayerDict],
        "v_critic": typing.List[LayerDict],
    },
)

CheckpointDict = mypy_extensions.TypedDict(
    "CheckpointDict",
    {
        "meta": CheckpointMeta,
        "actor": typing.List[LayerDict],
        "critic": typing.List[LayerDict],
        "optimizer": typing.Optional[OptimizerDict],
    },
)

WorkbenchConfig = typing.NewType("WorkbenchConfig", dict)
