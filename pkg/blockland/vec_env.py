"""
This module contains :class:`VecEnv`, a fixed set of environments stepped
in lock-step for one learning agent against one opponent policy.

Environment ``i`` owns random stream ``i`` of the run seed (see
:func:`blockland.util.derive_seed`). Everything random that happens in
environment ``i`` (the learner's sampled action, the opponent's action)
draws from that stream in a fixed order, so stepping the environments in
parallel gives bitwise the same results as stepping them one by one.
Finished episodes are reset automatically.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from blockland import EnvironmentFault
from blockland.agents import Policy
from blockland.env import Agent, BlocklandEnv, EnvState
from blockland.level import LevelSpec
from blockland.util import make_rng, restore_rng, rng_state

log = logging.getLogger("blockland.vec_env")


class EndKind(IntEnum):
    """How an episode ended on a given step."""

    NONE = 0
    TERMINATED = 1
    TRUNCATED = 2


class VecStepResult(NamedTuple):
    #: reward of the learning agent, ``(n_envs,)``
    rewards: np.ndarray
    #: reward of the robot, ``(n_envs,)``; equals ``rewards`` or its negation
    robot_rewards: np.ndarray
    #: :class:`EndKind` per environment
    end_kinds: np.ndarray
    #: learner observation right after the step, before any automatic reset
    final_obs: np.ndarray
    #: learner returns of the episodes that ended on this step
    finished_returns: List[float]


class VecEnv:
    """Several :class:`~blockland.env.BlocklandEnv` driven by one learner and one opponent."""

    def __init__(
        self,
        spec: LevelSpec,
        n_envs: int,
        learner_role: Agent,
        opponent: Policy,
        seed: int,
        workers: int = 1,
    ) -> None:
        """
        :param spec: the level every environment runs
        :param n_envs: number of environments
        :param learner_role: which agent the learner controls; the opponent controls the other
        :param opponent: policy of the other agent; its per-episode state is kept per environment
        :param seed: run seed the per-environment random streams derive from
        :param workers: number of threads used to step the environments
        """
        self.spec = spec
        self.n_envs = n_envs
        self.learner_role = learner_role
        self.opponent = opponent
        self.workers = workers
        self.rngs = [make_rng(seed, i) for i in range(n_envs)]
        self.envs = [BlocklandEnv(spec) for _ in range(n_envs)]
        self.opponent_states: List[Any] = [opponent.initial_state() for _ in range(n_envs)]
        self.episode_returns = [0.0] * n_envs
        self._executor: Optional[ThreadPoolExecutor] = None
        if workers > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=workers, thread_name_prefix="blockland.vec_env"
            )

    def observations(self) -> np.ndarray:
        """Current learner observations, ``(n_envs, obs_size)``."""
        return np.stack([env.observation(self.learner_role) for env in self.envs])

    def _step_one(self, index: int, learner_action: int):
        env = self.envs[index]
        t = env.state.t
        try:
            opponent_obs = env.observation(self.learner_role.other)
            opponent_action, self.opponent_states[index] = self.opponent.act(
                opponent_obs, self.rngs[index], self.opponent_states[index]
            )
            if self.learner_role is Agent.ROBOT:
                result = env.step(learner_action, opponent_action)
            else:
                result = env.step(opponent_action, learner_action)
        except Exception as e:
            raise EnvironmentFault(index, t, e) from e

        robot_reward = result.reward_robot
        reward = robot_reward if self.learner_role is Agent.ROBOT else -robot_reward
        self.episode_returns[index] += reward
        final_obs = env.observation(self.learner_role)

        kind = EndKind.NONE
        finished = None
        if result.terminated:
            kind = EndKind.TERMINATED
        elif result.truncated:
            kind = EndKind.TRUNCATED
        if kind is not EndKind.NONE:
            finished = self.episode_returns[index]
            self.episode_returns[index] = 0.0
            env.reset()
            self.opponent_states[index] = self.opponent.initial_state()
        return reward, robot_reward, kind, final_obs, finished

    def step(self, learner_actions: Sequence[int]) -> VecStepResult:
        """Step every environment once with the given learner actions."""
        if self._executor is not None:
            outcomes = list(
                self._executor.map(self._step_one, range(self.n_envs), learner_actions)
            )
        else:
            outcomes = [self._step_one(i, a) for i, a in enumerate(learner_actions)]

        return VecStepResult(
            rewards=np.array([o[0] for o in outcomes], dtype=np.float64),
            robot_rewards=np.array([o[1] for o in outcomes], dtype=np.float64),
            end_kinds=np.array([o[2] for o in outcomes], dtype=np.int8),
            final_obs=np.stack([o[3] for o in outcomes]),
            finished_returns=[o[4] for o in outcomes if o[4] is not None],
        )

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "VecEnv":
        return self

    def __exit__(self, *args) -> None:
        self.close()

    def state_dict(self) -> Dict[str, Any]:
        """Everything needed to continue these environments bitwise identically."""
        return {
            "envs": [env.state.to_dict() for env in self.envs],
            "opponent_states": [self.opponent.state_to_dict(s) for s in self.opponent_states],
            "rngs": [rng_state(rng) for rng in self.rngs],
            "episode_returns": list(self.episode_returns),
        }

    def load_state_dict(self, document: Dict[str, Any]) -> None:
        for env, state in zip(self.envs, document["envs"]):
            env.restore(EnvState.from_dict(state))
        self.opponent_states = [
            self.opponent.state_from_dict(s) for s in document["opponent_states"]
        ]
        self.rngs = [restore_rng(s) for s in document["rngs"]]
        self.episode_returns = [float(r) for r in document["episode_returns"]]
