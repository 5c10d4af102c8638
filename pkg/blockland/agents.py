"""
Policies that drive an agent: the scripted human walkers, an idle stub and
policies read from checkpoints.

Any place that accepts a checkpoint path also accepts the selector strings
of :data:`SCRIPTED_POLICIES`, see :func:`resolve_policy`.
"""

import logging
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Type

import numpy as np

try:
    # Only raise an exception on instantiation but allow module
    # to be imported
    from wrapt import ObjectProxy

    import_exc = None
except ImportError as exc:
    ObjectProxy = object
    import_exc = exc

from blockland import UsageError
from blockland.checkpoint import load_checkpoint, params_digest
from blockland.env import Action, Agent, MOVE_ACTIONS, N_ACTIONS
from blockland.nn import ActorCriticParams, forward_actor, sample_action

log = logging.getLogger("blockland.agents")

NATURAL_WALK_MIN_STEPS = 5
NATURAL_WALK_MAX_STEPS = 15


def arand_action(rng: np.random.Generator) -> Action:
    """Each of the six actions with probability 1/6."""
    return Action(int(rng.integers(N_ACTIONS)))


@dataclass(frozen=True)
class NaturalWalkState:
    """The leg the natural walker is on.

    The initial state has ``remaining == 0``, so the first call draws a leg.
    """

    current_direction: Action = Action.MOVE_UP
    remaining: int = 0


def natural_walk_action(
    state: NaturalWalkState, rng: np.random.Generator
) -> Tuple[Action, NaturalWalkState]:
    """Walk in one direction for a uniformly drawn 5 to 15 steps, then draw again.

    A new leg draws the direction first (uniform over the four moves) and
    then the duration (uniform over the integers 5..15).
    """
    direction, remaining = state.current_direction, state.remaining
    if remaining == 0:
        direction = MOVE_ACTIONS[int(rng.integers(len(MOVE_ACTIONS)))]
        remaining = int(rng.integers(NATURAL_WALK_MIN_STEPS, NATURAL_WALK_MAX_STEPS + 1))
    return direction, NaturalWalkState(direction, remaining - 1)


class Policy(metaclass=ABCMeta):
    """Chooses the actions of one agent.

    Per-episode memory lives in an explicit state object so one policy
    instance can serve several environments::

        state = policy.initial_state()
        action, state = policy.act(obs, rng, state)
    """

    #: selector string or checkpoint path this policy was resolved from
    tag: str = "unknown"

    def initial_state(self) -> Any:
        return None

    @abstractmethod
    def act(self, obs: np.ndarray, rng: np.random.Generator, state: Any) -> Tuple[int, Any]:
        """Choose an action for observation ``obs``, drawing randomness from ``rng``."""

    def state_to_dict(self, state: Any) -> Any:
        return None

    def state_from_dict(self, document: Any) -> Any:
        return self.initial_state()


class RandomWalker(Policy):
    tag = "arand"

    def act(self, obs, rng, state):
        return int(arand_action(rng)), state


class NaturalWalker(Policy):
    tag = "natural"

    def initial_state(self) -> NaturalWalkState:
        return NaturalWalkState()

    def act(self, obs, rng, state):
        action, state = natural_walk_action(state, rng)
        return int(action), state

    def state_to_dict(self, state: NaturalWalkState) -> Dict[str, int]:
        return {"current_direction": int(state.current_direction), "remaining": state.remaining}

    def state_from_dict(self, document) -> NaturalWalkState:
        return NaturalWalkState(Action(document["current_direction"]), int(document["remaining"]))


class IdlePolicy(Policy):
    """Always emits NOOP; used to isolate the motion of the other agent."""

    tag = "noop"

    def act(self, obs, rng, state):
        return int(Action.NOOP), state


class CheckpointPolicy(Policy):
    """Samples actions from the actor network of a checkpoint."""

    def __init__(self, params: ActorCriticParams, tag: str = "checkpoint", meta=None) -> None:
        self.params = params
        self.tag = tag
        self.meta = dict(meta or {})

    @property
    def role(self) -> Optional[Agent]:
        role = self.meta.get("role")
        return Agent(role) if role else None

    def act(self, obs, rng, state):
        action, _ = sample_action(forward_actor(self.params, obs), rng)
        return action, state


class FrozenPolicy(ObjectProxy):  # pylint: disable=abstract-method
    """
    Wraps a :class:`CheckpointPolicy` whose parameters must not change,
    e.g. a victim while an adversary is trained against it.

    The parameter arrays are made read-only and their digest is recorded;
    :meth:`verify` checks that it is unchanged.
    """

    def __init__(self, policy: CheckpointPolicy):
        if import_exc is not None:
            raise import_exc

        super().__init__(policy)
        policy.params.set_read_only()
        self._self_digest = params_digest(policy.params)

    @property
    def digest(self) -> str:
        return self._self_digest

    def verify(self) -> None:
        if params_digest(self.__wrapped__.params) != self._self_digest:
            raise UsageError(f"frozen policy {self.__wrapped__.tag} was modified")


# selector => policy class
SCRIPTED_POLICIES: Dict[str, Type[Policy]] = {
    "arand": RandomWalker,
    "natural": NaturalWalker,
    "noop": IdlePolicy,
}

VALID_SCRIPTED = frozenset(SCRIPTED_POLICIES.keys())


def resolve_policy(selector: str, role: Optional[Agent] = None) -> Policy:
    """Turn a selector string or a checkpoint path into a policy.

    :param role: if given, a checkpoint trained for the other role is rejected
    :raises blockland.UsageError: on a role mismatch
    :raises blockland.CheckpointError: if the checkpoint is malformed
    """
    if selector in SCRIPTED_POLICIES:
        return SCRIPTED_POLICIES[selector]()

    checkpoint = load_checkpoint(selector)
    policy = CheckpointPolicy(checkpoint.params, tag=str(selector), meta=checkpoint.meta)
    if role is not None and policy.role is not None and policy.role is not role:
        raise UsageError(
            f"{selector} was trained as {policy.role.value}, cannot act as {role.value}"
        )
    return policy
