"""
The ``blockland`` package is a desk-scale workbench for observed-adversary
attacks on reinforcement-learning policies: a two-agent `twosides`
simulation, PPO implemented from scratch on numpy, the victim/adversary
experiment grid and the diagnostics used to analyse it.
"""

import logging

from typing import Dict, Any

__version__ = "1.0.0-dev"

log = logging.getLogger("blockland")

rc: Dict[str, Any] = dict()


class BlocklandError(Exception):
    """Base class for all errors raised by the workbench."""


class ConfigurationError(BlocklandError, ValueError):
    """Indicates an invalid level, training configuration or config source."""


class UsageError(BlocklandError):
    """Indicates that an operation was called in a state that forbids it."""


class CheckpointError(BlocklandError):
    """Indicates a malformed checkpoint. The message names the offending field."""

    def __init__(self, field: str, problem: str):
        self.field = field
        super().__init__(f"checkpoint field '{field}': {problem}")

        # keep reference to args for pickling
        self._args = field, problem

    def __reduce__(self):
        return CheckpointError, self._args, {}


class TrainingFault(BlocklandError, ArithmeticError):
    """Raised when training produces non-finite numbers.

    :attr dict diagnostics: whatever the failing stage knew about the fault,
                            e.g. the minibatch index and the loss terms
    """

    def __init__(self, message: str, **diagnostics: Any):
        self.message = message
        self.diagnostics = diagnostics
        details = ", ".join(f"{k}={v!r}" for k, v in sorted(diagnostics.items()))
        super().__init__(f"{message} ({details})" if details else message)

        self._args = message, diagnostics

    def __reduce__(self):
        message, diagnostics = self._args
        return _rebuild_training_fault, (message, diagnostics)


def _rebuild_training_fault(message, diagnostics):
    return TrainingFault(message, **diagnostics)


class EnvironmentFault(BlocklandError):
    """Wraps an exception raised while stepping one of several environments."""

    def __init__(self, env_index: int, t: int, cause: BaseException):
        self.env_index = env_index
        self.t = t
        super().__init__(f"environment {env_index} failed at t={t}: {cause}")


class ArtifactError(BlocklandError, OSError):
    """Indicates a missing or unreadable run artifact."""


from .util import set_logging_level, load_config

from .level import LevelSpec, load_level, twosides
from .env import (
    Action,
    Agent,
    BoxLocation,
    BoxState,
    EnvState,
    StepResult,
    reset,
    step,
    observe,
    episode_return,
)
from .agents import (
    Policy,
    NaturalWalkState,
    arand_action,
    natural_walk_action,
    resolve_policy,
    VALID_SCRIPTED,
)
from .nn import ActorCriticParams, AdamState, init_params
from .checkpoint import save_checkpoint, load_checkpoint, checkpoint_digest
from .ppo import PPOConfig, RolloutBuffer, train
from .manifest import RunManifest
from .harness import AgentRef, PairingResult, TransferMatrix, evaluate_pair
