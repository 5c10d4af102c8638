"""
On-policy PPO: vectorised rollout collection, generalised advantage
estimation, the clipped-surrogate update and the training loop with its
run directory::

    run_dir/
        manifest.json          provenance, the only file with timestamps
        config.json            resolved PPOConfig, seed, role, level
        checkpoints/ckpt_0000.json ... ckpt_0192.json
        final.json
        training_log.csv
        resume.json            state to continue from the last checkpoint
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterator, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from blockland import ConfigurationError, TrainingFault, UsageError
from blockland.agents import CheckpointPolicy, FrozenPolicy, Policy
from blockland.checkpoint import (
    checkpoint_digest,
    load_checkpoint,
    optimizer_from_dict,
    optimizer_to_dict,
    save_checkpoint,
)
from blockland.env import Agent
from blockland.io.csv import TRAINING_LOG_COLUMNS, CSVWriter, read_table
from blockland.level import LevelSpec
from blockland.manifest import RunManifest
from blockland.nn import (
    OBS_SIZE,
    ActorCriticParams,
    AdamState,
    LossSpec,
    Minibatch,
    adam_update,
    backward,
    clip_global_norm,
    forward_actor,
    forward_critic,
    init_params,
    sample_action,
)
from blockland.util import make_rng, restore_rng, rng_state, write_json
from blockland.vec_env import EndKind, VecEnv

log = logging.getLogger("blockland.ppo")

#: random stream of the minibatch shuffles; streams 0..n_envs-1 belong to the environments
SHUFFLE_STREAM = 10_001

CHECKPOINT_DIR = "checkpoints"
FINAL_NAME = "final.json"
LOG_NAME = "training_log.csv"
CONFIG_NAME = "config.json"
RESUME_NAME = "resume.json"


@dataclass(frozen=True)
class PPOConfig:
    """Hyperparameters of one training run.

    ``workers`` only sets how many threads step the environments; results
    do not depend on it.
    """

    n_envs: int = 8
    rollout_len: int = 512
    total_steps: int = 800_000
    lr: float = 0.001
    minibatch_size: int = 64
    epochs: int = 10
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    checkpoint_every: int = 8
    workers: int = 1

    def __post_init__(self) -> None:
        for name in (
            "n_envs",
            "rollout_len",
            "total_steps",
            "minibatch_size",
            "epochs",
            "checkpoint_every",
            "workers",
        ):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        for name in ("lr", "clip_range", "vf_coef", "max_grad_norm"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not self.ent_coef >= 0:
            raise ConfigurationError(f"ent_coef must not be negative, got {self.ent_coef!r}")
        for name in ("gamma", "gae_lambda"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {getattr(self, name)!r}")
        if self.batch_size % self.minibatch_size:
            raise ConfigurationError(
                f"n_envs * rollout_len = {self.batch_size} is not divisible "
                f"by minibatch_size = {self.minibatch_size}"
            )

    @property
    def batch_size(self) -> int:
        return self.n_envs * self.rollout_len

    @property
    def n_minibatches(self) -> int:
        return self.batch_size // self.minibatch_size

    @property
    def n_rollouts(self) -> int:
        """Rollouts until ``total_steps`` is reached or exceeded."""
        return math.ceil(self.total_steps / self.batch_size)

    def loss_spec(self) -> LossSpec:
        return LossSpec(clip_range=self.clip_range, ent_coef=self.ent_coef, vf_coef=self.vf_coef)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PPOConfig":
        """Build a config from the matching keys of ``values``; other keys are ignored."""
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})


class RolloutBuffer:
    """Transitions of one rollout, indexed ``[t, env]``.

    ``next_values`` holds, for slots whose episode was truncated, the
    critic's value of the observation the episode ended in; it is unused
    elsewhere.
    """

    def __init__(self, n_envs: int, rollout_len: int, obs_size: int = OBS_SIZE) -> None:
        self.n_envs = n_envs
        self.rollout_len = rollout_len
        shape = (rollout_len, n_envs)
        self.obs = np.zeros(shape + (obs_size,))
        self.actions = np.zeros(shape, dtype=np.int64)
        self.log_probs = np.zeros(shape)
        self.values = np.zeros(shape)
        self.rewards = np.zeros(shape)
        self.robot_rewards = np.zeros(shape)
        self.end_kinds = np.zeros(shape, dtype=np.int8)
        self.next_values = np.zeros(shape)
        self.advantages = np.zeros(shape)
        self.returns = np.zeros(shape)
        self.pos = 0
        self.advantages_computed = False

    @property
    def capacity(self) -> int:
        return self.n_envs * self.rollout_len

    @property
    def full(self) -> bool:
        return self.pos == self.rollout_len

    def reset(self) -> None:
        self.pos = 0
        self.advantages_computed = False

    def add(
        self,
        obs: np.ndarray,
        actions: np.ndarray,
        log_probs: np.ndarray,
        values: np.ndarray,
        rewards: np.ndarray,
        end_kinds: np.ndarray,
        next_values: Optional[np.ndarray] = None,
        robot_rewards: Optional[np.ndarray] = None,
    ) -> None:
        """Store one step of every environment."""
        if self.full:
            raise UsageError("rollout buffer is full")
        t = self.pos
        self.obs[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.end_kinds[t] = end_kinds
        self.next_values[t] = 0.0 if next_values is None else next_values
        self.robot_rewards[t] = rewards if robot_rewards is None else robot_rewards
        self.pos += 1

    def flatten(self, name: str) -> np.ndarray:
        """One field with the samples of each environment contiguous."""
        array = getattr(self, name)
        return array.swapaxes(0, 1).reshape((self.capacity,) + array.shape[2:])

    def samples(self) -> Minibatch:
        """All samples of the rollout as one flat batch."""
        return Minibatch(
            obs=self.flatten("obs"),
            actions=self.flatten("actions"),
            old_log_prob=self.flatten("log_probs"),
            advantages=self.flatten("advantages"),
            returns=self.flatten("returns"),
        )


def collect_rollout(
    vec_env: VecEnv, params: ActorCriticParams, buffer: RolloutBuffer
) -> Tuple[np.ndarray, List[float]]:
    """Fill ``buffer`` by stepping ``vec_env`` with actions sampled from the actor.

    The learner's action in environment ``i`` is drawn from that
    environment's random stream before the opponent acts in it.

    :returns: the critic's values of the observations after the last step
              and the learner returns of the episodes that finished
    :raises blockland.EnvironmentFault: if an environment step fails
    """
    if buffer.n_envs != vec_env.n_envs:
        raise UsageError(f"buffer holds {buffer.n_envs} environments, got {vec_env.n_envs}")
    buffer.reset()
    finished: List[float] = []
    while not buffer.full:
        obs = vec_env.observations()
        logits = forward_actor(params, obs)
        values = forward_critic(params, obs)
        actions = np.zeros(vec_env.n_envs, dtype=np.int64)
        log_probs = np.zeros(vec_env.n_envs)
        for i in range(vec_env.n_envs):
            actions[i], log_probs[i] = sample_action(logits[i], vec_env.rngs[i])

        result = vec_env.step(actions)

        next_values = np.zeros(vec_env.n_envs)
        truncated = np.flatnonzero(result.end_kinds == EndKind.TRUNCATED)
        if truncated.size:
            next_values[truncated] = forward_critic(params, result.final_obs[truncated])

        buffer.add(
            obs,
            actions,
            log_probs,
            values,
            result.rewards,
            result.end_kinds,
            next_values,
            result.robot_rewards,
        )
        finished.extend(result.finished_returns)

    return forward_critic(params, vec_env.observations()), finished


def compute_gae(
    buffer: RolloutBuffer,
    bootstrap_values: np.ndarray,
    gamma: float = 0.99,
    gae_lambda: float = 0.95,
) -> None:
    """Advantages and return targets, by reverse recursion over each environment.

    A terminated step contributes ``r - V``; a truncated one bootstraps with
    the critic's value of the observation the episode ended in. The
    advantage never flows across an episode boundary. The last slot
    bootstraps with ``bootstrap_values``.

    :raises blockland.UsageError: if the buffer is not full or was already processed
    """
    if not buffer.full:
        raise UsageError("advantages need a full rollout buffer")
    if buffer.advantages_computed:
        raise UsageError("advantages were already computed for this rollout")

    next_advantage = np.zeros(buffer.n_envs)
    next_value = np.asarray(bootstrap_values, dtype=np.float64)
    for t in reversed(range(buffer.rollout_len)):
        kind = buffer.end_kinds[t]
        value_after = np.where(kind == EndKind.TRUNCATED, buffer.next_values[t], next_value)
        not_terminated = (kind != EndKind.TERMINATED).astype(np.float64)
        continues = (kind == EndKind.NONE).astype(np.float64)
        delta = buffer.rewards[t] + gamma * value_after * not_terminated - buffer.values[t]
        next_advantage = delta + gamma * gae_lambda * continues * next_advantage
        buffer.advantages[t] = next_advantage
        next_value = buffer.values[t]

    buffer.returns[:] = buffer.advantages + buffer.values
    buffer.advantages_computed = True


def minibatch_indices(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch: a fresh permutation of ``range(n)`` cut into consecutive minibatches."""
    permutation = rng.permutation(n)
    for start in range(0, n, size):
        yield permutation[start : start + size]


class UpdateStats(NamedTuple):
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    n_minibatches: int


def ppo_update(
    params: ActorCriticParams,
    buffer: RolloutBuffer,
    adam_state: AdamState,
    config: PPOConfig,
    rng: np.random.Generator,
) -> Tuple[ActorCriticParams, AdamState, UpdateStats]:
    """``config.epochs`` sweeps over the shuffled buffer, one Adam step per minibatch.

    :raises blockland.TrainingFault: with the epoch and minibatch index on non-finite numbers
    """
    if not buffer.advantages_computed:
        raise UsageError("ppo_update needs the advantages of the rollout")
    spec = config.loss_spec()
    samples = buffer.samples()
    terms = []
    for epoch in range(config.epochs):
        for index, indices in enumerate(minibatch_indices(buffer.capacity, config.minibatch_size, rng)):
            batch = Minibatch(*(field[indices] for field in samples))
            try:
                _, grads, loss_terms = backward(params, batch, spec)
                grads = clip_global_norm(grads, config.max_grad_norm)
                params, adam_state = adam_update(params, grads, adam_state, config.lr)
            except TrainingFault as e:
                raise TrainingFault(e.message, epoch=epoch, minibatch=index, **e.diagnostics) from e
            terms.append(loss_terms)

    stats = UpdateStats(
        policy_loss=float(np.mean([t.policy_loss for t in terms])),
        value_loss=float(np.mean([t.value_loss for t in terms])),
        entropy=float(np.mean([t.entropy for t in terms])),
        clip_fraction=float(np.mean([t.clip_fraction for t in terms])),
        approx_kl=float(np.mean([t.approx_kl for t in terms])),
        n_minibatches=len(terms),
    )
    if not math.isfinite(stats.approx_kl):
        raise TrainingFault("non-finite KL estimate", **stats._asdict())
    return params, adam_state, stats


class TrainingResult(NamedTuple):
    final_checkpoint: str
    checkpoints: List[str]
    manifest: RunManifest


def opponent_identity(opponent: Policy) -> Dict[str, str]:
    """``{"tag": ...}``, plus the parameter digest for checkpoint opponents."""
    identity = {"tag": str(opponent.tag)}
    digest = getattr(opponent, "digest", None)
    if isinstance(digest, str):
        identity["digest"] = digest
    return identity


def _checkpoint_name(rollout: int) -> str:
    return os.path.join(CHECKPOINT_DIR, f"ckpt_{rollout:04}.json")


def _rewrite_log(path: str, last_rollout: int) -> None:
    """Drop log rows written after the checkpoint a run resumes from."""
    rows = read_table(path, TRAINING_LOG_COLUMNS) if os.path.exists(path) else []
    with CSVWriter(path, TRAINING_LOG_COLUMNS) as writer:
        for row in rows:
            if int(row["rollout"]) <= last_rollout:
                writer.write_row(row)


def train(
    level: LevelSpec,
    opponent: Policy,
    config: PPOConfig,
    seed: int,
    run_dir: str,
    learner_role: Agent = Agent.ROBOT,
    resume: bool = False,
    command: str = "train",
) -> TrainingResult:
    """Train a fresh actor-critic for ``learner_role`` against ``opponent``.

    A checkpoint opponent is frozen for the duration of the run. On any
    failure the manifest is saved with status ``failed``; if a checkpoint
    was reached, ``train(..., resume=True)`` continues from it and finishes
    bitwise identical to an uninterrupted run.

    :raises blockland.TrainingFault: on non-finite numbers
    :raises blockland.EnvironmentFault: if an environment step fails
    """
    if isinstance(opponent, CheckpointPolicy) and not isinstance(opponent, FrozenPolicy):
        opponent = FrozenPolicy(opponent)  # type: ignore

    os.makedirs(os.path.join(run_dir, CHECKPOINT_DIR), exist_ok=True)
    log_path = os.path.join(run_dir, LOG_NAME)
    resume_path = os.path.join(run_dir, RESUME_NAME)

    manifest = RunManifest(
        command=command,
        config=config.to_dict(),
        level=level.to_dict(),
        seeds=[seed],
        opponent=opponent_identity(opponent),
        details={"role": learner_role.value, "opponent_sampling": "stochastic"},
    )
    if isinstance(opponent, FrozenPolicy) and os.path.isfile(str(opponent.tag)):
        manifest.victim = {
            "checkpoint": str(opponent.tag),
            "file_digest": checkpoint_digest(str(opponent.tag)),
            "params_digest": opponent.digest,
        }
    write_json(
        os.path.join(run_dir, CONFIG_NAME),
        {
            "ppo": config.to_dict(),
            "seed": seed,
            "role": learner_role.value,
            "opponent": opponent_identity(opponent),
            "level": level.to_dict(),
        },
    )
    manifest.add_artifact(CONFIG_NAME)
    manifest.save(run_dir)

    vec_env = VecEnv(level, config.n_envs, learner_role, opponent, seed, workers=config.workers)
    buffer = RolloutBuffer(config.n_envs, config.rollout_len)
    checkpoints: List[str] = []
    last_checkpoint: Optional[str] = None

    def meta(rollout: int, env_steps: int) -> Dict[str, Any]:
        return {
            "seed": seed,
            "trained_env_steps": env_steps,
            "opponent_tag": str(opponent.tag),
            "role": learner_role.value,
            "rollout": rollout,
        }

    try:
        if resume and os.path.exists(resume_path):
            with open(resume_path, "r") as f:
                state = json.load(f)
            rollout, env_steps = int(state["rollout"]), int(state["env_steps"])
            last_checkpoint = state["checkpoint"]
            params = load_checkpoint(os.path.join(run_dir, last_checkpoint)).params
            adam = optimizer_from_dict(state["optimizer"], params)
            vec_env.load_state_dict(state["vec_env"])
            shuffle_rng = restore_rng(state["shuffle_rng"])
            checkpoints = [
                _checkpoint_name(r)
                for r in range(0, rollout + 1, config.checkpoint_every)
                if os.path.exists(os.path.join(run_dir, _checkpoint_name(r)))
            ]
            _rewrite_log(log_path, rollout)
            manifest.details["resumed_from_rollout"] = rollout
            log.info("resuming %s at rollout %d", run_dir, rollout)
        else:
            rollout, env_steps = 0, 0
            params = init_params(seed)
            adam = AdamState.zeros(params)
            shuffle_rng = make_rng(seed, SHUFFLE_STREAM)
            CSVWriter(log_path, TRAINING_LOG_COLUMNS).stop()
            last_checkpoint = _checkpoint_name(0)
            save_checkpoint(os.path.join(run_dir, last_checkpoint), params, meta(0, 0))
            checkpoints.append(last_checkpoint)

        while rollout < config.n_rollouts:
            bootstrap, finished = collect_rollout(vec_env, params, buffer)
            compute_gae(buffer, bootstrap, config.gamma, config.gae_lambda)
            try:
                params, adam, stats = ppo_update(params, buffer, adam, config, shuffle_rng)
            except TrainingFault as e:
                raise TrainingFault(e.message, rollout=rollout + 1, **e.diagnostics) from e
            rollout += 1
            env_steps += config.batch_size

            mean_return = math.fsum(finished) / len(finished) if finished else None
            with CSVWriter(log_path, TRAINING_LOG_COLUMNS, append=True) as writer:
                writer.write_row(
                    [
                        rollout,
                        env_steps,
                        mean_return,
                        stats.policy_loss,
                        stats.value_loss,
                        stats.entropy,
                        stats.clip_fraction,
                        stats.approx_kl,
                    ]
                )
            log.info(
                "rollout %d/%d env_steps=%d mean_return=%s policy_loss=%.5f value_loss=%.5f "
                "entropy=%.4f clip_fraction=%.3f kl=%.5f",
                rollout,
                config.n_rollouts,
                env_steps,
                "n/a" if mean_return is None else f"{mean_return:.3f}",
                stats.policy_loss,
                stats.value_loss,
                stats.entropy,
                stats.clip_fraction,
                stats.approx_kl,
            )

            if rollout % config.checkpoint_every == 0:
                last_checkpoint = _checkpoint_name(rollout)
                save_checkpoint(
                    os.path.join(run_dir, last_checkpoint), params, meta(rollout, env_steps)
                )
                checkpoints.append(last_checkpoint)
                write_json(
                    resume_path,
                    {
                        "rollout": rollout,
                        "env_steps": env_steps,
                        "checkpoint": last_checkpoint,
                        "optimizer": optimizer_to_dict(adam),
                        "vec_env": vec_env.state_dict(),
                        "shuffle_rng": rng_state(shuffle_rng),
                    },
                )
                log.info("checkpoint %s written", last_checkpoint)

        final_path = os.path.join(run_dir, FINAL_NAME)
        save_checkpoint(final_path, params, meta(rollout, env_steps))
        if isinstance(opponent, FrozenPolicy):
            opponent.verify()
    except BaseException as e:
        manifest.fail(e)
        manifest.details["last_checkpoint"] = last_checkpoint
        manifest.details["resumable"] = os.path.exists(resume_path)
        manifest.save(run_dir)
        raise
    finally:
        vec_env.close()

    for artifact in checkpoints + [FINAL_NAME, LOG_NAME]:
        manifest.add_artifact(artifact)
    if os.path.exists(resume_path):
        manifest.add_artifact(RESUME_NAME)
    manifest.details["rollouts"] = rollout
    manifest.details["trained_env_steps"] = env_steps
    manifest.complete()
    manifest.save(run_dir)
    log.info("training finished: %s", final_path)
    return TrainingResult(final_path, [os.path.join(run_dir, c) for c in checkpoints], manifest)
