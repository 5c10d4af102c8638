"""
Dense actor-critic networks with an exact, hand-written backward pass.

Both networks are multi-layer perceptrons with tanh hidden activations and a
linear head. The actor maps an observation to the logits of a categorical
distribution over actions, the critic maps it to a scalar value. They share
no parameters.

All arithmetic is done in 64-bit floating point. Weight matrices are stored
as ``(out, in)`` arrays, so a layer computes ``x @ W.T + b``.

With the canonical sizes (12 inputs, two hidden layers of 64, 6 actions)
the actor has 5,382 parameters and the critic 5,057.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from blockland import TrainingFault, UsageError
from blockland.util import make_rng

log = logging.getLogger("blockland.nn")

OBS_SIZE = 12
HIDDEN_SIZES = (64, 64)
N_ACTIONS = 6

ACTOR_PARAMETERS = 5382
CRITIC_PARAMETERS = 5057

HIDDEN_GAIN = math.sqrt(2)
ACTOR_HEAD_GAIN = 0.01
CRITIC_HEAD_GAIN = 1.0

#: random stream (see :func:`blockland.util.derive_seed`) used for initialisation
INIT_STREAM = 10_000

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-5

ADVANTAGE_EPS = 1e-8


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise UsageError(
                f"inconsistent layer shapes {self.weights.shape} and {self.biases.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.biases).all())


def _layer_sizes(layers: Sequence[DenseLayer]) -> List[int]:
    return [layers[0].n_in] + [layer.n_out for layer in layers]


@dataclass(frozen=True)
class ActorCriticParams:
    """Weights and biases of the actor and the critic network."""

    actor: Tuple[DenseLayer, ...]
    critic: Tuple[DenseLayer, ...]

    def __post_init__(self):
        for name, layers in (("actor", self.actor), ("critic", self.critic)):
            if not layers:
                raise UsageError(f"{name} needs at least one layer")
            for previous, layer in zip(layers, layers[1:]):
                if previous.n_out != layer.n_in:
                    raise UsageError(f"{name} layers do not chain")
        if self.critic[-1].n_out != 1:
            raise UsageError("critic must have a single output")
        if self.actor[0].n_in != self.critic[0].n_in:
            raise UsageError("actor and critic must read the same observation size")

    @property
    def obs_size(self) -> int:
        return self.actor[0].n_in

    @property
    def n_actions(self) -> int:
        return self.actor[-1].n_out

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        return tuple(_layer_sizes(self.actor)[1:-1])

    @property
    def actor_parameter_count(self) -> int:
        return sum(layer.size for layer in self.actor)

    @property
    def critic_parameter_count(self) -> int:
        return sum(layer.size for layer in self.critic)

    def architecture(self) -> dict:
        return {
            "obs_size": self.obs_size,
            "actor_sizes": _layer_sizes(self.actor),
            "critic_sizes": _layer_sizes(self.critic),
            "activation": "tanh",
            "actor_parameters": self.actor_parameter_count,
            "critic_parameters": self.critic_parameter_count,
        }

    def arrays(self) -> Iterator[np.ndarray]:
        """All arrays in a fixed order: actor layers then critic layers, weights before biases."""
        for layer in self.actor + self.critic:
            yield layer.weights
            yield layer.biases

    def map(self, fn: Callable[..., np.ndarray], *others: "ActorCriticParams"):
        """Apply ``fn`` array-wise to this tree and any congruent trees."""

        def _map(layers, other_layers):
            return tuple(
                DenseLayer(
                    fn(layer.weights, *(o.weights for o in peers)),
                    fn(layer.biases, *(o.biases for o in peers)),
                )
                for layer, *peers in zip(layers, *other_layers)
            )

        return type(self)(
            actor=_map(self.actor, [o.actor for o in others]),
            critic=_map(self.critic, [o.critic for o in others]),
        )

    def is_finite(self) -> bool:
        return all(layer.is_finite() for layer in self.actor + self.critic)

    def zeros_like(self) -> "Gradients":
        return Gradients.from_tree(self.map(np.zeros_like))

    def set_read_only(self) -> None:
        for array in self.arrays():
            array.flags.writeable = False

    def equals(self, other: "ActorCriticParams") -> bool:
        """Bitwise equality of every array."""
        mine, theirs = list(self.arrays()), list(other.arrays())
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


class Gradients(ActorCriticParams):
    """Derivatives with respect to an :class:`ActorCriticParams`, congruent with it."""

    @classmethod
    def from_tree(cls, tree: ActorCriticParams) -> "Gradients":
        return cls(actor=tree.actor, critic=tree.critic)


@dataclass(frozen=True)
class AdamState:
    m: Gradients
    v: Gradients
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, params: ActorCriticParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like())


def orthogonal(shape: Tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    """A ``(rows, cols)`` matrix with orthonormal rows or columns (whichever are fewer), scaled by ``gain``."""
    rows, cols = shape
    flat = rng.standard_normal((rows, cols))
    if rows < cols:
        flat = flat.T
    q, r = np.linalg.qr(flat)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if rows < cols:
        q = q.T
    return gain * q


def _build(sizes: Sequence[int], head_gain: float, rng: np.random.Generator) -> Tuple[DenseLayer, ...]:
    layers = []
    for index, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        gain = head_gain if index == len(sizes) - 2 else HIDDEN_GAIN
        layers.append(DenseLayer(orthogonal((n_out, n_in), gain, rng), np.zeros(n_out)))
    return tuple(layers)


def init_params(
    seed: int,
    obs_size: int = OBS_SIZE,
    hidden_sizes: Sequence[int] = HIDDEN_SIZES,
    n_actions: int = N_ACTIONS,
) -> ActorCriticParams:
    """Fresh networks: orthogonal weights (gain sqrt(2) in hidden layers,
    0.01 for the actor head, 1.0 for the critic head) and zero biases.
    """
    rng = make_rng(seed, INIT_STREAM)
    actor = _build([obs_size, *hidden_sizes, n_actions], ACTOR_HEAD_GAIN, rng)
    critic = _build([obs_size, *hidden_sizes, 1], CRITIC_HEAD_GAIN, rng)
    params = ActorCriticParams(actor=actor, critic=critic)
    if (obs_size, tuple(hidden_sizes), n_actions) == (OBS_SIZE, HIDDEN_SIZES, N_ACTIONS):
        assert params.actor_parameter_count == ACTOR_PARAMETERS
        assert params.critic_parameter_count == CRITIC_PARAMETERS
    return params


def _forward(layers: Sequence[DenseLayer], x: np.ndarray) -> List[np.ndarray]:
    """Inputs of every layer followed by the output."""
    activations = [x]
    for index, layer in enumerate(layers):
        z = x @ layer.weights.T + layer.biases
        x = np.tanh(z) if index < len(layers) - 1 else z
        activations.append(x)
    return activations


def _check_obs(params: ActorCriticParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim not in (1, 2) or obs.shape[-1] != params.obs_size:
        raise UsageError(
            f"observation must have {params.obs_size} components, got shape {obs.shape}"
        )
    return obs


def forward_actor(params: ActorCriticParams, obs: np.ndarray) -> np.ndarray:
    """Action logits for one observation ``(obs_size,)`` or a batch ``(n, obs_size)``."""
    return _forward(params.actor, _check_obs(params, obs))[-1]


def forward_critic(params: ActorCriticParams, obs: np.ndarray):
    """State value: a float for one observation, an ``(n,)`` array for a batch."""
    obs = _check_obs(params, obs)
    value = _forward(params.critic, obs)[-1]
    return float(value[0]) if obs.ndim == 1 else value[:, 0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
    """Draw an action from the categorical distribution given by ``logits``.

    Uses one uniform draw from ``rng`` (inverse CDF).
    """
    log_p = log_softmax(logits)
    cdf = np.cumsum(np.exp(log_p))
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    action = min(action, len(logits) - 1)
    return action, float(log_p[action])


def log_prob_entropy(logits: np.ndarray, action) -> Tuple[np.ndarray, np.ndarray]:
    """Log-probability of ``action`` and entropy of the distribution.

    Works on one logits vector or on a batch with an array of actions.
    """
    log_p = log_softmax(logits)
    entropy = -np.sum(np.exp(log_p) * log_p, axis=-1)
    if log_p.ndim == 1:
        return float(log_p[int(action)]), float(entropy)
    action = np.asarray(action, dtype=np.int64)
    return log_p[np.arange(len(action)), action], entropy


class LossSpec(NamedTuple):
    clip_range: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    normalize_advantage: bool = True


class Minibatch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    old_log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


class LossTerms(NamedTuple):
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Zero mean, unit (sample) standard deviation. Single samples are left alone."""
    if len(advantages) < 2:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std(ddof=1) + ADVANTAGE_EPS)


def _loss_forward(params: ActorCriticParams, batch: Minibatch, spec: LossSpec):
    obs = _check_obs(params, batch.obs)
    n = len(obs)
    actor_acts = _forward(params.actor, obs)
    critic_acts = _forward(params.critic, obs)

    log_p = log_softmax(actor_acts[-1])
    p = np.exp(log_p)
    entropy = -np.sum(p * log_p, axis=-1)
    log_p_a = log_p[np.arange(n), batch.actions]

    advantages = batch.advantages
    if spec.normalize_advantage:
        advantages = normalize_advantages(advantages)

    ratio = np.exp(log_p_a - batch.old_log_prob)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - spec.clip_range, 1.0 + spec.clip_range) * advantages
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))

    values = critic_acts[-1][:, 0]
    value_loss = float(np.mean((batch.returns - values) ** 2))
    mean_entropy = float(np.mean(entropy))

    loss = policy_loss - spec.ent_coef * mean_entropy + spec.vf_coef * value_loss
    terms = LossTerms(
        loss=loss,
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=mean_entropy,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > spec.clip_range)),
        approx_kl=float(np.mean(batch.old_log_prob - log_p_a)),
    )
    cache = (actor_acts, critic_acts, log_p, p, entropy, advantages, ratio, surr1, surr2, values)
    return terms, cache


def ppo_loss(params: ActorCriticParams, batch: Minibatch, spec: LossSpec) -> LossTerms:
    """The clipped-surrogate PPO loss with value and entropy terms (forward only)."""
    return _loss_forward(params, batch, spec)[0]


def _backward_layers(
    layers: Sequence[DenseLayer], activations: Sequence[np.ndarray], d_out: np.ndarray
) -> Tuple[DenseLayer, ...]:
    grads = []
    delta = d_out
    for index in range(len(layers) - 1, -1, -1):
        inputs = activations[index]
        grads.append(DenseLayer(delta.T @ inputs, delta.sum(axis=0)))
        if index > 0:
            delta = (delta @ layers[index].weights) * (1.0 - inputs * inputs)
    return tuple(reversed(grads))


def backward(
    params: ActorCriticParams, batch: Minibatch, spec: LossSpec
) -> Tuple[float, Gradients, LossTerms]:
    """Loss and its exact gradient with respect to every parameter.

    :raises blockland.TrainingFault: if the loss is not finite
    """
    terms, cache = _loss_forward(params, batch, spec)
    if not math.isfinite(terms.loss):
        raise TrainingFault("non-finite loss", **terms._asdict())
    actor_acts, critic_acts, log_p, p, entropy, advantages, ratio, surr1, surr2, values = cache
    n = len(values)

    # d(policy loss)/d(ratio) is -A/n where the unclipped term is the minimum, 0 elsewhere
    d_ratio = np.where(surr1 <= surr2, advantages, 0.0)
    d_log_p_a = -(d_ratio * ratio) / n
    one_hot = np.zeros_like(p)
    one_hot[np.arange(n), batch.actions] = 1.0
    d_logits = d_log_p_a[:, None] * (one_hot - p)
    d_logits += (spec.ent_coef / n) * p * (log_p + entropy[:, None])

    d_values = spec.vf_coef * (2.0 / n) * (values - batch.returns)

    grads = Gradients(
        actor=_backward_layers(params.actor, actor_acts, d_logits),
        critic=_backward_layers(params.critic, critic_acts, d_values[:, None]),
    )
    return terms.loss, grads, terms


def global_norm(grads: ActorCriticParams) -> float:
    """L2 norm over all arrays, summed in the fixed order of :meth:`ActorCriticParams.arrays`."""
    total = 0.0
    for array in grads.arrays():
        total += float(np.sum(array * array))
    return math.sqrt(total)


def clip_global_norm(grads: Gradients, max_norm: float) -> Gradients:
    """Scale all gradients by ``max_norm / norm`` if their global norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise UsageError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return Gradients.from_tree(grads.map(lambda g: g * scale))


def adam_update(
    params: ActorCriticParams, grads: Gradients, state: AdamState, lr: float
) -> Tuple[ActorCriticParams, AdamState]:
    """One Adam step with bias correction; returns new parameters and state."""
    b1, b2, eps = state.beta1, state.beta2, state.eps
    step_count = state.step_count + 1
    bias1 = 1.0 - b1 ** step_count
    bias2_sqrt = math.sqrt(1.0 - b2 ** step_count)
    step_size = lr / bias1

    m = Gradients.from_tree(state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads))
    v = Gradients.from_tree(state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, grads))
    new_params = params.map(
        lambda p, m_, v_: p - step_size * (m_ / (np.sqrt(v_) / bias2_sqrt + eps)), m, v
    )
    if not new_params.is_finite():
        raise TrainingFault("non-finite parameters after optimizer step", step=step_count)
    return new_params, AdamState(m=m, v=v, step_count=step_count, beta1=b1, beta2=b2, eps=eps)
