"""
Saving and loading of network checkpoints.

A checkpoint is one JSON document::

    {
     "meta": {"architecture": {...}, "seed": 1, "trained_env_steps": 802816,
              "opponent_tag": "arand", "role": "robot", "assumptions": {...}},
     "actor": [{"weights": [[...], ...], "biases": [...]}, ...],
     "critic": [{"weights": [[...], ...], "biases": [...]}, ...],
     "optimizer": null or {"step_count": ..., "m_actor": [...], ...}
    }

Floats are written in their shortest round-trip decimal form, so loading a
saved checkpoint restores every parameter bitwise. Documents are written
with sorted keys and ``\\n`` line endings; the SHA-256 of the file is
therefore the same on every platform for the same content.
"""

import hashlib
import json
import logging
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from blockland import CheckpointError
from blockland import typechecking
from blockland.nn import (
    OBS_SIZE,
    N_ACTIONS,
    ActorCriticParams,
    AdamState,
    DenseLayer,
    Gradients,
)
from blockland.util import dump_json, sha256_file, write_json

log = logging.getLogger("blockland.checkpoint")

#: recorded in every checkpoint; the networks follow these conventions
ASSUMPTIONS = {
    "activation": "tanh hidden layers, linear heads",
    "initialization": "orthogonal, gains sqrt(2) / 0.01 actor head / 1.0 critic head, zero biases",
    "networks": "separate actor and critic, no shared trunk",
    "optimizer": "Adam beta1=0.9 beta2=0.999 eps=1e-5",
}


class Checkpoint(NamedTuple):
    params: ActorCriticParams
    meta: typechecking.CheckpointMeta
    optimizer: Optional[AdamState]


def _layers_to_list(layers: Sequence[DenseLayer]) -> List[typechecking.LayerDict]:
    return [{"weights": l.weights.tolist(), "biases": l.biases.tolist()} for l in layers]


def _layers_from_list(field: str, document: Any) -> tuple:
    if not isinstance(document, list) or not document:
        raise CheckpointError(field, "must be a non-empty list of layers")
    layers = []
    for index, layer in enumerate(document):
        name = f"{field}[{index}]"
        try:
            weights = np.array(layer["weights"], dtype=np.float64)
            biases = np.array(layer["biases"], dtype=np.float64)
        except (KeyError, TypeError) as e:
            raise CheckpointError(name, f"missing or malformed entry {e}") from None
        except ValueError as e:
            raise CheckpointError(name, f"not a numeric array ({e})") from None
        if weights.ndim != 2:
            raise CheckpointError(f"{name}.weights", f"must be 2-D, got shape {weights.shape}")
        if biases.shape != (weights.shape[0],):
            raise CheckpointError(
                f"{name}.biases",
                f"shape {biases.shape} does not match weights {weights.shape}",
            )
        if not (np.isfinite(weights).all() and np.isfinite(biases).all()):
            raise CheckpointError(name, "contains non-finite values")
        if layers and layers[-1].n_out != weights.shape[1]:
            raise CheckpointError(
                f"{name}.weights",
                f"expects {weights.shape[1]} inputs but previous layer has {layers[-1].n_out} outputs",
            )
        layers.append(DenseLayer(weights, biases))
    return tuple(layers)


def params_to_dict(params: ActorCriticParams) -> Dict[str, Any]:
    return {"actor": _layers_to_list(params.actor), "critic": _layers_to_list(params.critic)}


def params_digest(params: ActorCriticParams) -> str:
    """SHA-256 over the canonical JSON form of the parameters alone."""
    return hashlib.sha256(dump_json(params_to_dict(params)).encode("utf8")).hexdigest()


def _check_congruent(field: str, layers: tuple, reference: tuple) -> None:
    if len(layers) != len(reference) or any(
        a.weights.shape != b.weights.shape for a, b in zip(layers, reference)
    ):
        raise CheckpointError(field, "shape does not match the networks")


def optimizer_to_dict(optimizer: AdamState) -> typechecking.OptimizerDict:
    return {
        "step_count": optimizer.step_count,
        "beta1": optimizer.beta1,
        "beta2": optimizer.beta2,
        "eps": optimizer.eps,
        "m_actor": _layers_to_list(optimizer.m.actor),
        "m_critic": _layers_to_list(optimizer.m.critic),
        "v_actor": _layers_to_list(optimizer.v.actor),
        "v_critic": _layers_to_list(optimizer.v.critic),
    }


def optimizer_from_dict(document: Any, params: ActorCriticParams) -> AdamState:
    """Inverse of :func:`optimizer_to_dict`; the moments must match the shapes of ``params``."""
    try:
        m = Gradients(
            actor=_layers_from_list("optimizer.m_actor", document["m_actor"]),
            critic=_layers_from_list("optimizer.m_critic", document["m_critic"]),
        )
        v = Gradients(
            actor=_layers_from_list("optimizer.v_actor", document["v_actor"]),
            critic=_layers_from_list("optimizer.v_critic", document["v_critic"]),
        )
        optimizer = AdamState(
            m=m,
            v=v,
            step_count=int(document["step_count"]),
            beta1=float(document["beta1"]),
            beta2=float(document["beta2"]),
            eps=float(document["eps"]),
        )
    except KeyError as e:
        raise CheckpointError(f"optimizer.{e.args[0]}", "missing") from None
    except TypeError:
        raise CheckpointError("optimizer", "must be an object") from None
    _check_congruent("optimizer.m_actor", m.actor, params.actor)
    _check_congruent("optimizer.m_critic", m.critic, params.critic)
    _check_congruent("optimizer.v_actor", v.actor, params.actor)
    _check_congruent("optimizer.v_critic", v.critic, params.critic)
    return optimizer


def save_checkpoint(
    path: typechecking.StringPathLike,
    params: ActorCriticParams,
    meta: Optional[Dict[str, Any]] = None,
    optimizer: Optional[AdamState] = None,
) -> None:
    """Write ``params`` (and optionally the optimizer state) to ``path``."""
    full_meta: Dict[str, Any] = {"architecture": params.architecture(), "assumptions": ASSUMPTIONS}
    full_meta.update(meta or {})
    document: Dict[str, Any] = {
        "meta": full_meta,
        **params_to_dict(params),
        "optimizer": None if optimizer is None else optimizer_to_dict(optimizer),
    }
    try:
        write_json(path, document)
    except ValueError as e:
        raise CheckpointError("actor/critic", f"cannot serialise ({e})") from None
    log.debug("checkpoint written to %s", path)


def load_checkpoint(
    path: typechecking.StringPathLike,
    obs_size: Optional[int] = OBS_SIZE,
    n_actions: Optional[int] = N_ACTIONS,
) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    :param obs_size: required observation size, or None to accept any
    :param n_actions: required number of actions, or None to accept any
    :raises blockland.CheckpointError: naming the offending field
    """
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except ValueError as e:
        raise CheckpointError("<document>", f"not valid JSON ({e})") from None
    if not isinstance(document, dict):
        raise CheckpointError("<document>", "must be a JSON object")
    for key in ("meta", "actor", "critic"):
        if key not in document:
            raise CheckpointError(key, "missing")
    meta = document["meta"]
    if not isinstance(meta, dict):
        raise CheckpointError("meta", "must be an object")

    actor = _layers_from_list("actor", document["actor"])
    critic = _layers_from_list("critic", document["critic"])
    if critic[-1].n_out != 1:
        raise CheckpointError(f"critic[{len(critic) - 1}].weights", "must have one output")
    if actor[0].n_in != critic[0].n_in:
        raise CheckpointError("critic[0].weights", "input size differs from the actor's")
    if obs_size is not None and actor[0].n_in != obs_size:
        raise CheckpointError(
            "actor[0].weights", f"expects {actor[0].n_in} inputs, required {obs_size}"
        )
    if n_actions is not None and actor[-1].n_out != n_actions:
        raise CheckpointError(
            f"actor[{len(actor) - 1}].weights",
            f"has {actor[-1].n_out} actions, required {n_actions}",
        )
    params = ActorCriticParams(actor=actor, critic=critic)

    optimizer = None
    if document.get("optimizer") is not None:
        optimizer = optimizer_from_dict(document["optimizer"], params)

    return Checkpoint(params=params, meta=meta, optimizer=optimizer)  # type: ignore


def checkpoint_digest(path: typechecking.StringPathLike) -> str:
    """SHA-256 of the checkpoint file."""
    return sha256_file(path)
