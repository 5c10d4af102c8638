"""
workbench.py drives every stage of the observed-adversary experiments.

    python -m blockland.workbench train-victim --seed 1 --opponent arand
    python -m blockland.workbench train-adversary --victim runs/victims/v01/final.json --seed 1
    python -m blockland.workbench evaluate --victim runs/victims/v01/final.json --opponent arand
    python -m blockland.workbench grid --preset smoke --jobs 4

Settings are resolved, from lowest to highest precedence, from the
built-in defaults, the config file, the environment and the command line;
``--dump-config`` prints the result. Output directories default to
``$BLOCKLAND_OUTPUT_ROOT`` (or ``runs``).

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numeric fault.
"""

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

import blockland
from blockland import (
    ArtifactError,
    BlocklandError,
    CheckpointError,
    ConfigurationError,
    TrainingFault,
    UsageError,
)
from blockland.agents import CheckpointPolicy, FrozenPolicy, resolve_policy
from blockland.analysis import (
    HEATMAP_CELL_SIZE,
    HEATMAP_EPISODES,
    return_report,
    visitation_heatmap,
    weight_norm_series,
)
from blockland.env import Agent
from blockland.harness import (
    DEFAULT_EPISODES,
    DEFAULT_SEED_BASE,
    PRESETS,
    AgentRef,
    TransferMatrix,
    adversary_run_id,
    build_transfer_matrix,
    degradation_summary,
    evaluate_pair,
    longest_stall,
    record_trace,
    train_adversaries,
    train_victims,
    victim_run_id,
    write_degradation,
    write_trace,
)
from blockland.io.csv import write_pairings
from blockland.level import load_level
from blockland.manifest import RunManifest
from blockland.ppo import FINAL_NAME, PPOConfig, train
from blockland.util import LOGGING_LEVELS, default_output_root, load_config, set_logging_level

log = logging.getLogger("blockland.workbench")

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

#: settings that are not hyperparameters of PPO
WORKBENCH_DEFAULTS: Dict[str, Any] = {
    "seed": 1,
    "level": "twosides",
    "episodes": DEFAULT_EPISODES,
    "seed_base": DEFAULT_SEED_BASE,
    "jobs": 1,
}


def defaults() -> Dict[str, Any]:
    return {**PPOConfig().to_dict(), **WORKBENCH_DEFAULTS, "out": default_output_root()}


class _ArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as :class:`blockland.UsageError` instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_ppo_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("PPO hyperparameters")
    group.add_argument("--total-steps", dest="total_steps", type=int)
    group.add_argument("--n-envs", dest="n_envs", type=int)
    group.add_argument("--rollout-len", dest="rollout_len", type=int)
    group.add_argument("--minibatch-size", dest="minibatch_size", type=int)
    group.add_argument("--epochs", type=int)
    group.add_argument("--lr", type=float)
    group.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    group.add_argument(
        "--workers", type=int, help="threads stepping the environments; results do not depend on it"
    )
    parser.add_argument(
        "--resume", action="store_true", help="continue from the run directory's resume.json"
    )


def _add_level_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--level", help='level JSON file, or "twosides" for the shipped level')


def _add_out_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", help="output directory (default: $BLOCKLAND_OUTPUT_ROOT or runs)")


def create_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        "python -m blockland.workbench",
        description="Train victims and observed adversaries in Blockland and analyse the results.",
    )
    parser.add_argument(
        "-v",
        action="count",
        dest="verbosity",
        help="""How much information do you want to see at the command line?
                        You can add several of these e.g., -vv is DEBUG""",
        default=0,
    )
    parser.add_argument("-c", "--config", help="JSON or INI config file")
    parser.add_argument(
        "--dump-config",
        action="store_true",
        help="print the resolved configuration of the subcommand as JSON and exit",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    sub = subparsers.add_parser("train-victim", help="train a robot against a scripted human")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--opponent", choices=["arand", "natural"], default="arand")
    _add_level_argument(sub)
    _add_out_argument(sub)
    _add_ppo_arguments(sub)

    sub = subparsers.add_parser("train-adversary", help="train a human against a frozen victim")
    sub.add_argument("--victim", required=True, help="victim checkpoint")
    sub.add_argument("--seed", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)
    _add_ppo_arguments(sub)

    sub = subparsers.add_parser("evaluate", help="play a victim against an opponent")
    sub.add_argument("--victim", required=True, help="robot checkpoint")
    sub.add_argument("--opponent", required=True, help="arand, natural or a human checkpoint")
    sub.add_argument("--episodes", type=int)
    sub.add_argument("--seed-base", dest="seed_base", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)

    sub = subparsers.add_parser("matrix", help="evaluate all victims against arand and all adversaries")
    sub.add_argument("--victims-dir", dest="victims_dir", required=True)
    sub.add_argument("--adversaries-dir", dest="adversaries_dir", required=True)
    sub.add_argument("--episodes", type=int)
    sub.add_argument("--seed-base", dest="seed_base", type=int)
    sub.add_argument("--jobs", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)

    sub = subparsers.add_parser("weight-norms", help="input-layer L1 norms along a training run")
    sub.add_argument("--run", required=True, help="run directory")
    _add_out_argument(sub)

    sub = subparsers.add_parser("heatmap", help="visitation heatmap of a human policy")
    sub.add_argument("--policy", required=True, help="arand, natural or a human checkpoint")
    sub.add_argument("--episodes", type=int, default=HEATMAP_EPISODES)
    sub.add_argument("--cell-size", dest="cell_size", type=float, default=HEATMAP_CELL_SIZE)
    sub.add_argument("--seed", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)

    sub = subparsers.add_parser("report", help="summaries and figures of an evaluation table")
    sub.add_argument("--pairings", required=True)
    sub.add_argument(
        "--unsafe", action="store_true", help="accept a pairings file without a manifest"
    )
    _add_out_argument(sub)

    sub = subparsers.add_parser("grid", help="run the whole experiment grid")
    sub.add_argument("--preset", choices=sorted(PRESETS), default="smoke")
    sub.add_argument(
        "--opponent",
        choices=["arand", "natural"],
        default="arand",
        help="scripted human the victims are trained against",
    )
    sub.add_argument("--jobs", type=int)
    sub.add_argument("--seed-base", dest="seed_base", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)
    _add_ppo_arguments(sub)

    sub = subparsers.add_parser("trace", help="record one evaluation episode step by step")
    sub.add_argument("--victim", required=True)
    sub.add_argument("--opponent", required=True)
    sub.add_argument("--seed", type=int)
    _add_level_argument(sub)
    _add_out_argument(sub)

    return parser


def resolve_config(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {k: v for k, v in vars(args).items() if k in defaults()}
    config = load_config(defaults(), path=args.config, config=flags, context=args.command)
    config["command"] = args.command
    return dict(config)


def _ppo_config(config: Dict[str, Any]) -> PPOConfig:
    return PPOConfig.from_mapping(config)


def _out_dir(config: Dict[str, Any], explicit: Optional[str], *default_parts: str) -> str:
    return explicit or os.path.join(config["out"], *default_parts)


def _manifest(config: Dict[str, Any], **kwargs) -> RunManifest:
    return RunManifest(command=config["command"], config=config, **kwargs)


def cmd_train_victim(args, config) -> None:
    level = load_level(config["level"])
    seed = config["seed"]
    out = _out_dir(config, args.out, "victims", victim_run_id(seed))
    opponent = resolve_policy(args.opponent, Agent.HUMAN)
    train(level, opponent, _ppo_config(config), seed, out, Agent.ROBOT, args.resume, args.command)


def cmd_train_adversary(args, config) -> None:
    level = load_level(config["level"])
    seed = config["seed"]
    victim_id = AgentRef(args.victim, Agent.ROBOT).id
    out = _out_dir(config, args.out, "adversaries", adversary_run_id(victim_id, seed))
    policy = resolve_policy(args.victim, Agent.ROBOT)
    if not isinstance(policy, CheckpointPolicy):
        raise UsageError(f"the victim must be a checkpoint, got {args.victim!r}")
    victim = FrozenPolicy(policy)
    train(level, victim, _ppo_config(config), seed, out, Agent.HUMAN, args.resume, args.command)
    victim.verify()


def cmd_evaluate(args, config) -> None:
    level = load_level(config["level"])
    victim = AgentRef(args.victim, Agent.ROBOT)
    opponent = AgentRef(args.opponent, Agent.HUMAN)
    out = _out_dir(config, args.out, "evaluation", f"{victim.id}_vs_{opponent.id}")
    os.makedirs(out, exist_ok=True)
    manifest = _manifest(
        config,
        level=level.to_dict(),
        seeds=list(range(config["seed_base"], config["seed_base"] + config["episodes"])),
        opponent=opponent.identity(),
        victim=victim.identity(),
    )
    result = evaluate_pair(victim, opponent, config["episodes"], config["seed_base"], level)
    write_pairings(os.path.join(out, "pairings.csv"), result.victim_id, result.opponent_id, result.returns)
    manifest.add_artifact("pairings.csv")
    manifest.details["mean_return"] = result.mean
    manifest.complete()
    manifest.save(out)
    print(f"{result.victim_id} vs {result.opponent_id}: mean return {result.mean:.4f}")


def _final_checkpoints(directory: str) -> List[str]:
    return sorted(glob.glob(os.path.join(directory, "*", FINAL_NAME)))


def _record_inputs(manifest: RunManifest, victims: List[AgentRef], adversaries: List[AgentRef]) -> None:
    """Every evaluated checkpoint, with its file digest."""
    manifest.details["victims"] = [v.identity() for v in victims]
    manifest.details["adversaries"] = [a.identity() for a in adversaries]


def _write_matrix(matrix: TransferMatrix, out: str, manifest: RunManifest) -> int:
    """Write pairings, matrix and degradation tables; returns the number of degrading victims."""
    os.makedirs(out, exist_ok=True)
    matrix.write_pairings(os.path.join(out, "pairings.csv"))
    matrix.to_csv(os.path.join(out, "matrix.csv"))
    rows = degradation_summary(matrix)
    write_degradation(os.path.join(out, "degradation.csv"), rows)
    for name in ("pairings.csv", "matrix.csv", "degradation.csv"):
        manifest.add_artifact(name)
    degrading = sum(r.degrades for r in rows)
    manifest.details.update(
        degrading_victims=degrading,
        direct_pairs=sorted("/".join(pair) for pair in matrix.direct),
        failed_pairs=sorted("/".join(pair) for pair in matrix.failed),
        evaluation_sampling="stochastic",
    )
    return degrading


def cmd_matrix(args, config) -> None:
    level = load_level(config["level"])
    victims = [AgentRef(path, Agent.ROBOT) for path in _final_checkpoints(args.victims_dir)]
    adversaries = [AgentRef(path, Agent.HUMAN) for path in _final_checkpoints(args.adversaries_dir)]
    if not victims:
        raise UsageError(f"no victim checkpoints found under {args.victims_dir}")
    out = _out_dir(config, args.out, "evaluation")
    manifest = _manifest(config, level=level.to_dict(), seeds=[config["seed_base"]])
    _record_inputs(manifest, victims, adversaries)
    matrix = build_transfer_matrix(
        victims, adversaries, config["episodes"], config["seed_base"], level, config["jobs"]
    )
    degrading = _write_matrix(matrix, out, manifest)
    manifest.complete()
    manifest.save(out)
    print(f"{degrading} of {len(victims)} victims degrade")


def cmd_weight_norms(args, config) -> None:
    out = _out_dir(config, args.out, "reports", "weight_norms", os.path.basename(os.path.normpath(args.run)))
    manifest = _manifest(config, details={"run": args.run})
    rows = weight_norm_series(args.run, out)
    manifest.artifacts += ["weight_norms.csv", "weight_norms.svg"]
    manifest.details["checkpoints"] = len(rows)
    manifest.complete()
    manifest.save(out)


def cmd_heatmap(args, config) -> None:
    level = load_level(config["level"])
    policy = AgentRef(args.policy, Agent.HUMAN)
    out = _out_dir(config, args.out, "reports", "heatmap", policy.id)
    seed = config["seed"]
    manifest = _manifest(config, level=level.to_dict(), seeds=[seed], opponent=policy.identity())
    heatmap = visitation_heatmap(policy, args.episodes, args.cell_size, seed, level, out)
    manifest.artifacts += ["heatmap.csv", "coverage.csv", "heatmap.svg"]
    manifest.details.update(
        coverage=heatmap.coverage,
        distinct_cells=heatmap.distinct_cells,
        entropy=heatmap.entropy,
        steps=heatmap.steps,
    )
    manifest.complete()
    manifest.save(out)
    print(
        f"{policy.id}: {heatmap.coverage:.2f} distinct cells per episode, "
        f"{heatmap.distinct_cells} overall, entropy {heatmap.entropy:.4f}"
    )


def cmd_report(args, config) -> None:
    out = _out_dir(config, args.out, "reports", "returns")
    manifest = _manifest(config, details={"pairings": args.pairings, "unsafe": args.unsafe})
    report = return_report(args.pairings, out, unsafe=args.unsafe)
    manifest.artifacts += [os.path.basename(f) for f in report.files]
    manifest.complete()
    manifest.save(out)


def cmd_trace(args, config) -> None:
    level = load_level(config["level"])
    victim = AgentRef(args.victim, Agent.ROBOT)
    opponent = AgentRef(args.opponent, Agent.HUMAN)
    seed = config["seed"]
    out = _out_dir(config, args.out, "traces", f"{victim.id}_vs_{opponent.id}_{seed}")
    os.makedirs(out, exist_ok=True)
    manifest = _manifest(
        config,
        level=level.to_dict(),
        seeds=[seed],
        opponent=opponent.identity(),
        victim=victim.identity(),
    )
    trace = record_trace(victim, opponent, seed, level)
    write_trace(os.path.join(out, "trace.csv"), trace)
    manifest.add_artifact("trace.csv")
    stall = longest_stall(trace)
    manifest.details.update(longest_stall=stall, episode_return=trace.episode_return)
    manifest.complete()
    manifest.save(out)
    print(f"return {trace.episode_return:.4f}, robot stood still for up to {stall} steps")


def cmd_grid(args, config) -> None:
    preset = PRESETS[args.preset]
    level = load_level(config["level"])
    out = _out_dir(config, args.out, f"grid_{preset.name}")
    ppo = _ppo_config(config)
    if args.total_steps is None:
        ppo = replace(ppo, total_steps=preset.total_steps)
    jobs = config["jobs"]
    manifest = _manifest(config, level=level.to_dict(), seeds=list(preset.victim_seeds))
    manifest.details["preset"] = preset.name
    os.makedirs(out, exist_ok=True)
    manifest.save(out)

    try:
        victim_runs = train_victims(
            level, args.opponent, preset.victim_seeds, os.path.join(out, "victims"), ppo, jobs
        )
        adversary_runs = []
        for run in victim_runs:
            if run.checkpoint is not None:
                adversary_runs += train_adversaries(
                    run.checkpoint,
                    preset.adversary_seeds,
                    os.path.join(out, "adversaries"),
                    ppo,
                    level,
                    jobs,
                    victim_id=run.run_id,
                )
        failures = [r.run_id for r in victim_runs + adversary_runs if r.checkpoint is None]
        manifest.details["failed_runs"] = failures

        victims = [AgentRef(r.checkpoint, Agent.ROBOT, r.run_id) for r in victim_runs if r.checkpoint]
        adversaries = [
            AgentRef(r.checkpoint, Agent.HUMAN, r.run_id) for r in adversary_runs if r.checkpoint
        ]
        if not victims:
            raise UsageError("no victim finished training")

        eval_dir = os.path.join(out, "evaluation")
        eval_manifest = _manifest(config, level=level.to_dict(), seeds=[config["seed_base"]])
        _record_inputs(eval_manifest, victims, adversaries)
        matrix = build_transfer_matrix(
            victims, adversaries, preset.eval_episodes, config["seed_base"], level, jobs
        )
        degrading = _write_matrix(matrix, eval_dir, eval_manifest)
        eval_manifest.complete()
        eval_manifest.save(eval_dir)
        manifest.details["degrading_victims"] = degrading

        reports = os.path.join(out, "reports")
        return_report(os.path.join(eval_dir, "pairings.csv"), os.path.join(reports, "returns"))
        for run in victim_runs:
            if run.checkpoint is not None:
                weight_norm_series(run.run_dir, os.path.join(reports, "weight_norms", run.run_id))
        coverage = {}
        for tag in ("arand", "natural"):
            heatmap = visitation_heatmap(
                AgentRef(tag, Agent.HUMAN), out_dir=os.path.join(reports, "heatmap", tag), level=level
            )
            coverage[tag] = {
                "coverage": heatmap.coverage,
                "distinct_cells": heatmap.distinct_cells,
                "entropy": heatmap.entropy,
            }
        manifest.details["coverage"] = coverage
        manifest.artifacts += ["victims", "adversaries", "evaluation", "reports"]
    except BaseException as e:
        manifest.fail(e)
        manifest.save(out)
        raise
    manifest.complete()
    manifest.save(out)
    print(f"grid {preset.name} finished: {degrading} of {len(victims)} victims degrade")


COMMANDS = {
    "train-victim": cmd_train_victim,
    "train-adversary": cmd_train_adversary,
    "evaluate": cmd_evaluate,
    "matrix": cmd_matrix,
    "weight-norms": cmd_weight_norms,
    "heatmap": cmd_heatmap,
    "report": cmd_report,
    "grid": cmd_grid,
    "trace": cmd_trace,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the workbench and return the exit code."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
        logging_level_name = LOGGING_LEVELS[min(len(LOGGING_LEVELS) - 1, 2 + args.verbosity)]
        logging.basicConfig(format="%(asctime)s %(name)s %(levelname)s: %(message)s")
        set_logging_level(logging_level_name)

        config = resolve_config(args)
        if args.dump_config:
            print(json.dumps(config, sort_keys=True, indent=1))
            return EXIT_SUCCESS
        COMMANDS[args.command](args, config)
    except TrainingFault as e:
        log.error("numeric fault: %s", e)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, CheckpointError) as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, OSError) as e:
        log.error("I/O error: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except BlocklandError as e:
        log.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_SUCCESS


if __name__ == "__main__":
    sys.exit(main())
