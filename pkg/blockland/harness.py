"""
The experiment grid: victims trained against a scripted human, adversaries
trained against each frozen victim, and the evaluation of every victim
against every opponent.

Run directories are named after the seeds: victim ``v01`` is trained with
seed 1, its adversaries ``v01-a01`` ... with seeds 1, 2, ...
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from blockland import BlocklandError, UsageError, typechecking
from blockland.agents import VALID_SCRIPTED, CheckpointPolicy, FrozenPolicy, Policy, resolve_policy
from blockland.checkpoint import checkpoint_digest
from blockland.env import Agent, BlocklandEnv, BoxLocation
from blockland.io.csv import TRACE_COLUMNS, CSVWriter, write_pairings, PAIRINGS_COLUMNS
from blockland.level import LevelSpec, twosides
from blockland.manifest import RunManifest, find_manifest
from blockland.ppo import FINAL_NAME, PPOConfig, train
from blockland.typechecking import Point
from blockland.util import make_rng

log = logging.getLogger("blockland.harness")

DEFAULT_EPISODES = 30
DEFAULT_SEED_BASE = 1000
DEGRADATION_THRESHOLD = 50.0

BASELINE_OPPONENT = "arand"


@dataclass(frozen=True)
class AgentRef:
    """A scripted selector (``"arand"``, ``"natural"``, ``"noop"``) or a checkpoint path, with a role."""

    selector: str
    role: Agent
    label: Optional[str] = None

    @property
    def is_scripted(self) -> bool:
        return self.selector in VALID_SCRIPTED

    @property
    def id(self) -> str:
        """Short name: the label, the scripted tag, or the run directory of a ``final.json``."""
        if self.label:
            return self.label
        if self.is_scripted:
            return self.selector
        directory, name = os.path.split(os.path.normpath(self.selector))
        if name == FINAL_NAME and directory:
            return os.path.basename(directory)
        return os.path.splitext(name)[0]

    def resolve(self) -> Policy:
        return resolve_policy(self.selector, self.role)

    def identity(self) -> Dict[str, str]:
        """``{"tag": selector}``, plus the file digest of a checkpoint, for manifests.

        :raises OSError: if the checkpoint cannot be read
        """
        identity = {"tag": self.selector, "id": self.id}
        if not self.is_scripted:
            identity["file_digest"] = checkpoint_digest(self.selector)
        return identity


@dataclass(frozen=True)
class PairingResult:
    victim_id: str
    opponent_id: str
    returns: Tuple[float, ...]

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return math.fsum(self.returns) / len(self.returns)

    @property
    def std(self) -> float:
        """Population standard deviation."""
        return float(np.std(np.asarray(self.returns)))

    @property
    def min(self) -> float:
        return min(self.returns)

    @property
    def max(self) -> float:
        return max(self.returns)

    @property
    def quartiles(self) -> Tuple[float, float, float]:
        q1, median, q3 = np.quantile(np.asarray(self.returns), [0.25, 0.5, 0.75])
        return float(q1), float(median), float(q3)


class TraceRow(NamedTuple):
    t: int
    robot_x: float
    robot_y: float
    human_x: float
    human_y: float
    robot_action: int
    human_action: int
    reward: float
    robot_held: bool
    boxes_on_cart: int


@dataclass
class EpisodeTrace:
    """Per-step record of one episode; positions are those after the step."""

    robot_start: Point
    rows: List[TraceRow] = field(default_factory=list)

    @property
    def episode_return(self) -> float:
        return math.fsum(row.reward for row in self.rows)


def play_episode(
    level: LevelSpec, robot: Policy, human: Policy, seed: int, trace: Optional[EpisodeTrace] = None
) -> float:
    """One episode with both agents sampling from the random stream of ``seed``.

    Within a step the robot draws before the human.

    :returns: the robot's return
    """
    rng = make_rng(seed)
    env = BlocklandEnv(level)
    robot_state, human_state = robot.initial_state(), human.initial_state()
    rewards = []
    while not env.state.done:
        a_robot, robot_state = robot.act(env.observation(Agent.ROBOT), rng, robot_state)
        a_human, human_state = human.act(env.observation(Agent.HUMAN), rng, human_state)
        result = env.step(a_robot, a_human)
        rewards.append(result.reward_robot)
        if trace is not None:
            state = env.state
            trace.rows.append(
                TraceRow(
                    t=state.t,
                    robot_x=state.robot_pos[0],
                    robot_y=state.robot_pos[1],
                    human_x=state.human_pos[0],
                    human_y=state.human_pos[1],
                    robot_action=int(a_robot),
                    human_action=int(a_human),
                    reward=result.reward_robot,
                    robot_held=state.held_box(Agent.ROBOT) is not None,
                    boxes_on_cart=sum(b.location is BoxLocation.ON_CART for b in state.boxes),
                )
            )
    return math.fsum(rewards)


def evaluate_pair(
    victim: AgentRef,
    opponent: AgentRef,
    episodes: int = DEFAULT_EPISODES,
    seed_base: int = DEFAULT_SEED_BASE,
    level: Optional[LevelSpec] = None,
) -> PairingResult:
    """Robot returns of ``episodes`` episodes seeded ``seed_base``, ``seed_base + 1``, ...

    Both agents sample their actions stochastically.
    """
    if episodes < 1:
        raise UsageError("at least one evaluation episode is needed")
    level = level or twosides()
    robot, human = victim.resolve(), opponent.resolve()
    returns = tuple(play_episode(level, robot, human, seed_base + k) for k in range(episodes))
    result = PairingResult(victim.id, opponent.id, returns)
    log.info(
        "%s vs %s: mean %.3f over %d episodes", result.victim_id, result.opponent_id, result.mean, episodes
    )
    return result


def record_trace(
    victim: AgentRef,
    opponent: AgentRef,
    seed: int,
    level: Optional[LevelSpec] = None,
) -> EpisodeTrace:
    """Replay the evaluation episode with seed ``seed`` step by step."""
    level = level or twosides()
    trace = EpisodeTrace(robot_start=level.robot_spawn)
    play_episode(level, victim.resolve(), opponent.resolve(), seed, trace)
    return trace


def write_trace(file: typechecking.AcceptedIOType, trace: EpisodeTrace) -> None:
    with CSVWriter(file, TRACE_COLUMNS) as writer:
        writer.write_rows(trace.rows)


def longest_stall(trace: EpisodeTrace) -> int:
    """Longest run of consecutive steps after which the robot stood where it stood before."""
    longest = current = 0
    previous = trace.robot_start
    for row in trace.rows:
        position = (row.robot_x, row.robot_y)
        current = current + 1 if position == previous else 0
        longest = max(longest, current)
        previous = position
    return longest


MATRIX_COLUMNS = ("victim_id", "opponent_id", "mean", "direct", "status")


@dataclass
class TransferMatrix:
    """Mean robot returns of every victim against every opponent.

    ``direct`` holds the (victim, adversary) pairs the adversary was trained
    on; ``failed`` the pairs whose evaluation raised.
    """

    victims: List[str]
    opponents: List[str]
    cells: Dict[Tuple[str, str], PairingResult] = field(default_factory=dict)
    direct: Set[Tuple[str, str]] = field(default_factory=set)
    failed: Set[Tuple[str, str]] = field(default_factory=set)

    def mean(self, victim_id: str, opponent_id: str) -> Optional[float]:
        cell = self.cells.get((victim_id, opponent_id))
        return None if cell is None else cell.mean

    def rows(self) -> Iterable[list]:
        for victim_id in self.victims:
            for opponent_id in self.opponents:
                key = (victim_id, opponent_id)
                yield [
                    victim_id,
                    opponent_id,
                    self.mean(*key),
                    key in self.direct,
                    "failed" if key in self.failed else "ok",
                ]

    def to_csv(self, file: typechecking.AcceptedIOType) -> None:
        with CSVWriter(file, MATRIX_COLUMNS) as writer:
            writer.write_rows(self.rows())

    def write_pairings(self, file: typechecking.AcceptedIOType) -> None:
        CSVWriter(file, PAIRINGS_COLUMNS).stop()
        for victim_id in self.victims:
            for opponent_id in self.opponents:
                cell = self.cells.get((victim_id, opponent_id))
                if cell is not None:
                    write_pairings(file, victim_id, opponent_id, cell.returns, append=True)


def trained_against(adversary: AgentRef) -> Optional[str]:
    """File digest of the victim recorded in the adversary's manifest."""
    if adversary.is_scripted:
        return None
    manifest_path = find_manifest(adversary.selector)
    if manifest_path is None:
        return None
    victim = RunManifest.load(manifest_path).victim or {}
    return victim.get("file_digest")


def _evaluate_task(args) -> Tuple[Tuple[str, str], Optional[PairingResult], Optional[str]]:
    victim, opponent, episodes, seed_base, level = args
    key = (victim.id, opponent.id)
    try:
        return key, evaluate_pair(victim, opponent, episodes, seed_base, level), None
    except (BlocklandError, OSError) as e:
        return key, None, f"{type(e).__name__}: {e}"


def run_parallel(function: Callable, tasks: Sequence, jobs: int = 1) -> list:
    """``[function(task) for task in tasks]``, in up to ``jobs`` worker processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [function(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(function, tasks))


def build_transfer_matrix(
    victims: Sequence[AgentRef],
    adversaries: Sequence[AgentRef],
    episodes: int = DEFAULT_EPISODES,
    seed_base: int = DEFAULT_SEED_BASE,
    level: Optional[LevelSpec] = None,
    jobs: int = 1,
) -> TransferMatrix:
    """Evaluate every victim against ``arand`` and every adversary.

    A pair is direct if the adversary's manifest names the victim's
    checkpoint (by file digest). Failed evaluations leave an empty cell
    flagged as failed.
    """
    level = level or twosides()
    opponents = [AgentRef(BASELINE_OPPONENT, Agent.HUMAN)] + list(adversaries)
    matrix = TransferMatrix(victims=[v.id for v in victims], opponents=[o.id for o in opponents])

    victim_digests = {
        v.id: checkpoint_digest(v.selector) for v in victims if not v.is_scripted
    }
    for adversary in adversaries:
        target = trained_against(adversary)
        for victim_id, digest in victim_digests.items():
            if target is not None and target == digest:
                matrix.direct.add((victim_id, adversary.id))

    tasks = [(v, o, episodes, seed_base, level) for v in victims for o in opponents]
    for key, result, error in run_parallel(_evaluate_task, tasks, jobs):
        if result is None:
            log.error("evaluation of %s vs %s failed: %s", key[0], key[1], error)
            matrix.failed.add(key)
        else:
            matrix.cells[key] = result
    return matrix


def percentage_decrease(baseline: float, attacked: float) -> Optional[float]:
    """``(baseline - attacked) / baseline * 100``; None for a zero baseline."""
    if baseline == 0:
        return None
    return (baseline - attacked) / baseline * 100.0


class DegradationRow(NamedTuple):
    victim_id: str
    baseline: Optional[float]
    worst_direct: Optional[str]
    worst_direct_decrease: Optional[float]
    worst_transfer: Optional[str]
    worst_transfer_drop: Optional[float]
    degrades: bool


DEGRADATION_COLUMNS = DegradationRow._fields


def degradation_summary(
    matrix: TransferMatrix, threshold: float = DEGRADATION_THRESHOLD
) -> List[DegradationRow]:
    """Per victim: the strongest direct and transfer adversaries against its ``arand`` baseline.

    A victim degrades if some direct adversary decreases its return by at
    least ``threshold`` percent.
    """
    rows = []
    for victim_id in matrix.victims:
        baseline = matrix.mean(victim_id, BASELINE_OPPONENT)
        worst_direct = worst_transfer = None
        direct_decrease = transfer_drop = None
        for opponent_id in matrix.opponents:
            attacked = matrix.mean(victim_id, opponent_id)
            if opponent_id == BASELINE_OPPONENT or attacked is None or baseline is None:
                continue
            if (victim_id, opponent_id) in matrix.direct:
                decrease = percentage_decrease(baseline, attacked)
                if decrease is not None and (direct_decrease is None or decrease > direct_decrease):
                    worst_direct, direct_decrease = opponent_id, decrease
            else:
                drop = baseline - attacked
                if transfer_drop is None or drop > transfer_drop:
                    worst_transfer, transfer_drop = opponent_id, drop
        degrades = direct_decrease is not None and direct_decrease >= threshold
        rows.append(
            DegradationRow(
                victim_id, baseline, worst_direct, direct_decrease, worst_transfer, transfer_drop, degrades
            )
        )
    log.info(
        "%d of %d victims degrade by at least %g%%",
        sum(r.degrades for r in rows),
        len(rows),
        threshold,
    )
    return rows


def write_degradation(file: typechecking.AcceptedIOType, rows: Sequence[DegradationRow]) -> None:
    with CSVWriter(file, DEGRADATION_COLUMNS) as writer:
        writer.write_rows(rows)


class TrainingRun(NamedTuple):
    run_id: str
    run_dir: str
    checkpoint: Optional[str]
    error: Optional[str] = None


@dataclass(frozen=True)
class GridPreset:
    name: str
    victim_seeds: Tuple[int, ...]
    adversary_seeds: Tuple[int, ...]
    total_steps: int
    eval_episodes: int


PRESETS = {
    "full": GridPreset("full", (1, 2, 3, 4, 5), (1, 2, 3), 800_000, DEFAULT_EPISODES),
    "smoke": GridPreset("smoke", (1, 2), (1,), 200_000, 10),
}


def victim_run_id(seed: int) -> str:
    return f"v{seed:02}"


def adversary_run_id(victim_id: str, seed: int) -> str:
    return f"{victim_id}-a{seed:02}"


def _train_victim_task(args) -> TrainingRun:
    level, opponent_tag, seed, out_dir, config = args
    run_id = victim_run_id(seed)
    run_dir = os.path.join(out_dir, run_id)
    try:
        opponent = resolve_policy(opponent_tag, Agent.HUMAN)
        result = train(level, opponent, config, seed, run_dir, Agent.ROBOT, command="train-victim")
        return TrainingRun(run_id, run_dir, result.final_checkpoint)
    except (BlocklandError, OSError, ArithmeticError) as e:
        log.error("victim run %s failed: %s", run_id, e)
        return TrainingRun(run_id, run_dir, None, f"{type(e).__name__}: {e}")


def train_victims(
    level: LevelSpec,
    opponent_tag: str,
    seeds: Sequence[int],
    out_dir: str,
    config: Optional[PPOConfig] = None,
    jobs: int = 1,
) -> List[TrainingRun]:
    """One robot training run per seed against the scripted human ``opponent_tag``.

    A failed run is reported in its :class:`TrainingRun`; the others are unaffected.
    """
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"victim seeds must be distinct, got {list(seeds)}")
    if opponent_tag not in VALID_SCRIPTED:
        raise UsageError(f"victims train against a scripted human, got {opponent_tag!r}")
    config = config or PPOConfig()
    tasks = [(level, opponent_tag, seed, out_dir, config) for seed in seeds]
    return run_parallel(_train_victim_task, tasks, jobs)


def _train_adversary_task(args) -> TrainingRun:
    level, victim_checkpoint, victim_id, seed, out_dir, config = args
    run_id = adversary_run_id(victim_id, seed)
    run_dir = os.path.join(out_dir, run_id)
    try:
        digest_before = checkpoint_digest(victim_checkpoint)
        victim = FrozenPolicy(resolve_policy(victim_checkpoint, Agent.ROBOT))  # type: ignore
        result = train(level, victim, config, seed, run_dir, Agent.HUMAN, command="train-adversary")
        victim.verify()
        if checkpoint_digest(victim_checkpoint) != digest_before:
            raise UsageError(f"victim checkpoint {victim_checkpoint} changed during training")
        return TrainingRun(run_id, run_dir, result.final_checkpoint)
    except (BlocklandError, OSError, ArithmeticError) as e:
        log.error("adversary run %s failed: %s", run_id, e)
        return TrainingRun(run_id, run_dir, None, f"{type(e).__name__}: {e}")


def train_adversaries(
    victim_checkpoint: str,
    seeds: Sequence[int],
    out_dir: str,
    config: Optional[PPOConfig] = None,
    level: Optional[LevelSpec] = None,
    jobs: int = 1,
    victim_id: Optional[str] = None,
) -> List[TrainingRun]:
    """Train one human adversary per seed against the frozen victim.

    The adversary's reward is the negated robot reward; the victim samples
    from its policy and its checkpoint stays bitwise unchanged.
    """
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"adversary seeds must be distinct, got {list(seeds)}")
    # fail early on a malformed or wrong-role victim
    if not isinstance(resolve_policy(victim_checkpoint, Agent.ROBOT), CheckpointPolicy):
        raise UsageError(f"the victim must be a checkpoint, got {victim_checkpoint!r}")
    victim_id = victim_id or AgentRef(victim_checkpoint, Agent.ROBOT).id
    tasks = [
        (level or twosides(), victim_checkpoint, victim_id, seed, out_dir, config or PPOConfig())
        for seed in seeds
    ]
    return run_parallel(_train_adversary_task, tasks, jobs)
