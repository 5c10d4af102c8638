"""
Diagnostics over finished runs: L1 norms of the input-layer weights along
a training run, visitation heatmaps of the human walkers and summaries of
evaluation returns. Every diagnostic writes a CSV table and an SVG figure.
"""

import glob
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from blockland import ArtifactError, BlocklandError, UsageError, typechecking
from blockland.agents import IdlePolicy
from blockland.checkpoint import load_checkpoint
from blockland.env import OBSERVATION_FIELDS, Agent
from blockland.harness import (
    BASELINE_OPPONENT,
    AgentRef,
    EpisodeTrace,
    PairingResult,
    percentage_decrease,
    play_episode,
)
from blockland.io.csv import CSVWriter, read_pairings
from blockland.io.svg import Violin, grouped_bar_chart, heatmap_chart, line_chart, save_svg, violin_chart
from blockland.level import LevelSpec, twosides
from blockland.manifest import find_manifest
from blockland.nn import ActorCriticParams
from blockland.ppo import CHECKPOINT_DIR

log = logging.getLogger("blockland.analysis")

#: semantic groups of observation components
BLOCKS: Tuple[Tuple[str, Tuple[int, ...]], ...] = (
    ("self_position", (0, 1)),
    ("other_position", (2, 3)),
    ("box_positions", (4, 5, 6, 7)),
    ("cart_position", (8, 9)),
    ("held_flags", (10, 11)),
)

NETWORKS = ("actor", "critic")

HEATMAP_CELL_SIZE = 0.5
HEATMAP_EPISODES = 100
COVERAGE_COLUMNS = ("episode_idx", "distinct_cells")

KDE_GRID_POINTS = 64


class InputNorms(NamedTuple):
    per_input: Tuple[float, ...]
    blocks: Dict[str, float]


def input_weight_l1(
    checkpoint: Union[typechecking.StringPathLike, ActorCriticParams],
) -> Dict[str, InputNorms]:
    """Per input column ``j`` of the first layer, ``sum_i |W[i, j]|``; actor first, then critic."""
    params = checkpoint if isinstance(checkpoint, ActorCriticParams) else load_checkpoint(checkpoint).params
    norms = {}
    for network in NETWORKS:
        weights = getattr(params, network)[0].weights
        per_input = tuple(float(v) for v in np.abs(weights).sum(axis=0))
        blocks = {name: sum(per_input[j] for j in members) for name, members in BLOCKS}
        norms[network] = InputNorms(per_input, blocks)
    return norms


class WeightNormRow(NamedTuple):
    checkpoint: str
    env_steps: Optional[int]
    norms: Optional[Dict[str, InputNorms]]


def weight_norm_columns() -> List[str]:
    columns = ["checkpoint", "env_steps", "status"]
    for network in NETWORKS:
        columns += [f"{network}_{name}" for name in OBSERVATION_FIELDS]
        columns += [f"{network}_{name}" for name, _ in BLOCKS]
    return columns


def _row_values(row: WeightNormRow) -> list:
    values: list = [row.checkpoint, row.env_steps, "ok" if row.norms else "skipped"]
    for network in NETWORKS:
        if row.norms is None:
            values += [None] * (len(OBSERVATION_FIELDS) + len(BLOCKS))
        else:
            norms = row.norms[network]
            values += list(norms.per_input)
            values += [norms.blocks[name] for name, _ in BLOCKS]
    return values


def _checkpoint_order(path: str) -> int:
    stem = os.path.splitext(os.path.basename(path))[0]
    digits = stem.rsplit("_", 1)[-1]
    return int(digits) if digits.isdigit() else 0


def weight_norm_series(
    run: typechecking.StringPathLike, out_dir: Optional[str] = None
) -> List[WeightNormRow]:
    """Input-layer norms of every checkpoint of a run, ordered by training steps.

    ``run`` is a run directory or its ``checkpoints`` directory. Unreadable
    checkpoints give a row with status ``skipped``.

    :raises blockland.UsageError: if fewer than two checkpoints are found
    """
    directory = str(run)
    if os.path.isdir(os.path.join(directory, CHECKPOINT_DIR)):
        directory = os.path.join(directory, CHECKPOINT_DIR)
    paths = sorted(glob.glob(os.path.join(directory, "ckpt_*.json")), key=_checkpoint_order)
    if len(paths) < 2:
        raise UsageError(f"{directory} holds {len(paths)} checkpoint(s), at least 2 are needed")

    rows = []
    for path in paths:
        name = os.path.basename(path)
        try:
            checkpoint = load_checkpoint(path)
        except (BlocklandError, OSError) as e:
            log.warning("skipping checkpoint %s: %s", path, e)
            rows.append(WeightNormRow(name, None, None))
            continue
        env_steps = checkpoint.meta.get("trained_env_steps")
        rows.append(WeightNormRow(name, env_steps, input_weight_l1(checkpoint.params)))
    rows.sort(key=lambda r: (r.env_steps if r.env_steps is not None else -1, _checkpoint_order(r.checkpoint)))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with CSVWriter(os.path.join(out_dir, "weight_norms.csv"), weight_norm_columns()) as writer:
            writer.write_rows(_row_values(row) for row in rows)
        series = {}
        for network in NETWORKS:
            for name, _ in BLOCKS:
                series[f"{network} {name}"] = [
                    (float(r.env_steps), r.norms[network].blocks[name])
                    for r in rows
                    if r.norms is not None and r.env_steps is not None
                ]
        save_svg(
            os.path.join(out_dir, "weight_norms.svg"),
            line_chart(series, "input-layer L1 norms per observation block", "env steps", "L1 norm"),
        )
    return rows


@dataclass
class Heatmap:
    """Visit counts of the human; ``counts[i, j]`` is the cell ``i`` along x and ``j`` along y."""

    counts: np.ndarray
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    cell_size: float
    episodes: int
    steps: int
    #: distinct cells visited in each episode, in episode order
    episode_cells: List[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def distinct_cells(self) -> int:
        return int(np.count_nonzero(self.counts))

    @property
    def coverage(self) -> float:
        """Mean number of distinct cells visited per episode."""
        if not self.episode_cells:
            return 0.0
        return math.fsum(self.episode_cells) / len(self.episode_cells)

    @property
    def entropy(self) -> float:
        """Visitation entropy in nats over the visited cells."""
        visited = self.counts[self.counts > 0].astype(np.float64)
        if visited.size == 0:
            return 0.0
        p = visited / visited.sum()
        return float(-np.sum(p * np.log(p)))

    def cell_of(self, x: float, y: float) -> Tuple[int, int]:
        n_x, n_y = self.counts.shape
        i = int((x - self.x_range[0]) // self.cell_size)
        j = int((y - self.y_range[0]) // self.cell_size)
        # the far edges belong to the last cell
        return min(max(i, 0), n_x - 1), min(max(j, 0), n_y - 1)

    def to_csv(self, file: typechecking.AcceptedIOType) -> None:
        n_x, n_y = self.counts.shape
        with CSVWriter(file, ("cell_x", "cell_y", "x_low", "y_low", "count")) as writer:
            for i in range(n_x):
                for j in range(n_y):
                    writer.write_row(
                        [
                            i,
                            j,
                            self.x_range[0] + i * self.cell_size,
                            self.y_range[0] + j * self.cell_size,
                            int(self.counts[i, j]),
                        ]
                    )

    def coverage_to_csv(self, file: typechecking.AcceptedIOType) -> None:
        with CSVWriter(file, COVERAGE_COLUMNS) as writer:
            for k, cells in enumerate(self.episode_cells):
                writer.write_row([k, cells])


def visitation_heatmap(
    policy: AgentRef,
    episodes: int = HEATMAP_EPISODES,
    cell_size: float = HEATMAP_CELL_SIZE,
    seed: int = 0,
    level: Optional[LevelSpec] = None,
    out_dir: Optional[str] = None,
) -> Heatmap:
    """Where a human policy walks while the robot stands still.

    Episode ``k`` uses seed ``seed + k``; every step counts the cell the
    human is in after the step.
    """
    if policy.role is not Agent.HUMAN:
        raise UsageError(f"heatmaps are drawn for human policies, {policy.id} is a {policy.role.value}")
    level = level or twosides()
    x_range = (level.road_high_edge, level.x_max)
    y_range = (0.0, level.y_max)
    shape = (
        max(1, math.ceil((x_range[1] - x_range[0]) / cell_size)),
        max(1, math.ceil((y_range[1] - y_range[0]) / cell_size)),
    )
    heatmap = Heatmap(np.zeros(shape, dtype=np.int64), x_range, y_range, cell_size, episodes, 0)

    robot, human = IdlePolicy(), policy.resolve()
    for k in range(episodes):
        trace = EpisodeTrace(robot_start=level.robot_spawn)
        play_episode(level, robot, human, seed + k, trace)
        visited = set()
        for row in trace.rows:
            cell = heatmap.cell_of(row.human_x, row.human_y)
            heatmap.counts[cell] += 1
            visited.add(cell)
        heatmap.steps += len(trace.rows)
        heatmap.episode_cells.append(len(visited))

    log.info(
        "%s: %.2f distinct cells per episode (%d overall), entropy %.4f over %d steps",
        policy.id,
        heatmap.coverage,
        heatmap.distinct_cells,
        heatmap.entropy,
        heatmap.steps,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        heatmap.to_csv(os.path.join(out_dir, "heatmap.csv"))
        heatmap.coverage_to_csv(os.path.join(out_dir, "coverage.csv"))
        save_svg(
            os.path.join(out_dir, "heatmap.svg"),
            heatmap_chart(heatmap.counts, x_range, y_range, f"visitation of {policy.id}"),
        )
    return heatmap


def silverman_bandwidth(values: Sequence[float]) -> float:
    """``0.9 * min(std, IQR / 1.34) * n ** (-1/5)``; the sample std alone if the IQR is 0."""
    data = np.asarray(values, dtype=np.float64)
    if data.size < 2:
        return 0.0
    std = float(np.std(data, ddof=1))
    q1, q3 = np.quantile(data, [0.25, 0.75])
    spread = min(std, (q3 - q1) / 1.34) if q3 > q1 else std
    return 0.9 * spread * data.size ** (-0.2)


def gaussian_kde(values: Sequence[float], grid: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian kernel density of ``values`` on ``grid`` with an absolute ``bandwidth``.

    :raises blockland.UsageError: if the sample has no spread
    """
    data = np.asarray(values, dtype=np.float64)
    std = float(np.std(data, ddof=1)) if data.size > 1 else 0.0
    if std == 0.0 or bandwidth <= 0:
        raise UsageError("a density needs at least two distinct values and a positive bandwidth")
    # scipy scales the kernel by the sample std
    kernel = stats.gaussian_kde(data, bw_method=lambda _: bandwidth / std)
    return kernel(np.asarray(grid, dtype=np.float64))


def violin_of(result: PairingResult) -> Violin:
    """Violin geometry of one pairing; a degenerate distribution has no density."""
    label = f"{result.victim_id} / {result.opponent_id}"
    bandwidth = silverman_bandwidth(result.returns)
    grid: Sequence[float] = ()
    density: Sequence[float] = ()
    if bandwidth > 0:
        points = np.linspace(result.min - 3 * bandwidth, result.max + 3 * bandwidth, KDE_GRID_POINTS)
        values = gaussian_kde(result.returns, points, bandwidth)
        grid, density = points.tolist(), (values / values.max()).tolist()
    return Violin(label, grid, density, result.quartiles, result.mean, result.min, result.max)


SUMMARY_COLUMNS = (
    "victim_id",
    "opponent_id",
    "episodes",
    "mean",
    "std",
    "min",
    "max",
    "q1",
    "median",
    "q3",
    "percentage_decrease",
)


class ReturnReport(NamedTuple):
    results: List[PairingResult]
    #: (victim_id, opponent_id) -> decrease against the victim's arand baseline
    decreases: Dict[Tuple[str, str], Optional[float]]
    files: List[str]


def return_report(
    pairings: typechecking.StringPathLike, out_dir: str, unsafe: bool = False
) -> ReturnReport:
    """Summary table, violin plot and grouped bars of an evaluation table.

    :param unsafe: accept a pairings file whose run directory has no manifest
    :raises blockland.ArtifactError: if the provenance is unknown and ``unsafe`` is not set
    """
    if not unsafe and find_manifest(pairings) is None:
        raise ArtifactError(f"{pairings} has no manifest.json next to it; use --unsafe to override")

    results = []
    for (victim_id, opponent_id), returns in read_pairings(pairings).items():
        if not returns:
            log.warning("pairing %s vs %s has no episodes, omitted", victim_id, opponent_id)
            continue
        results.append(PairingResult(victim_id, opponent_id, tuple(returns)))

    baselines = {r.victim_id: r.mean for r in results if r.opponent_id == BASELINE_OPPONENT}
    decreases = {}
    for r in results:
        baseline = baselines.get(r.victim_id)
        decreases[(r.victim_id, r.opponent_id)] = (
            None if baseline is None else percentage_decrease(baseline, r.mean)
        )

    os.makedirs(out_dir, exist_ok=True)
    files = [
        os.path.join(out_dir, name)
        for name in ("returns_summary.csv", "returns_violin.svg", "returns_means.svg")
    ]
    with CSVWriter(files[0], SUMMARY_COLUMNS) as writer:
        for r in results:
            writer.write_row(
                [
                    r.victim_id,
                    r.opponent_id,
                    r.episodes,
                    r.mean,
                    r.std,
                    r.min,
                    r.max,
                    *r.quartiles,
                    decreases[(r.victim_id, r.opponent_id)],
                ]
            )
    save_svg(files[1], violin_chart([violin_of(r) for r in results], "distribution of returns"))

    victims = list(dict.fromkeys(r.victim_id for r in results))
    opponents = list(dict.fromkeys(r.opponent_id for r in results))
    means = {(r.victim_id, r.opponent_id): r.mean for r in results}
    save_svg(
        files[2],
        grouped_bar_chart(
            victims,
            opponents,
            [[means.get((v, o)) for o in opponents] for v in victims],
            "mean return of each victim",
        ),
    )
    return ReturnReport(results, decreases, files)
