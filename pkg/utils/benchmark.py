"""
Synthetic place-recognition benchmark and the component ablation runner.

A straight route is lined with static landmarks. Every traversal passes each
place once; the K frames ending at a place form one snippet, rendered with
freshly spawned moving agents. Traversal 0 is the reference database,
traversal 1 provides training queries over the first half of the route and
traversal 2 provides test queries over the second half.
"""
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import FRAME_RATE_HZ, SEED, WINDOW_K
from utils.ablation import FLAG_NAMES, AblationFlags, ablation_ladder
from utils.ego_motion import RansacConfig
from utils.errors import ValidationError
from utils.evaluation import RecallResult, build_database, recall_at_n
from utils.mining import EvalProtocol
from utils.model import ModelConfig, init_model
from utils.preprocess import Window, preprocess_sequence
from utils.radar_io import Pose, ScanSequence
from utils.synth_sim import (
    SimFrame,
    World,
    WorldConfig,
    generate_sequence,
    generate_world,
    spawn_agents,
    straight_trajectory,
)
from utils.training import TrainConfig, TrainingData, TrainResult, train

logger = logging.getLogger(__name__)

Snippet = Tuple[ScanSequence, List[SimFrame]]

DATABASE_TRAVERSAL = 0
TRAIN_TRAVERSAL = 1
TEST_TRAVERSAL = 2


@dataclass(frozen=True)
class BenchmarkConfig:
    """
    Attributes:
        n_places: Places along the route
        place_spacing: Distance between consecutive places, m
        window: Frames per snippet (the largest K a model may use)
        speed_range: Per-snippet vehicle speed, m/s
        longitudinal_jitter / lateral_jitter: Uniform pose jitter at a place, m
        yaw_jitter: Uniform heading jitter, rad
        landmark_density: Static landmarks per square meter of corridor
        corridor_half_width: Lateral extent of the landmark corridor, m
        agents_per_place: Moving agents spawned around every snippet
        dynamic_fraction: Share of each scan drawn from agents
    """

    n_places: int = 200
    place_spacing: float = 12.0
    n_traversals: int = 3
    window: int = WINDOW_K
    speed_range: Tuple[float, float] = (4.0, 10.0)
    longitudinal_jitter: float = 0.5
    lateral_jitter: float = 0.5
    yaw_jitter: float = 0.03
    landmark_density: float = 0.3
    corridor_half_width: float = 30.0
    agents_per_place: int = 12
    dynamic_fraction: float = 0.2
    points_per_scan: int = 400
    noise_sigma_v: float = 0.02
    noise_sigma_pos: float = 0.03
    frame_rate: float = FRAME_RATE_HZ
    seed: int = SEED

    def __post_init__(self) -> None:
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        if self.n_places < 2:
            raise ValidationError("benchmark needs at least two places")
        if self.n_traversals < 3:
            raise ValidationError("benchmark needs database, training and test traversals")
        if not self.place_spacing > 0 or not self.landmark_density > 0:
            raise ValidationError("place_spacing and landmark_density must be positive")
        if self.window < 1:
            raise ValidationError("window must be at least 1")
        low, high = self.speed_range
        if not 0 < low <= high:
            raise ValidationError(f"invalid speed_range {self.speed_range}")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValidationError("dynamic_fraction must be in [0, 1]")

    @property
    def route_length(self) -> float:
        return (self.n_places - 1) * self.place_spacing

    def world_config(self) -> WorldConfig:
        margin = WorldConfig.max_range
        x_range = (-margin, self.route_length + margin)
        y_range = (-self.corridor_half_width, self.corridor_half_width)
        area = (x_range[1] - x_range[0]) * (y_range[1] - y_range[0])
        return WorldConfig(
            seed=self.seed,
            n_landmarks=int(round(self.landmark_density * area)),
            landmark_region=(x_range, y_range, (-1.0, 4.0)),
            noise_sigma_v=self.noise_sigma_v,
            noise_sigma_pos=self.noise_sigma_pos,
            points_per_scan=self.points_per_scan,
            dynamic_fraction=self.dynamic_fraction,
            frame_rate=self.frame_rate,
        )

    def train_places(self) -> List[int]:
        return list(range(self.n_places // 2))

    def test_places(self) -> List[int]:
        return list(range(self.n_places // 2, self.n_places))


@dataclass(frozen=True, eq=False)
class Benchmark:
    config: BenchmarkConfig
    world: World
    snippets: List[List[Snippet]]

    def place_position(self, place: int) -> Tuple[float, float]:
        return (place * self.config.place_spacing, 0.0)


def _render_snippet(world: World, world_config: WorldConfig, config: BenchmarkConfig,
                    traversal: int, place: int) -> Snippet:
    rng = np.random.default_rng([config.seed, traversal, place])
    yaw = rng.uniform(-config.yaw_jitter, config.yaw_jitter)
    anchor_x = place * config.place_spacing + rng.uniform(-config.longitudinal_jitter, config.longitudinal_jitter)
    anchor_y = rng.uniform(-config.lateral_jitter, config.lateral_jitter)
    speed = rng.uniform(*config.speed_range)
    back = (config.window - 1) * speed / config.frame_rate
    start = Pose(anchor_x - back * math.cos(yaw), anchor_y - back * math.sin(yaw), 0.0, yaw)
    trajectory = straight_trajectory(start, speed, config.window, config.frame_rate)

    reach = world_config.max_range + back + 5.0
    offsets = world.landmark_positions[:, :2] - np.array([anchor_x, anchor_y])
    near = np.einsum("ij,ij->i", offsets, offsets) <= reach * reach
    agent_config = replace(
        world_config,
        n_dynamic_agents=config.agents_per_place,
        landmark_region=((anchor_x - 5.0, anchor_x + world_config.max_range), (anchor_y - 15.0, anchor_y + 15.0), (-0.5, 1.5)),
    )
    agents = spawn_agents(agent_config, int(rng.integers(2 ** 31)))
    local = World(world.landmark_positions[near], world.landmark_rcs[near], **agents)
    return generate_sequence(local, trajectory, world_config, stream=traversal * config.n_places + place)


def build_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    world_config = config.world_config()
    world = generate_world(world_config)
    snippets = [
        [_render_snippet(world, world_config, config, traversal, place) for place in range(config.n_places)]
        for traversal in range(config.n_traversals)
    ]
    logger.info(
        "Built benchmark: %d places x %d traversals, %d landmarks, dynamic fraction %.2f",
        config.n_places, config.n_traversals, world.n_landmarks, config.dynamic_fraction,
    )
    return Benchmark(config, world, snippets)


def benchmark_windows(
    benchmark: Benchmark,
    traversal: int,
    flags: AblationFlags,
    places: Optional[Sequence[int]] = None,
    window: Optional[int] = None,
    ransac: Optional[RansacConfig] = None,
) -> List[Window]:
    """
    One window per place, ending at the place's anchor frame. A window shorter
    than the snippet keeps its latest frames. The window's anchor is the place index.
    """
    size = window or benchmark.config.window
    if size > benchmark.config.window:
        raise ValidationError(f"window {size} exceeds the benchmark snippet length {benchmark.config.window}")
    places = range(benchmark.config.n_places) if places is None else places
    windows = []
    for place in places:
        sequence, _ = benchmark.snippets[traversal][place]
        cut, _ = preprocess_sequence(sequence, ransac, flags, size, sequence_id=f"traversal_{traversal}")
        windows.append(replace(cut[-1], anchor=place))
    return windows


@dataclass(frozen=True)
class ExperimentResult:
    recall: RecallResult
    training: Optional[TrainResult]


def run_experiment(
    benchmark: Benchmark,
    model_config: ModelConfig,
    train_config: TrainConfig,
    protocol: EvalProtocol = EvalProtocol(),
    progress: bool = False,
) -> ExperimentResult:
    """
    Train on the first half of the route (zero epochs keeps the initial
    parameters) and report recall of test queries against the full database traversal.
    """
    flags, size = model_config.flags, model_config.window
    config = benchmark.config
    training_result = None
    if train_config.epochs > 0:
        data = TrainingData(
            benchmark_windows(benchmark, DATABASE_TRAVERSAL, flags, config.train_places(), size, model_config.ransac),
            benchmark_windows(benchmark, TRAIN_TRAVERSAL, flags, config.train_places(), size, model_config.ransac),
        )
        training_result = train(data, train_config, model_config, protocol=protocol, progress=progress)
        params = training_result.params
    else:
        params = init_model(model_config, train_config.seed)

    references = build_database(
        benchmark_windows(benchmark, DATABASE_TRAVERSAL, flags, None, size, model_config.ransac), params, model_config,
    )
    queries = build_database(
        benchmark_windows(benchmark, TEST_TRAVERSAL, flags, config.test_places(), size, model_config.ransac),
        params, model_config,
    )
    recall = recall_at_n(queries, references, protocol)
    logger.info("%s K=%d: %s", flags.label, size, ", ".join(f"R@{n}={r:.3f}" for n, r in recall.recall.items()))
    return ExperimentResult(recall, training_result)


def ablation_columns(protocol: EvalProtocol = EvalProtocol()) -> List[str]:
    return list(FLAG_NAMES) + [f"r{n}" for n in protocol.recall_n]


def run_ablation(
    benchmark: Benchmark,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (SEED,),
    ladder: Optional[Sequence[AblationFlags]] = None,
    protocol: EvalProtocol = EvalProtocol(),
    csv_path: Optional[str] = None,
) -> pd.DataFrame:
    """
    One row per flag combination with recall averaged over `seeds`.

    Columns: dpr, fa, tsp, da (0/1) and r<N> for every N of the protocol.
    """
    if not seeds:
        raise ValidationError("ablation needs at least one seed")
    rows: List[Dict[str, float]] = []
    for flags in ladder or ablation_ladder():
        recalls: Dict[int, List[float]] = {n: [] for n in protocol.recall_n}
        for seed in seeds:
            result = run_experiment(
                benchmark,
                replace(model_config, flags=flags, seed=seed),
                replace(train_config, seed=seed),
                protocol,
            )
            for n in protocol.recall_n:
                recalls[n].append(result.recall.recall[n])
        row: Dict[str, float] = {name: int(getattr(flags, name)) for name in FLAG_NAMES}
        row.update({f"r{n}": float(np.mean(values)) for n, values in recalls.items()})
        rows.append(row)
        logger.info("Ablation %s: R@1 %.4f over %d seeds", flags.label, row.get("r1", float("nan")), len(seeds))

    table = pd.DataFrame(rows, columns=ablation_columns(protocol))
    if csv_path:
        os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
        table.to_csv(csv_path, index=False, lineterminator="\n")
    return table
