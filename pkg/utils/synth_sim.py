"""
Deterministic synthetic radar world.

A world is a set of static point landmarks plus dynamic agents (clusters of
scatterers sharing one constant planar velocity). Scans are rendered from a
planar pose; each return's radial velocity is the line-of-sight projection of
the scatterer velocity relative to the sensor, so ego-velocity, dynamic labels
and poses are all known exactly.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import FRAME_RATE_HZ, SEED
from utils.errors import FormatError, ValidationError
from utils.radar_io import Frame, Pose, RadarScan, ScanSequence, save_sequence

logger = logging.getLogger(__name__)

Region = Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]
TrajectorySample = Tuple[Pose, np.ndarray]

LABELS_FILENAME = "labels.json"
GHOST_MAX_SPEED = 15.0  # m/s, v_d range of multipath ghosts


@dataclass(frozen=True)
class WorldConfig:
    """
    Simulator settings.

    Attributes:
        seed: Root seed; landmarks, agents and per-frame noise derive from it
        landmark_region: ((x_min, x_max), (y_min, y_max), (z_min, z_max)) in world meters
        agent_speed_range: (min, max) planar speed of agents, m/s
        scatterers_per_agent: Returns contributed by one agent
        agent_extent: Std-dev (m) of scatterer spread around an agent center
        max_range / min_range: Sensor range limits, m
        azimuth_half_angle: Half field of view, rad
        ghost_fraction: Share of each scan made of uniform-random multipath ghosts
        dynamic_fraction: When set, share of non-ghost points drawn from agents (as far as visible)
    """

    seed: int = SEED
    n_landmarks: int = 500
    landmark_region: Region = ((-10.0, 60.0), (-25.0, 25.0), (-1.0, 4.0))
    n_dynamic_agents: int = 0
    agent_speed_range: Tuple[float, float] = (2.0, 10.0)
    scatterers_per_agent: int = 10
    agent_extent: float = 0.8
    noise_sigma_v: float = 0.0
    noise_sigma_pos: float = 0.0
    points_per_scan: int = 400
    max_range: float = 30.0
    min_range: float = 0.5
    azimuth_half_angle: float = math.radians(60.0)
    ghost_fraction: float = 0.0
    dynamic_fraction: Optional[float] = None
    frame_rate: float = FRAME_RATE_HZ

    def __post_init__(self) -> None:
        object.__setattr__(self, "landmark_region", tuple(tuple(float(v) for v in axis) for axis in self.landmark_region))
        object.__setattr__(self, "agent_speed_range", tuple(float(v) for v in self.agent_speed_range))
        if min(self.n_landmarks, self.n_dynamic_agents, self.scatterers_per_agent, self.points_per_scan) < 0:
            raise ValidationError("simulator counts must be non-negative")
        if self.noise_sigma_v < 0 or self.noise_sigma_pos < 0 or self.agent_extent < 0:
            raise ValidationError("simulator sigmas must be non-negative")
        if not self.max_range > 0 or not 0 < self.min_range < self.max_range:
            raise ValidationError("need 0 < min_range < max_range")
        if not 0 < self.azimuth_half_angle <= math.pi:
            raise ValidationError("azimuth_half_angle must be in (0, pi]")
        if not 0.0 <= self.ghost_fraction < 1.0:
            raise ValidationError("ghost_fraction must be in [0, 1)")
        if self.dynamic_fraction is not None and not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValidationError("dynamic_fraction must be in [0, 1]")
        low, high = self.agent_speed_range
        if low < 0 or high < low:
            raise ValidationError(f"invalid agent_speed_range {self.agent_speed_range}")
        for low, high in self.landmark_region:
            if high < low:
                raise ValidationError(f"invalid landmark_region {self.landmark_region}")
        if not self.frame_rate > 0:
            raise ValidationError("frame_rate must be positive")


@dataclass(frozen=True, eq=False)
class World:
    """
    Scatterers of a synthetic scene, positions at time 0 in world coordinates.

    Attributes:
        landmark_positions: [n, 3]
        landmark_rcs: [n] dBsm, fixed per landmark
        agent_positions: [m, 3] scatterer positions at t=0
        agent_velocities: [m, 3] constant world-frame velocity per scatterer
        agent_rcs: [m] dBsm
        agent_ids: [m] index of the agent each scatterer belongs to
    """

    landmark_positions: np.ndarray
    landmark_rcs: np.ndarray
    agent_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    agent_velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    agent_rcs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    agent_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        for name in ("landmark_positions", "agent_positions", "agent_velocities"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "landmark_rcs", np.asarray(self.landmark_rcs, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "agent_rcs", np.asarray(self.agent_rcs, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "agent_ids", np.asarray(self.agent_ids, dtype=np.int64).reshape(-1))
        if self.landmark_rcs.shape[0] != self.landmark_positions.shape[0]:
            raise ValidationError("landmark_rcs length must match landmark_positions")
        m = self.agent_positions.shape[0]
        if self.agent_velocities.shape[0] != m or self.agent_rcs.shape[0] != m or self.agent_ids.shape[0] != m:
            raise ValidationError("agent arrays must share one length")

    @property
    def n_landmarks(self) -> int:
        return int(self.landmark_positions.shape[0])

    @property
    def n_agent_scatterers(self) -> int:
        return int(self.agent_positions.shape[0])

    def agent_positions_at(self, time: float) -> np.ndarray:
        return self.agent_positions + self.agent_velocities * time

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("landmark_positions", "landmark_rcs", "agent_positions",
                         "agent_velocities", "agent_rcs", "agent_ids")
        )


@dataclass(frozen=True, eq=False)
class SimFrame:
    """One rendered frame with its ground truth."""

    scan: RadarScan
    pose: Pose
    ego_velocity: np.ndarray
    dynamic_mask: np.ndarray
    ghost_mask: np.ndarray
    frame_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ego_velocity", np.asarray(self.ego_velocity, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dynamic_mask", np.asarray(self.dynamic_mask, dtype=bool).reshape(-1))
        object.__setattr__(self, "ghost_mask", np.asarray(self.ghost_mask, dtype=bool).reshape(-1))
        if self.dynamic_mask.shape[0] != len(self.scan) or self.ghost_mask.shape[0] != len(self.scan):
            raise ValidationError("label masks must have one entry per point")

    @property
    def static_mask(self) -> np.ndarray:
        return ~(self.dynamic_mask | self.ghost_mask)


def _uniform_in_region(rng: np.random.Generator, region: Region, count: int) -> np.ndarray:
    lows = np.array([axis[0] for axis in region])
    highs = np.array([axis[1] for axis in region])
    return rng.uniform(lows, highs, size=(count, 3))


def spawn_agents(config: WorldConfig, seed: int) -> Dict[str, np.ndarray]:
    """Draw agent scatterers (positions at t=0, velocities, rcs, ids) from `seed`."""
    rng = np.random.default_rng(seed)
    n_agents = config.n_dynamic_agents
    per_agent = config.scatterers_per_agent
    centers = _uniform_in_region(rng, config.landmark_region, n_agents)
    headings = rng.uniform(0.0, 2.0 * math.pi, size=n_agents)
    speeds = rng.uniform(config.agent_speed_range[0], config.agent_speed_range[1], size=n_agents)
    velocities = np.stack([speeds * np.cos(headings), speeds * np.sin(headings), np.zeros(n_agents)], axis=1)

    ids = np.repeat(np.arange(n_agents), per_agent)
    spread = rng.normal(0.0, config.agent_extent, size=(n_agents * per_agent, 3))
    spread[:, 2] = np.abs(spread[:, 2])
    positions = centers[ids] + spread if n_agents else np.zeros((0, 3))
    return {
        "agent_positions": positions,
        "agent_velocities": velocities[ids] if n_agents else np.zeros((0, 3)),
        "agent_rcs": rng.uniform(0.0, 30.0, size=n_agents * per_agent),
        "agent_ids": ids,
    }


def generate_world(config: WorldConfig) -> World:
    """
    Sample landmarks uniformly in the region and agents with constant planar velocity.

    Landmarks and agents use independent child streams of the root seed, so the
    landmark layout does not depend on the number of agents.
    """
    landmark_seq, agent_seq = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(landmark_seq)
    positions = _uniform_in_region(rng, config.landmark_region, config.n_landmarks)
    rcs = rng.uniform(0.0, 30.0, size=config.n_landmarks)
    agents = spawn_agents(config, int(agent_seq.generate_state(1)[0]))
    logger.debug("Generated world: %d landmarks, %d agents", config.n_landmarks, config.n_dynamic_agents)
    return World(positions, rcs, **agents)


def respawn_agents(world: World, config: WorldConfig, seed: int) -> World:
    """Same landmarks, freshly drawn agents."""
    return World(world.landmark_positions, world.landmark_rcs, **spawn_agents(config, seed))


def _rotation(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _in_fov(points: np.ndarray, config: WorldConfig) -> np.ndarray:
    ranges = np.linalg.norm(points, axis=1)
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    return (ranges <= config.max_range) & (ranges >= config.min_range) & (np.abs(azimuth) <= config.azimuth_half_angle)


def render_scan(
    world: World,
    pose: Pose,
    ego_velocity: Sequence[float],
    config: WorldConfig,
    time: float = 0.0,
    frame_index: int = 0,
    stream: int = 0,
) -> SimFrame:
    """
    Render one radar scan seen from `pose`.

    Args:
        world: Scene to observe
        pose: Sensor pose in world coordinates (planar, yaw about z)
        ego_velocity: Sensor velocity in its own frame, m/s
        config: Noise, field of view and point budget
        time: Seconds since t=0, used to move agents
        frame_index: Per-frame RNG stream index
        stream: Extra RNG stream key (for example the traversal number)

    Returns:
        SimFrame whose scan points are in the sensor frame
    """
    rng = np.random.default_rng([config.seed, stream, frame_index])
    rotation_t = _rotation(pose.yaw).T
    v_ego = np.asarray(ego_velocity, dtype=np.float64).reshape(3)

    world_points = np.concatenate([world.landmark_positions, world.agent_positions_at(time)], axis=0)
    world_velocity = np.concatenate([np.zeros_like(world.landmark_positions), world.agent_velocities], axis=0)
    rcs = np.concatenate([world.landmark_rcs, world.agent_rcs])
    is_agent = np.concatenate([np.zeros(world.n_landmarks, dtype=bool), np.ones(world.n_agent_scatterers, dtype=bool)])

    local = (world_points - pose.translation) @ rotation_t.T
    relative_velocity = world_velocity @ rotation_t.T - v_ego
    ranges = np.linalg.norm(local, axis=1)
    ranges = np.where(ranges > 0.0, ranges, 1.0)
    radial = np.einsum("ij,ij->i", local / ranges[:, None], relative_velocity)

    if config.noise_sigma_pos > 0:
        local = local + rng.normal(0.0, config.noise_sigma_pos, size=local.shape)
    if config.noise_sigma_v > 0:
        radial = radial + rng.normal(0.0, config.noise_sigma_v, size=radial.shape)

    visible = np.flatnonzero(_in_fov(local, config))
    n_ghosts = int(round(config.ghost_fraction * config.points_per_scan))
    budget = config.points_per_scan - n_ghosts
    chosen = _subsample(rng, visible, is_agent[visible], budget, config.dynamic_fraction)

    points = np.column_stack([local[chosen], radial[chosen], rcs[chosen]])
    dynamic = is_agent[chosen]
    ghosts = np.zeros(chosen.shape[0], dtype=bool)
    if n_ghosts:
        ghost_points = _ghost_points(rng, n_ghosts, config)
        points = np.concatenate([points, ghost_points], axis=0)
        dynamic = np.concatenate([dynamic, np.zeros(n_ghosts, dtype=bool)])
        ghosts = np.concatenate([ghosts, np.ones(n_ghosts, dtype=bool)])

    scan = RadarScan(points, timestamp=time)
    return SimFrame(scan, pose, v_ego, dynamic, ghosts, frame_index)


def _subsample(
    rng: np.random.Generator,
    visible: np.ndarray,
    visible_is_agent: np.ndarray,
    budget: int,
    dynamic_fraction: Optional[float],
) -> np.ndarray:
    """Pick at most `budget` visible indices, keeping source order."""
    if dynamic_fraction is None:
        if visible.shape[0] <= budget:
            return visible
        return np.sort(rng.choice(visible, size=budget, replace=False))
    dynamic_pool = visible[visible_is_agent]
    static_pool = visible[~visible_is_agent]
    n_dynamic = min(dynamic_pool.shape[0], int(round(dynamic_fraction * budget)))
    n_static = min(static_pool.shape[0], budget - n_dynamic)
    picked_dynamic = rng.choice(dynamic_pool, size=n_dynamic, replace=False) if n_dynamic else np.zeros(0, dtype=np.int64)
    picked_static = rng.choice(static_pool, size=n_static, replace=False) if n_static else np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([picked_static, picked_dynamic]).astype(np.int64))


def _ghost_points(rng: np.random.Generator, count: int, config: WorldConfig) -> np.ndarray:
    ranges = rng.uniform(config.min_range, config.max_range, size=count)
    azimuth = rng.uniform(-config.azimuth_half_angle, config.azimuth_half_angle, size=count)
    z_low, z_high = config.landmark_region[2]
    # |z| <= range keeps every ghost on the sampled range sphere
    z = np.clip(rng.uniform(z_low, z_high, size=count), -ranges, ranges)
    planar = np.sqrt(np.maximum(ranges ** 2 - z ** 2, 0.0))
    x = planar * np.cos(azimuth)
    y = planar * np.sin(azimuth)
    v_d = rng.uniform(-GHOST_MAX_SPEED, GHOST_MAX_SPEED, size=count)
    rcs = rng.uniform(0.0, 30.0, size=count)
    return np.column_stack([x, y, z, v_d, rcs])


def generate_sequence(
    world: World,
    trajectory: Sequence[TrajectorySample],
    config: WorldConfig,
    stream: int = 0,
    start_time: float = 0.0,
) -> Tuple[ScanSequence, List[SimFrame]]:
    """
    Render one frame per trajectory sample, spaced 1 / frame_rate seconds apart.

    Raises:
        ValidationError: Empty trajectory
    """
    if not trajectory:
        raise ValidationError("trajectory must contain at least one pose")
    frames: List[SimFrame] = []
    for index, (pose, velocity) in enumerate(trajectory):
        t = start_time + index / config.frame_rate
        frames.append(render_scan(world, pose, velocity, config, time=t, frame_index=index, stream=stream))
    sequence = ScanSequence(tuple(Frame(f.scan, f.pose) for f in frames), config.frame_rate)
    return sequence, frames


def trajectory_from_velocities(
    start: Pose,
    velocities: Sequence[Sequence[float]],
    frame_rate: float,
    yaw_rates: Optional[Sequence[float]] = None,
) -> List[TrajectorySample]:
    """
    Integrate body-frame velocities into poses.

    Pose k is pose k-1 advanced by velocity k-1 for one frame period, so the
    motion between consecutive frames is constant at the earlier frame's velocity.
    """
    if not velocities:
        raise ValidationError("need at least one velocity")
    samples: List[TrajectorySample] = []
    pose = start
    for index, velocity in enumerate(velocities):
        v = np.asarray(velocity, dtype=np.float64).reshape(3)
        samples.append((pose, v))
        step = _rotation(pose.yaw) @ v / frame_rate
        yaw_step = (yaw_rates[index] / frame_rate) if yaw_rates is not None else 0.0
        pose = Pose(pose.x + step[0], pose.y + step[1], pose.z + step[2], pose.yaw + yaw_step)
    return samples


def straight_trajectory(start: Pose, speed: float, n_frames: int, frame_rate: float) -> List[TrajectorySample]:
    """Constant forward speed along the start heading."""
    return trajectory_from_velocities(start, [(speed, 0.0, 0.0)] * n_frames, frame_rate)


def loop_trajectory(
    center: Tuple[float, float],
    radius: float,
    speed: float,
    frame_rate: float,
) -> List[TrajectorySample]:
    """
    One counter-clockwise lap of a circle, ending within one step of the start.
    """
    if radius <= 0 or speed <= 0:
        raise ValidationError("loop needs positive radius and speed")
    step_angle = speed / frame_rate / radius
    n_frames = int(math.ceil(2.0 * math.pi / step_angle)) + 1
    samples: List[TrajectorySample] = []
    for index in range(n_frames):
        theta = min(index * step_angle, 2.0 * math.pi)
        pose = Pose(
            center[0] + radius * math.cos(theta - math.pi / 2),
            center[1] + radius * math.sin(theta - math.pi / 2),
            0.0,
            theta,
        )
        samples.append((pose, np.array([speed, 0.0, 0.0])))
    return samples


def encode_mask(mask: np.ndarray) -> Dict[str, Any]:
    """Run-length encode a boolean mask as {"start": first value, "runs": [lengths]}."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size == 0:
        return {"start": False, "runs": []}
    change = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [mask.size]])
    return {"start": bool(mask[0]), "runs": np.diff(bounds).astype(int).tolist()}


def decode_mask(encoded: Dict[str, Any]) -> np.ndarray:
    value = bool(encoded.get("start", False))
    parts = []
    for run in encoded.get("runs", []):
        parts.append(np.full(int(run), value, dtype=bool))
        value = not value
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def save_simulation(sequence: ScanSequence, frames: Sequence[SimFrame], directory: str) -> str:
    """
    Write a simulated sequence directory: manifest, scans and labels.json.

    Returns:
        Path of the manifest
    """
    manifest = save_sequence(sequence, directory)
    labels = {
        "frames": [
            {
                "index": index,
                "ego_velocity": frame.ego_velocity.tolist(),
                "dynamic_mask": encode_mask(frame.dynamic_mask),
                "ghost_mask": encode_mask(frame.ghost_mask),
            }
            for index, frame in enumerate(frames)
        ]
    }
    with open(os.path.join(directory, LABELS_FILENAME), "w", encoding="utf-8") as handle:
        json.dump(labels, handle)
    return manifest


def load_labels(path: str) -> List[Dict[str, Any]]:
    """Read labels.json into per-frame dicts with decoded masks."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise FormatError(f"labels file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise FormatError(f"labels file {path} is not an object")
    result = []
    for position, entry in enumerate(data.get("frames", [])):
        try:
            result.append({
                "index": int(entry["index"]),
                "ego_velocity": np.array(entry["ego_velocity"], dtype=np.float64).reshape(3),
                "dynamic_mask": decode_mask(entry["dynamic_mask"]),
                "ghost_mask": decode_mask(entry.get("ghost_mask", {"start": False, "runs": []})),
            })
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise FormatError(f"labels file {path}: frame {position} is malformed: {e}") from e
    return result
