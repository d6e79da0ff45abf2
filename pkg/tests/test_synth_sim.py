import json
import math

import numpy as np
import pytest

from utils.ego_motion import solve_ego_velocity
from utils.errors import FormatError, ValidationError
from utils.radar_io import Pose
from utils.synth_sim import (
    World,
    WorldConfig,
    decode_mask,
    encode_mask,
    generate_sequence,
    generate_world,
    load_labels,
    loop_trajectory,
    render_scan,
    respawn_agents,
    save_simulation,
    straight_trajectory,
)


def _single_landmark(position):
    return World(np.array([position]), np.array([10.0]))


WIDE = WorldConfig(azimuth_half_angle=math.pi)


def test_static_landmark_ahead_recedes_at_ego_speed():
    frame = render_scan(_single_landmark((10.0, 0.0, 0.0)), Pose(0.0, 0.0), (2.0, 0.0, 0.0), WIDE)
    assert len(frame.scan) == 1
    assert frame.scan.radial_velocities[0] == pytest.approx(-2.0)
    assert not frame.dynamic_mask[0]


def test_orthogonal_line_of_sight_has_no_doppler():
    frame = render_scan(_single_landmark((0.0, 5.0, 0.0)), Pose(0.0, 0.0), (2.0, 0.0, 0.0), WIDE)
    assert frame.scan.radial_velocities[0] == pytest.approx(0.0, abs=1e-12)


def test_moving_agent_doppler_is_relative():
    world = World(
        np.zeros((0, 3)), np.zeros(0),
        agent_positions=[[10.0, 0.0, 0.0]], agent_velocities=[[3.0, 0.0, 0.0]],
        agent_rcs=[5.0], agent_ids=[0],
    )
    frame = render_scan(world, Pose(0.0, 0.0), (2.0, 0.0, 0.0), WIDE)
    assert frame.scan.radial_velocities[0] == pytest.approx(1.0)
    assert frame.dynamic_mask.tolist() == [True]


def test_world_is_deterministic_and_contained():
    config = WorldConfig(seed=7, n_dynamic_agents=3)
    world = generate_world(config)
    assert world == generate_world(config)
    assert world.n_landmarks == 500
    (x0, x1), (y0, y1), (z0, z1) = config.landmark_region
    p = world.landmark_positions
    assert np.all((p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1) & (p[:, 2] >= z0) & (p[:, 2] <= z1))
    speeds = np.linalg.norm(world.agent_velocities[:, :2], axis=1)
    assert np.all((speeds >= 2.0) & (speeds <= 10.0))
    assert np.all(world.agent_velocities[:, 2] == 0.0)


def test_landmarks_do_not_depend_on_agent_count():
    a = generate_world(WorldConfig(seed=3, n_dynamic_agents=0))
    b = generate_world(WorldConfig(seed=3, n_dynamic_agents=5))
    np.testing.assert_array_equal(a.landmark_positions, b.landmark_positions)
    c = respawn_agents(b, WorldConfig(seed=3, n_dynamic_agents=5), seed=99)
    np.testing.assert_array_equal(c.landmark_positions, b.landmark_positions)
    assert not np.array_equal(c.agent_positions, b.agent_positions)


def test_empty_world_renders_empty_scan():
    config = WorldConfig(n_landmarks=0, n_dynamic_agents=0)
    world = generate_world(config)
    assert world.n_landmarks == 0 and world.n_agent_scatterers == 0
    assert len(render_scan(world, Pose(0.0, 0.0), (1.0, 0.0, 0.0), config).scan) == 0


def test_rendered_points_respect_fov():
    config = WorldConfig(seed=1, n_dynamic_agents=4, noise_sigma_pos=0.05, noise_sigma_v=0.05)
    world = generate_world(config)
    scan = render_scan(world, Pose(5.0, 2.0, 0.0, 0.4), (3.0, 0.0, 0.0), config).scan
    ranges = np.linalg.norm(scan.positions, axis=1)
    azimuth = np.arctan2(scan.positions[:, 1], scan.positions[:, 0])
    assert len(scan) > 0
    assert np.all(ranges <= config.max_range)
    assert np.all(np.abs(azimuth) <= config.azimuth_half_angle)
    assert len(scan) <= config.points_per_scan


def test_static_subset_recovers_ego_velocity_exactly():
    config = WorldConfig(seed=5, n_dynamic_agents=4)
    world = generate_world(config)
    frame = render_scan(world, Pose(2.0, -1.0, 0.0, 0.2), (4.0, 1.0, 0.0), config)
    static = frame.scan.select(frame.static_mask)
    np.testing.assert_allclose(solve_ego_velocity(static), [4.0, 1.0, 0.0], atol=1e-9)


def test_straight_run_steps_and_timestamps():
    config = WorldConfig(seed=2)
    trajectory = straight_trajectory(Pose(0.0, 0.0), 3.2, 10, 10.0)
    sequence, frames = generate_sequence(generate_world(config), trajectory, config)
    assert len(sequence) == 10 and len(frames) == 10
    xs = [pose.x for pose in sequence.poses]
    np.testing.assert_allclose(np.diff(xs), np.full(9, 0.32), atol=1e-12)
    np.testing.assert_allclose([s.timestamp for s in sequence.scans], np.arange(10) / 10.0)


def test_single_pose_and_empty_trajectory():
    config = WorldConfig(seed=2)
    world = generate_world(config)
    sequence, _ = generate_sequence(world, straight_trajectory(Pose(0.0, 0.0), 1.0, 1, 10.0), config)
    assert len(sequence) == 1
    with pytest.raises(ValidationError):
        generate_sequence(world, [], config)


def test_loop_returns_near_start():
    samples = loop_trajectory((0.0, 0.0), 20.0, 8.0, 10.0)
    first, last = samples[0][0], samples[-1][0]
    assert first.planar_distance(last) < 5.0
    assert len(samples) > 100


def test_sequences_are_bitwise_reproducible():
    config = WorldConfig(seed=11, n_dynamic_agents=3, noise_sigma_v=0.1, noise_sigma_pos=0.1, ghost_fraction=0.1)
    world = generate_world(config)
    trajectory = straight_trajectory(Pose(0.0, 0.0), 5.0, 4, 10.0)
    first, _ = generate_sequence(world, trajectory, config, stream=1)
    second, _ = generate_sequence(world, trajectory, config, stream=1)
    assert first.scans == second.scans
    other, _ = generate_sequence(world, trajectory, config, stream=2)
    assert other.scans != first.scans


def test_dynamic_fraction_is_honoured():
    config = WorldConfig(
        seed=4, n_landmarks=1000, n_dynamic_agents=20,
        landmark_region=((0.0, 30.0), (-15.0, 15.0), (-1.0, 3.0)),
        points_per_scan=200, dynamic_fraction=0.25,
    )
    frame = render_scan(generate_world(config), Pose(0.0, 0.0), (5.0, 0.0, 0.0), config)
    assert len(frame.scan) == 200
    assert int(frame.dynamic_mask.sum()) == 50


def test_ghosts_are_labelled():
    config = WorldConfig(seed=6, ghost_fraction=0.25, points_per_scan=100)
    frame = render_scan(generate_world(config), Pose(0.0, 0.0), (1.0, 0.0, 0.0), config)
    assert int(frame.ghost_mask.sum()) == 25
    assert not np.any(frame.ghost_mask & frame.dynamic_mask)


def test_ghosts_stay_inside_sensor_range():
    config = WorldConfig(seed=2, ghost_fraction=0.5, points_per_scan=400, min_range=0.5, max_range=2.0,
                         landmark_region=((-10.0, 60.0), (-25.0, 25.0), (-1.0, 4.0)))
    frame = render_scan(generate_world(config), Pose(0.0, 0.0), (1.0, 0.0, 0.0), config)
    ghosts = frame.scan.points[frame.ghost_mask]
    ranges = np.linalg.norm(ghosts[:, :3], axis=1)
    assert ghosts.shape[0] == 200
    assert ranges.min() >= config.min_range - 1e-9
    assert ranges.max() <= config.max_range + 1e-9


def test_mask_run_length_encoding():
    mask = np.array([True, True, False, True, False, False])
    encoded = encode_mask(mask)
    assert encoded == {"start": True, "runs": [2, 1, 1, 2]}
    np.testing.assert_array_equal(decode_mask(encoded), mask)
    assert decode_mask(encode_mask(np.zeros(0, dtype=bool))).size == 0


def test_simulation_directory_has_labels(tmp_path):
    config = WorldConfig(seed=8, n_dynamic_agents=2)
    sequence, frames = generate_sequence(generate_world(config), straight_trajectory(Pose(0.0, 0.0), 4.0, 3, 10.0), config)
    save_simulation(sequence, frames, str(tmp_path))
    labels = load_labels(str(tmp_path / "labels.json"))
    assert [entry["index"] for entry in labels] == [0, 1, 2]
    for entry, frame in zip(labels, frames):
        np.testing.assert_array_equal(entry["dynamic_mask"], frame.dynamic_mask)
        np.testing.assert_array_equal(entry["ego_velocity"], frame.ego_velocity)


def test_malformed_labels_file(tmp_path):
    path = tmp_path / "labels.json"
    path.write_text(json.dumps({"frames": [{"index": 0, "ego_velocity": [1.0, 0.0, 0.0]}]}), encoding="utf-8")
    with pytest.raises(FormatError, match="frame 0"):
        load_labels(str(path))
    path.write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(FormatError):
        load_labels(str(path))
