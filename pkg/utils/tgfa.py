"""
Trajectory-guided alignment of past BEV maps to the current frame.

Ego-velocity over one frame period gives a displacement in meters, which the
cell sizes turn into a fractional grid shift. Summing the shifts from a past
frame to the current frame gives the offset used to resample that past map.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from extensions.autodiff import reshape
from extensions.nn_ops import bilinear_sample
from utils.bev_pillars import BevFeatureMap, GridConfig
from utils.errors import ValidationError

Offset = Tuple[float, float]


@dataclass(frozen=True)
class GridTrajectory:
    """
    Attributes:
        deltas: Per-step (dx, dy) in cells; deltas[i] moves frame i to frame i+1 of the window
        offsets: offsets[i] = cumulative (dx, dy) from window frame i to the current (last) frame
    """

    deltas: Tuple[Offset, ...]
    offsets: Tuple[Offset, ...]

    @property
    def window(self) -> int:
        return len(self.offsets)


def step_displacement(ego_velocity: Sequence[float], frame_rate: float) -> Tuple[float, float]:
    """Planar displacement (m) over one frame period; vertical motion is ignored."""
    if not frame_rate > 0:
        raise ValidationError("frame_rate must be positive")
    v = np.asarray(ego_velocity, dtype=np.float64).reshape(3)
    return float(v[0] / frame_rate), float(v[1] / frame_rate)


def grid_delta(displacement: Tuple[float, float], grid: GridConfig) -> Offset:
    """Displacement in meters to fractional cells (not rounded)."""
    return displacement[0] / grid.cell_h, displacement[1] / grid.cell_w


def build_trajectory(ego_velocities: Sequence[Sequence[float]], frame_rate: float, grid: GridConfig) -> GridTrajectory:
    """
    Grid trajectory over a window ordered oldest first, the last entry being the current frame.

    The step from frame k-1 to frame k uses frame k-1's velocity (constant speed
    between consecutive scans).
    """
    window = len(ego_velocities)
    if window < 1:
        raise ValidationError("window length must be at least 1")
    deltas = [grid_delta(step_displacement(ego_velocities[k], frame_rate), grid) for k in range(window - 1)]
    offsets: List[Offset] = [(0.0, 0.0)] * window
    total_x, total_y = 0.0, 0.0
    for k in range(window - 2, -1, -1):
        total_x += deltas[k][0]
        total_y += deltas[k][1]
        offsets[k] = (total_x, total_y)
    return GridTrajectory(tuple(deltas), tuple(offsets))


def align(feature_map: BevFeatureMap, offset: Offset) -> BevFeatureMap:
    """
    Resample a past map into the current frame.

    Current cell (i, j) reads the past map at row i + dx, column j + dy, so a
    forward-moving sensor finds older content at larger x. Content that leaves
    the window reads as zero.
    """
    if offset[0] == 0.0 and offset[1] == 0.0:
        return feature_map
    grid = feature_map.grid
    channels, height, width = grid.shape
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    coords = np.stack([cols.reshape(-1) + offset[1], rows.reshape(-1) + offset[0]], axis=1)
    sampled = bilinear_sample(feature_map.tensor, coords)
    return BevFeatureMap(reshape(sampled, (channels, height, width)), grid)


def align_window(maps: Sequence[BevFeatureMap], trajectory: GridTrajectory) -> List[BevFeatureMap]:
    """Align every map of a window (oldest first) to the last one."""
    if len(maps) != trajectory.window:
        raise ValidationError(f"{len(maps)} maps for a window of {trajectory.window}")
    return [align(m, o) for m, o in zip(maps, trajectory.offsets)]
