"""
Pillar encoding of a radar scan into a bird's-eye-view feature map.

Rows of the BEV grid index x cells (forward), columns index y cells (left).
Each pillar is one grid cell spanning the full z range.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from config import MAX_POINTS_PER_PILLAR, PILLAR_CHANNELS
from extensions.autodiff import Tensor, relu
from extensions.nn_ops import layer_norm, linear, masked_max, scatter_cells
from utils.errors import ValidationError
from utils.params_io import ParameterStore, glorot_uniform
from utils.radar_io import RadarScan

logger = logging.getLogger(__name__)

POINT_FEATURES = 9
_GRID_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GridConfig:
    """
    BEV grid geometry and pillar settings.

    Attributes:
        x_range / y_range / z_range: (min, max) in meters
        cell_h: Cell size along x (rows), m
        cell_w: Cell size along y (columns), m
        max_points_per_pillar: Points kept per pillar
        channels: Feature channels C of the encoded map
    """

    x_range: Tuple[float, float] = (0.0, 34.56)
    y_range: Tuple[float, float] = (-19.84, 19.84)
    z_range: Tuple[float, float] = (-3.0, 10.0)
    cell_h: float = 0.32
    cell_w: float = 0.32
    max_points_per_pillar: int = MAX_POINTS_PER_PILLAR
    channels: int = PILLAR_CHANNELS

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "z_range"):
            low, high = (float(v) for v in getattr(self, name))
            if not high > low:
                raise ValidationError(f"{name} must be increasing, got {getattr(self, name)}")
            object.__setattr__(self, name, (low, high))
        if not self.cell_h > 0 or not self.cell_w > 0:
            raise ValidationError("cell sizes must be positive")
        for extent, cell, axis in ((self.x_range, self.cell_h, "x"), (self.y_range, self.cell_w, "y")):
            count = (extent[1] - extent[0]) / cell
            if abs(count - round(count)) > _GRID_TOLERANCE:
                raise ValidationError(f"{axis} range is not divisible by the cell size")
        if self.max_points_per_pillar < 1 or self.channels < 1:
            raise ValidationError("max_points_per_pillar and channels must be at least 1")

    @property
    def height(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_h))

    @property
    def width(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_w))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @classmethod
    def full(cls, **overrides: Any) -> "GridConfig":
        """Full-size grid, 216 x 248 cells."""
        values = dict(x_range=(0.0, 69.12), y_range=(-39.68, 39.68))
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk(cls, **overrides: Any) -> "GridConfig":
        """Reduced grid, 108 x 124 cells."""
        return cls(**overrides)

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "GridConfig":
        if name == "full":
            return cls.full(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ValidationError(f"unknown grid preset: {name}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "cell_h": self.cell_h,
            "cell_w": self.cell_w,
            "max_points_per_pillar": self.max_points_per_pillar,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridConfig":
        try:
            return cls(
                x_range=tuple(data["x_range"]),
                y_range=tuple(data["y_range"]),
                z_range=tuple(data["z_range"]),
                cell_h=float(data["cell_h"]),
                cell_w=float(data["cell_w"]),
                max_points_per_pillar=int(data["max_points_per_pillar"]),
                channels=int(data["channels"]),
            )
        except (KeyError, TypeError) as e:
            raise ValidationError(f"invalid grid description: {e}") from e


@dataclass(frozen=True)
class BevFeatureMap:
    """A [C, H, W] tensor tied to its grid."""

    tensor: Tensor
    grid: GridConfig

    def __post_init__(self) -> None:
        if self.tensor.shape != self.grid.shape:
            raise ValidationError(f"feature map shape {self.tensor.shape} does not match grid {self.grid.shape}")

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values


@dataclass(frozen=True, eq=False)
class PillarBatch:
    """
    Non-empty pillars of one scan.

    Attributes:
        features: [P, N, 9] per-point features, zero rows past each pillar's count
        mask: [P, N] true for real points
        rows / cols: [P] grid cell of each pillar, ascending by row-major index
    """

    features: np.ndarray
    mask: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    grid: GridConfig

    @property
    def n_pillars(self) -> int:
        return int(self.rows.shape[0])


def cell_of(x: np.ndarray, y: np.ndarray, grid: GridConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Row (x) and column (y) cell indices."""
    rows = np.floor((np.asarray(x) - grid.x_range[0]) / grid.cell_h).astype(np.int64)
    cols = np.floor((np.asarray(y) - grid.y_range[0]) / grid.cell_w).astype(np.int64)
    return rows, cols


def voxelize(scan: RadarScan, grid: GridConfig, seed: int = 0) -> PillarBatch:
    """
    Group in-range points into pillars and build the 9-dim point features
    (x, y, z, rcs, v_d, offsets to the pillar centroid, x offset to the cell center).

    Over-full pillars keep a seeded random subset of max_points_per_pillar points,
    drawn from the canonically sorted points so input order never matters.
    """
    n_max = grid.max_points_per_pillar
    points = scan.points
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    keep = (
        (x >= grid.x_range[0]) & (x < grid.x_range[1])
        & (y >= grid.y_range[0]) & (y < grid.y_range[1])
        & (z >= grid.z_range[0]) & (z <= grid.z_range[1])
    )
    points = points[keep]
    if points.shape[0] == 0:
        return PillarBatch(
            np.zeros((0, n_max, POINT_FEATURES)),
            np.zeros((0, n_max), dtype=bool),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
            grid,
        )

    canonical = np.lexsort(points.T[::-1])
    points = points[canonical]
    rows, cols = cell_of(points[:, 0], points[:, 1], grid)
    rows = np.clip(rows, 0, grid.height - 1)
    cols = np.clip(cols, 0, grid.width - 1)
    cells = rows * grid.width + cols
    order = np.argsort(cells, kind="stable")
    points, cells = points[order], cells[order]
    unique_cells, starts, counts = np.unique(cells, return_index=True, return_counts=True)

    n_pillars = unique_cells.shape[0]
    features = np.zeros((n_pillars, n_max, POINT_FEATURES))
    mask = np.zeros((n_pillars, n_max), dtype=bool)
    pillar_rows = unique_cells // grid.width
    pillar_cols = unique_cells % grid.width
    for p in range(n_pillars):
        members = points[starts[p]:starts[p] + counts[p]]
        if counts[p] > n_max:
            rng = np.random.default_rng([seed, int(unique_cells[p])])
            members = members[np.sort(rng.choice(counts[p], size=n_max, replace=False))]
        centroid = members[:, :3].mean(axis=0)
        center_x = grid.x_range[0] + (pillar_rows[p] + 0.5) * grid.cell_h
        m = members.shape[0]
        features[p, :m, 0:3] = members[:, 0:3]
        features[p, :m, 3] = members[:, 4]
        features[p, :m, 4] = members[:, 3]
        features[p, :m, 5:8] = members[:, 0:3] - centroid
        features[p, :m, 8] = members[:, 0] - center_x
        mask[p, :m] = True
    return PillarBatch(features, mask, pillar_rows, pillar_cols, grid)


def init_pillar_params(store: ParameterStore, grid: GridConfig, rng: np.random.Generator, prefix: str = "pfn.") -> None:
    channels = grid.channels
    store.add(prefix + "weight", glorot_uniform(rng, (channels, POINT_FEATURES), POINT_FEATURES, channels))
    store.add(prefix + "bias", np.zeros(channels))
    store.add(prefix + "norm.gain", np.ones(channels))
    store.add(prefix + "norm.bias", np.zeros(channels))


def pillar_feature_net(pillars: PillarBatch, params: ParameterStore, prefix: str = "pfn.") -> BevFeatureMap:
    """
    Per-point linear + layer norm + relu, max over each pillar's points,
    scattered into a dense [C, H, W] map with empty cells at zero.
    """
    grid = pillars.grid
    weight = params[prefix + "weight"]
    if weight.shape != (grid.channels, POINT_FEATURES):
        raise ValidationError(f"pillar weight {weight.shape} does not match {grid.channels} channels")
    if pillars.n_pillars == 0:
        return BevFeatureMap(Tensor(np.zeros(grid.shape)), grid)
    hidden = linear(Tensor(pillars.features), weight, params[prefix + "bias"])
    hidden = layer_norm(hidden, -1, params[prefix + "norm.gain"], params[prefix + "norm.bias"])
    pooled = masked_max(relu(hidden), pillars.mask)
    dense = scatter_cells(pooled, pillars.rows, pillars.cols, grid.height, grid.width)
    return BevFeatureMap(dense, grid)


def encode_scan(scan: RadarScan, params: ParameterStore, grid: GridConfig, seed: int = 0) -> BevFeatureMap:
    return pillar_feature_net(voxelize(scan, grid, seed), params)
