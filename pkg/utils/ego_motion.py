"""
Doppler ego-velocity estimation and dynamic point segmentation.

A static return at unit direction p_i observed from a sensor moving with
velocity v has radial velocity v_d,i = -p_i . v. Stacking the static returns
gives an overdetermined linear system, solved here through its normal
equations. RANSAC over 3-point minimal sets separates static returns (inliers)
from moving objects and multipath ghosts (outliers).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg

from config import (
    RANSAC_CONDITION_LIMIT,
    RANSAC_INLIER_THRESHOLD,
    RANSAC_MAX_ITERATIONS,
    RANSAC_MIN_INLIER_FRACTION,
    SEED,
)
from utils.errors import (
    DegenerateGeometryError,
    EstimationFailedError,
    InsufficientPointsError,
    ValidationError,
)
from utils.radar_io import RadarPoint, RadarScan

logger = logging.getLogger(__name__)

MIN_SAMPLE = 3
MAX_REFITS = 20

PointsLike = Union[RadarScan, np.ndarray, Sequence[RadarPoint]]


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = RANSAC_MAX_ITERATIONS
    inlier_threshold: float = RANSAC_INLIER_THRESHOLD  # m/s
    min_inlier_fraction: float = RANSAC_MIN_INLIER_FRACTION
    seed: int = SEED

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if not self.inlier_threshold > 0:
            raise ValidationError("inlier_threshold must be positive")
        if not 0.0 <= self.min_inlier_fraction <= 1.0:
            raise ValidationError("min_inlier_fraction must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class EgoEstimate:
    """
    Attributes:
        velocity: Sensor-frame ego-velocity, m/s
        inlier_mask: True for points judged static
        n_iterations_used: RANSAC hypotheses evaluated (0 for a fallback)
        mean_inlier_residual: Mean |predicted - observed| v_d over inliers, m/s
        fallback: True when the estimate was substituted after a failure
    """

    velocity: np.ndarray
    inlier_mask: np.ndarray = field(repr=False)
    n_iterations_used: int = 0
    mean_inlier_residual: float = 0.0
    fallback: bool = False

    def __post_init__(self) -> None:
        velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(velocity)):
            raise ValidationError("ego-velocity must be finite")
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "inlier_mask", np.asarray(self.inlier_mask, dtype=bool).reshape(-1))

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def _rows(points: PointsLike) -> np.ndarray:
    if isinstance(points, RadarScan):
        return points.points
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 5)
    return np.array([[p.x, p.y, p.z, p.radial_velocity, p.rcs] for p in points], dtype=np.float64).reshape(-1, 5)


def _directions(rows: np.ndarray) -> np.ndarray:
    positions = rows[:, :3]
    return positions / np.linalg.norm(positions, axis=1, keepdims=True)


def _solve(directions: np.ndarray, radial: np.ndarray) -> np.ndarray:
    if directions.shape[0] < MIN_SAMPLE:
        raise InsufficientPointsError(f"need at least {MIN_SAMPLE} points, got {directions.shape[0]}")
    normal = directions.T @ directions
    singular = np.linalg.svd(normal, compute_uv=False)
    condition = singular[0] / singular[-1] if singular[-1] > 0 else math.inf
    if not math.isfinite(condition) or condition >= RANSAC_CONDITION_LIMIT:
        raise DegenerateGeometryError(f"direction matrix is rank deficient (condition {condition:.3g})")
    try:
        # symmetric indefinite factorization with pivoting (LAPACK sysv)
        solution = scipy.linalg.solve(normal, directions.T @ radial, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise DegenerateGeometryError(f"direction matrix is singular: {e}") from e
    return -solution


def solve_ego_velocity(points: PointsLike) -> np.ndarray:
    """
    Least-squares ego-velocity from static returns.

    Args:
        points: RadarScan, [n, 5] rows or RadarPoints, all assumed static

    Returns:
        3-vector velocity in m/s

    Raises:
        InsufficientPointsError: Fewer than 3 points
        DegenerateGeometryError: Directions do not span 3-D space
    """
    rows = _rows(points)
    if rows.shape[0] < MIN_SAMPLE:
        raise InsufficientPointsError(f"need at least {MIN_SAMPLE} points, got {rows.shape[0]}")
    return _solve(_directions(rows), rows[:, 3])


def _residuals(directions: np.ndarray, radial: np.ndarray, velocity: np.ndarray) -> np.ndarray:
    return np.abs(directions @ (-velocity) - radial)


def ransac_ego_velocity(scan: RadarScan, config: Optional[RansacConfig] = None) -> EgoEstimate:
    """
    Robust ego-velocity treating dynamic points as outliers.

    Hypotheses come from random 3-point subsets; the largest consensus set wins,
    ties going to the lower mean residual. The winner is refit on its inliers
    until the inlier set is stable.

    Raises:
        InsufficientPointsError: Fewer than 3 points
        EstimationFailedError: Consensus below max(3, min_inlier_fraction * n)
    """
    config = config or RansacConfig()
    rows = _rows(scan)
    n = rows.shape[0]
    if n < MIN_SAMPLE:
        raise InsufficientPointsError(f"need at least {MIN_SAMPLE} points, got {n}")
    directions = _directions(rows)
    radial = rows[:, 3]
    rng = np.random.default_rng(config.seed)
    required = max(MIN_SAMPLE, int(math.ceil(config.min_inlier_fraction * n)))

    best_velocity: Optional[np.ndarray] = None
    best_count = -1
    best_residual = math.inf
    iterations = 0
    for _ in range(config.max_iterations):
        iterations += 1
        sample = rng.choice(n, size=MIN_SAMPLE, replace=False)
        try:
            velocity = _solve(directions[sample], radial[sample])
        except DegenerateGeometryError:
            continue
        residuals = _residuals(directions, radial, velocity)
        inliers = residuals <= config.inlier_threshold
        count = int(inliers.sum())
        mean_residual = float(residuals[inliers].mean()) if count else math.inf
        if count > best_count or (count == best_count and mean_residual < best_residual):
            best_velocity, best_count, best_residual = velocity, count, mean_residual
        if best_count == n:
            break

    if best_velocity is None or best_count < required:
        raise EstimationFailedError(
            f"consensus {max(best_count, 0)} of {n} points is below the required {required}"
        )

    velocity = best_velocity
    mask = _residuals(directions, radial, velocity) <= config.inlier_threshold
    for _ in range(MAX_REFITS):
        if mask.sum() < MIN_SAMPLE:
            break
        try:
            refit = _solve(directions[mask], radial[mask])
        except DegenerateGeometryError:
            break
        refit_mask = _residuals(directions, radial, refit) <= config.inlier_threshold
        if refit_mask.sum() < required:
            break
        velocity = refit
        if np.array_equal(refit_mask, mask):
            break
        mask = refit_mask

    residuals = _residuals(directions, radial, velocity)
    mask = residuals <= config.inlier_threshold
    return EgoEstimate(
        velocity=velocity,
        inlier_mask=mask,
        n_iterations_used=iterations,
        mean_inlier_residual=float(residuals[mask].mean()) if mask.any() else 0.0,
    )


def estimate_with_fallback(
    scan: RadarScan,
    config: Optional[RansacConfig] = None,
    previous: Optional[np.ndarray] = None,
) -> EgoEstimate:
    """
    RANSAC estimate that never fails: on too few points or no consensus the
    previous frame's velocity (zero for the first frame) is used and every point is kept.
    """
    try:
        return ransac_ego_velocity(scan, config)
    except (InsufficientPointsError, EstimationFailedError) as e:
        logger.warning("Ego-velocity estimation failed at t=%.3f: %s; using fallback", scan.timestamp, e)
        velocity = np.zeros(3) if previous is None else np.asarray(previous, dtype=np.float64)
        return EgoEstimate(velocity, np.ones(len(scan), dtype=bool), 0, 0.0, fallback=True)


def remove_dynamic(scan: RadarScan, mask: np.ndarray) -> RadarScan:
    """Keep mask-true (static) points in their original order."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != len(scan):
        raise ValidationError(f"mask has {mask.shape[0]} entries for {len(scan)} points")
    return scan.select(mask)
