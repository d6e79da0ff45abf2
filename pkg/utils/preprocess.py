"""
Per-frame ego-velocity estimation, dynamic point removal and windowing.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import WINDOW_K
from utils.ablation import AblationFlags
from utils.ego_motion import EgoEstimate, RansacConfig, estimate_with_fallback, remove_dynamic
from utils.errors import ValidationError
from utils.radar_io import Frame, Pose, RadarScan, ScanSequence, save_sequence

logger = logging.getLogger(__name__)

EGO_FILENAME = "ego.json"


@dataclass(frozen=True, eq=False)
class Window:
    """
    The latest K refined scans ending at an anchor frame, oldest first.

    Attributes:
        scans: K scans, the last one is the anchor (current) frame
        velocities: [K, 3] estimated ego-velocity per scan
        anchor: Frame index of the last scan within its sequence
        pose: Ground-truth pose of the anchor frame, when known
        sequence_id: Name of the source sequence
    """

    scans: Tuple[RadarScan, ...]
    velocities: np.ndarray = field(repr=False)
    anchor: int = 0
    pose: Optional[Pose] = None
    sequence_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "scans", tuple(self.scans))
        velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if velocities.shape[0] != len(self.scans):
            raise ValidationError("need one velocity per scan in a window")
        object.__setattr__(self, "velocities", velocities)

    @property
    def size(self) -> int:
        return len(self.scans)


def refine_frames(
    scans: Sequence[RadarScan],
    ransac: Optional[RansacConfig] = None,
    flags: AblationFlags = AblationFlags(),
) -> Tuple[List[RadarScan], List[EgoEstimate]]:
    """
    Estimate ego-velocity for every scan and, with the dpr flag, drop dynamic points.

    Estimation failures fall back to the previous frame's velocity.
    """
    refined: List[RadarScan] = []
    estimates: List[EgoEstimate] = []
    previous: Optional[np.ndarray] = None
    for scan in scans:
        estimate = estimate_with_fallback(scan, ransac, previous)
        previous = estimate.velocity
        estimates.append(estimate)
        refined.append(remove_dynamic(scan, estimate.inlier_mask) if flags.dpr else scan)
    return refined, estimates


def make_windows(
    scans: Sequence[RadarScan],
    velocities: Sequence[np.ndarray],
    window: int,
    poses: Optional[Sequence[Optional[Pose]]] = None,
    sequence_id: str = "",
) -> List[Window]:
    """Sliding windows of the latest `window` frames, one per anchor frame window-1 .. n-1."""
    if window < 1:
        raise ValidationError("window length must be at least 1")
    if len(scans) < window:
        raise ValidationError(f"sequence of {len(scans)} frames is shorter than the window {window}")
    stacked = np.asarray(velocities, dtype=np.float64).reshape(-1, 3)
    result = []
    for anchor in range(window - 1, len(scans)):
        start = anchor - window + 1
        result.append(Window(
            scans=tuple(scans[start:anchor + 1]),
            velocities=stacked[start:anchor + 1],
            anchor=anchor,
            pose=poses[anchor] if poses is not None else None,
            sequence_id=sequence_id,
        ))
    return result


def preprocess_sequence(
    sequence: ScanSequence,
    ransac: Optional[RansacConfig] = None,
    flags: AblationFlags = AblationFlags(),
    window: int = WINDOW_K,
    sequence_id: str = "",
) -> Tuple[List[Window], List[EgoEstimate]]:
    """
    Refine every frame of a sequence and cut it into windows.

    Returns:
        (windows, per-frame ego estimates)

    Raises:
        ValidationError: Sequence shorter than the window
    """
    if len(sequence) < window:
        raise ValidationError(f"sequence of {len(sequence)} frames is shorter than the window {window}")
    refined, estimates = refine_frames(sequence.scans, ransac, flags)
    fallbacks = sum(1 for e in estimates if e.fallback)
    if fallbacks:
        logger.warning("%d of %d frames used the ego-velocity fallback", fallbacks, len(estimates))
    windows = make_windows(refined, [e.velocity for e in estimates], window, sequence.poses, sequence_id)
    return windows, estimates


def save_preprocessed(
    sequence: ScanSequence,
    refined: Sequence[RadarScan],
    estimates: Sequence[EgoEstimate],
    directory: str,
) -> str:
    """Write refined scans as a sequence directory plus ego.json with per-frame estimates."""
    frames = tuple(Frame(scan, pose) for scan, pose in zip(refined, sequence.poses))
    manifest = save_sequence(ScanSequence(frames, sequence.frame_rate), directory)
    records = [
        {
            "velocity": estimate.velocity.tolist(),
            "n_inliers": estimate.n_inliers,
            "n_points": int(estimate.inlier_mask.shape[0]),
            "iterations": estimate.n_iterations_used,
            "mean_residual": estimate.mean_inlier_residual,
            "fallback": estimate.fallback,
        }
        for estimate in estimates
    ]
    with open(os.path.join(directory, EGO_FILENAME), "w", encoding="utf-8") as handle:
        json.dump({"frames": records}, handle, indent=2)
    return manifest
