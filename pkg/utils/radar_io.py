"""
Radar domain types and scan/sequence file I/O.

Scan files are UTF-8 CSV with the header `x,y,z,v_d,rcs`. Sequence manifests are
JSON documents listing frames with timestamps, relative scan paths and optional
ground-truth poses.
"""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import DESCRIPTOR_DIM
from utils.errors import FormatError, ParseError, ValidationError

logger = logging.getLogger(__name__)

SCAN_HEADER = ["x", "y", "z", "v_d", "rcs"]
POINT_FIELDS = len(SCAN_HEADER)


def wrap_yaw(yaw: float) -> float:
    """Map an angle into (-pi, pi]."""
    wrapped = math.atan2(math.sin(yaw), math.cos(yaw))
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class RadarPoint:
    """One radar return: sensor-frame position (m), radial velocity (m/s, + = receding), RCS (dBsm)."""

    x: float
    y: float
    z: float
    radial_velocity: float
    rcs: float

    def __post_init__(self) -> None:
        _validate_rows(np.array([[self.x, self.y, self.z, self.radial_velocity, self.rcs]], dtype=np.float64))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def _validate_rows(rows: np.ndarray, first_line: Optional[int] = None) -> None:
    if rows.size == 0:
        return
    finite = np.isfinite(rows).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        where = f" (line {first_line + bad})" if first_line is not None else f" (point {bad})"
        raise ValidationError(f"non-finite value in radar point{where}")
    norms = np.linalg.norm(rows[:, :3], axis=1)
    if np.any(norms <= 0.0):
        bad = int(np.argmin(norms > 0.0))
        where = f" (line {first_line + bad})" if first_line is not None else f" (point {bad})"
        raise ValidationError(f"radar point at the sensor origin{where}")


@dataclass(frozen=True, eq=False)
class RadarScan:
    """
    One frame of radar returns.

    Attributes:
        points: Read-only [n, 5] array of (x, y, z, v_d, rcs)
        timestamp: Seconds, monotonic within a sequence
    """

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        array = np.array(self.points, dtype=np.float64).reshape(-1, POINT_FIELDS)
        _validate_rows(array)
        if not math.isfinite(self.timestamp):
            raise ValidationError("scan timestamp must be finite")
        array.setflags(write=False)
        object.__setattr__(self, "points", array)

    @classmethod
    def from_points(cls, points: Sequence[RadarPoint], timestamp: float = 0.0) -> "RadarScan":
        rows = [[p.x, p.y, p.z, p.radial_velocity, p.rcs] for p in points]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, POINT_FIELDS), timestamp)

    @classmethod
    def empty(cls, timestamp: float = 0.0) -> "RadarScan":
        return cls(np.zeros((0, POINT_FIELDS)), timestamp)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __iter__(self) -> Iterator[RadarPoint]:
        for row in self.points:
            yield RadarPoint(*(float(v) for v in row))

    def point(self, index: int) -> RadarPoint:
        return RadarPoint(*(float(v) for v in self.points[index]))

    @property
    def positions(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def radial_velocities(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def rcs(self) -> np.ndarray:
        return self.points[:, 4]

    def select(self, mask: np.ndarray) -> "RadarScan":
        return RadarScan(self.points[np.asarray(mask, dtype=bool)], self.timestamp)

    def with_timestamp(self, timestamp: float) -> "RadarScan":
        return RadarScan(self.points, timestamp)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RadarScan):
            return NotImplemented
        return self.timestamp == other.timestamp and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class Pose:
    """Planar ground-truth pose: translation (m) and yaw (rad, wrapped into (-pi, pi])."""

    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z, self.yaw)):
            raise ValidationError("pose values must be finite")
        object.__setattr__(self, "yaw", wrap_yaw(self.yaw))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def planar_distance(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def to_dict(self) -> Dict[str, float]:
        return {"x": self.x, "y": self.y, "z": self.z, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Pose":
        try:
            return cls(float(data["x"]), float(data["y"]), float(data.get("z", 0.0)), float(data.get("yaw", 0.0)))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"invalid pose {data!r}: {e}") from e


@dataclass(frozen=True)
class Frame:
    scan: RadarScan
    pose: Optional[Pose] = None


@dataclass(frozen=True)
class ScanSequence:
    """Ordered frames with strictly increasing timestamps."""

    frames: Tuple[Frame, ...]
    frame_rate: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frame_rate > 0:
            raise ValidationError(f"frame_rate must be positive, got {self.frame_rate}")
        stamps = [f.scan.timestamp for f in self.frames]
        for index in range(1, len(stamps)):
            if not stamps[index] > stamps[index - 1]:
                raise ValidationError(
                    f"timestamps must strictly increase: frame {index} has t={stamps[index]} "
                    f"after t={stamps[index - 1]}"
                )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def scans(self) -> List[RadarScan]:
        return [f.scan for f in self.frames]

    @property
    def poses(self) -> List[Optional[Pose]]:
        return [f.pose for f in self.frames]


@dataclass(frozen=True, eq=False)
class Descriptor:
    """Global place descriptor (256 floats)."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        array = np.array(self.values, dtype=np.float64).reshape(-1)
        if array.shape[0] != DESCRIPTOR_DIM:
            raise ValidationError(f"descriptor must have {DESCRIPTOR_DIM} values, got {array.shape[0]}")
        if not np.all(np.isfinite(array)):
            raise ValidationError("descriptor contains non-finite values")
        array.setflags(write=False)
        object.__setattr__(self, "values", array)

    def distance(self, other: "Descriptor") -> float:
        return float(np.linalg.norm(self.values - other.values))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Descriptor):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def read_scan(path: str, timestamp: float = 0.0) -> RadarScan:
    """
    Read a scan CSV.

    Args:
        path: CSV file with header x,y,z,v_d,rcs
        timestamp: Timestamp assigned to the scan

    Returns:
        RadarScan with one point per data row, order preserved

    Raises:
        ParseError: Wrong header, wrong arity or non-numeric field (names the line)
        ValidationError: Non-finite value or a point at the origin
    """
    rows: List[List[float]] = []
    first_data_line = 2
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SCAN_HEADER:
            raise ParseError(f"expected header {','.join(SCAN_HEADER)} in {path}", line=1)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != POINT_FIELDS:
                raise ParseError(f"expected {POINT_FIELDS} fields, got {len(row)}", line=line)
            try:
                values = [float(field_text) for field_text in row]
            except ValueError as e:
                raise ParseError(f"not a number: {e}", line=line) from e
            if not all(math.isfinite(v) for v in values):
                raise ValidationError(f"line {line}: non-finite value in {path}")
            rows.append(values)
    array = np.array(rows, dtype=np.float64).reshape(-1, POINT_FIELDS)
    _validate_rows(array, first_line=first_data_line)
    return RadarScan(array, timestamp)


def write_scan(scan: RadarScan, path: str) -> None:
    """Write a scan CSV with 17 significant digits and LF line endings."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SCAN_HEADER)
        for row in scan.points:
            writer.writerow([format(float(v), ".17g") for v in row])


def load_sequence(manifest_path: str) -> ScanSequence:
    """
    Load a sequence manifest and the scans it references.

    Raises:
        FileNotFoundError: A referenced scan file is missing (message names the path)
        FormatError/ValidationError: Bad manifest or non-monotonic timestamps
    """
    with open(manifest_path, "r", encoding="utf-8") as handle:
        try:
            manifest = json.load(handle)
        except json.JSONDecodeError as e:
            raise FormatError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or "frames" not in manifest or "frame_rate_hz" not in manifest:
        raise FormatError(f"manifest {manifest_path} needs 'frame_rate_hz' and 'frames'")

    base = os.path.dirname(os.path.abspath(manifest_path))
    frames: List[Frame] = []
    previous_t: Optional[float] = None
    if not isinstance(manifest["frames"], list):
        raise FormatError(f"manifest {manifest_path}: 'frames' must be a list")
    try:
        frame_rate = float(manifest["frame_rate_hz"])
    except (TypeError, ValueError) as e:
        raise FormatError(f"manifest {manifest_path}: bad frame_rate_hz: {e}") from e

    for index, entry in enumerate(manifest["frames"]):
        try:
            t = float(entry["t"])
            scan_name = str(entry["scan"])
            pose_data = entry.get("pose")
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise FormatError(f"frame {index} of {manifest_path} is malformed: missing or bad {e}") from e
        if previous_t is not None and not t > previous_t:
            raise ValidationError(
                f"frame {index} of {manifest_path} has t={t}, not after t={previous_t}"
            )
        previous_t = t
        scan_path = os.path.join(base, scan_name)
        if not os.path.exists(scan_path):
            raise FileNotFoundError(f"scan file not found: {scan_path}")
        pose = Pose.from_dict(pose_data) if pose_data else None
        frames.append(Frame(read_scan(scan_path, timestamp=t), pose))
    return ScanSequence(tuple(frames), frame_rate)


def save_sequence(sequence: ScanSequence, directory: str, scan_folder: str = "scans") -> str:
    """
    Write a sequence directory: manifest.json plus one CSV per frame.

    Returns:
        Path of the written manifest
    """
    os.makedirs(os.path.join(directory, scan_folder), exist_ok=True)
    entries = []
    for index, frame in enumerate(sequence.frames):
        relative = f"{scan_folder}/frame_{index:06d}.csv"
        write_scan(frame.scan, os.path.join(directory, relative))
        entries.append({
            "t": frame.scan.timestamp,
            "scan": relative,
            "pose": frame.pose.to_dict() if frame.pose else None,
        })
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as handle:
        json.dump({"frame_rate_hz": sequence.frame_rate, "frames": entries}, handle, indent=2)
    logger.info("Wrote %d frames to %s", len(entries), directory)
    return manifest_path
