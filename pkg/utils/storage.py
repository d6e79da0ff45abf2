"""
Descriptor database files and local artifact storage.

Database layout (little-endian):
    b"RSDB" | u32 count | u32 dim | count x dim float32 rows
with a JSON sidecar at `<path>.json` listing one entry per row:
    {"sequence_id": str, "frame_index": int, "pose": {"x", "y", "z", "yaw"} | null}
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from flask import send_file
from werkzeug.utils import secure_filename

from config import ARTIFACT_FOLDER, DESCRIPTOR_DIM
from utils.errors import FormatError, ValidationError
from utils.radar_io import Pose

logger = logging.getLogger(__name__)

DB_MAGIC = b"RSDB"
SIDECAR_SUFFIX = ".json"

ARTIFACT_KINDS = {
    "plots": "image/svg+xml",
    "images": "image/png",
    "databases": "application/octet-stream",
    "tables": "text/csv",
    "checkpoints": "application/octet-stream",
}


@dataclass(frozen=True, eq=False)
class DescriptorDatabase:
    """
    Attributes:
        descriptors: [count, dim] float32 rows
        entries: One metadata dict per row (sequence_id, frame_index, pose)
    """

    descriptors: np.ndarray
    entries: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        array = np.asarray(self.descriptors, dtype=np.float32)
        if array.ndim != 2:
            array = array.reshape(-1, DESCRIPTOR_DIM)
        if len(self.entries) != array.shape[0]:
            raise ValidationError(f"{array.shape[0]} descriptors but {len(self.entries)} entries")
        object.__setattr__(self, "descriptors", array)
        object.__setattr__(self, "entries", list(self.entries))

    def __len__(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])

    def poses(self) -> List[Optional[Pose]]:
        return [Pose.from_dict(e["pose"]) if e.get("pose") else None for e in self.entries]

    def planar_positions(self) -> np.ndarray:
        """[count, 2] (x, y); rows without a pose are NaN."""
        positions = np.full((len(self), 2), np.nan)
        for index, entry in enumerate(self.entries):
            pose = entry.get("pose")
            if pose:
                positions[index] = (float(pose["x"]), float(pose["y"]))
        return positions

    def nearest(self, descriptor: np.ndarray, top_n: int) -> List[Dict[str, Any]]:
        """Rows sorted by Euclidean distance to `descriptor`, lowest index first on ties."""
        query = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if query.shape[0] != self.dim:
            raise ValidationError(f"query has {query.shape[0]} values, database rows have {self.dim}")
        if len(self) == 0:
            return []
        distances = np.linalg.norm(self.descriptors.astype(np.float64) - query, axis=1)
        order = np.argsort(distances, kind="stable")[:max(top_n, 0)]
        return [
            {"index": int(i), "distance": float(distances[i]), **self.entries[i]}
            for i in order
        ]


def entry_for(sequence_id: str, frame_index: int, pose: Optional[Pose]) -> Dict[str, Any]:
    return {"sequence_id": sequence_id, "frame_index": int(frame_index), "pose": pose.to_dict() if pose else None}


def save_database(database: DescriptorDatabase, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(DB_MAGIC)
        handle.write(struct.pack("<II", len(database), database.dim))
        handle.write(np.ascontiguousarray(database.descriptors, dtype="<f4").tobytes())
    with open(path + SIDECAR_SUFFIX, "w", encoding="utf-8") as handle:
        json.dump({"entries": database.entries}, handle, indent=1)
    logger.info("Saved descriptor database with %d rows to %s", len(database), path)


def load_database(path: str) -> DescriptorDatabase:
    """
    Raises:
        FileNotFoundError: Database or sidecar missing
        FormatError: Bad magic, size mismatch or corrupt sidecar
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 12 or blob[:4] != DB_MAGIC:
        raise FormatError(f"{path} is not a descriptor database")
    count, dim = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + count * dim * 4:
        raise FormatError(f"{path} is truncated: expected {count}x{dim} float32 rows")
    rows = np.frombuffer(blob[12:], dtype="<f4").astype(np.float32).reshape(count, dim)

    sidecar = path + SIDECAR_SUFFIX
    if not os.path.exists(sidecar):
        raise FileNotFoundError(f"database sidecar not found: {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as e:
            raise FormatError(f"sidecar {sidecar} is not valid JSON: {e}") from e
    entries = data.get("entries", []) if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise FormatError(f"sidecar {sidecar} needs an 'entries' list")
    if len(entries) != count:
        raise FormatError(f"sidecar lists {len(entries)} rows, database has {count}")
    for row, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise FormatError(f"sidecar {sidecar}: row {row} is not an object")
        if entry.get("pose"):
            try:
                Pose.from_dict(entry["pose"])
            except ValidationError as e:
                raise FormatError(f"sidecar {sidecar}: row {row}: {e}") from e
    return DescriptorDatabase(rows, entries)


def merge_databases(databases: Sequence[DescriptorDatabase]) -> DescriptorDatabase:
    """Concatenate databases of several sequences into one mixed database."""
    if not databases:
        raise ValidationError("nothing to merge")
    dims = {db.dim for db in databases if len(db)}
    if len(dims) > 1:
        raise ValidationError(f"cannot merge databases of dimensions {sorted(dims)}")
    rows = np.concatenate([db.descriptors.reshape(-1, databases[0].dim) for db in databases], axis=0)
    entries = [entry for db in databases for entry in db.entries]
    return DescriptorDatabase(rows, entries)


class StorageService:
    """Artifacts (plots, images, databases, tables, checkpoints) under ARTIFACT_FOLDER."""

    @staticmethod
    def artifact_path(kind: str, filename: str, root: Optional[str] = None) -> str:
        if kind not in ARTIFACT_KINDS:
            raise ValidationError(f"unknown artifact kind: {kind}")
        safe_name = secure_filename(filename)
        if not safe_name:
            raise ValidationError("invalid artifact filename")
        return os.path.join(root or ARTIFACT_FOLDER, kind, safe_name)

    @staticmethod
    def list_artifacts(kind: str, root: Optional[str] = None) -> List[str]:
        folder = os.path.dirname(StorageService.artifact_path(kind, "placeholder", root))
        if not os.path.isdir(folder):
            return []
        return sorted(name for name in os.listdir(folder) if os.path.isfile(os.path.join(folder, name)))

    @staticmethod
    def download_artifact(kind: str, filename: str, root: Optional[str] = None):
        """
        Flask response streaming one artifact.

        Raises:
            FileNotFoundError: No such artifact
        """
        full_path = os.path.abspath(StorageService.artifact_path(kind, filename, root))
        if not os.path.exists(full_path):
            raise FileNotFoundError(f"Artifact not found: {kind}/{filename}")
        return send_file(
            full_path,
            as_attachment=True,
            download_name=os.path.basename(full_path),
            mimetype=ARTIFACT_KINDS[kind],
        )
