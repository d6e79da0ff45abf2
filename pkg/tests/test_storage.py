import json
import os

import numpy as np
import pytest

from utils.errors import FormatError, ValidationError
from utils.radar_io import Pose
from utils.storage import (
    DescriptorDatabase,
    StorageService,
    entry_for,
    load_database,
    merge_databases,
    save_database,
)


def _database(count, seed=0, sequence_id="route"):
    rng = np.random.default_rng(seed)
    entries = [entry_for(sequence_id, i, Pose(float(i) * 20.0, 0.0)) for i in range(count)]
    return DescriptorDatabase(rng.normal(size=(count, 256)), entries)


def test_database_round_trip(tmp_path):
    database = _database(5)
    path = str(tmp_path / "db" / "places.rsdb")
    save_database(database, path)
    loaded = load_database(path)
    assert len(loaded) == 5 and loaded.dim == 256
    np.testing.assert_array_equal(loaded.descriptors, database.descriptors)
    assert loaded.descriptors.dtype == np.float32
    assert loaded.entries == database.entries
    assert loaded.poses()[3] == Pose(60.0, 0.0)


def test_nearest_orders_by_distance():
    descriptors = np.zeros((3, 256))
    descriptors[1, 0] = 1.0
    descriptors[2, 0] = 3.0
    database = DescriptorDatabase(descriptors, [entry_for("s", i, None) for i in range(3)])
    query = np.zeros(256)
    query[0] = 2.6
    hits = database.nearest(query, top_n=2)
    assert [h["index"] for h in hits] == [2, 1]
    assert hits[0]["distance"] == pytest.approx(0.4, abs=1e-6)
    assert hits[0]["frame_index"] == 2
    with pytest.raises(ValidationError):
        database.nearest(np.zeros(3), 1)


def test_planar_positions_mark_missing_poses():
    database = DescriptorDatabase(np.zeros((2, 256)), [entry_for("s", 0, Pose(1.0, 2.0)), entry_for("s", 1, None)])
    positions = database.planar_positions()
    np.testing.assert_array_equal(positions[0], [1.0, 2.0])
    assert np.isnan(positions[1]).all()


def test_entries_must_match_rows():
    with pytest.raises(ValidationError):
        DescriptorDatabase(np.zeros((2, 256)), [entry_for("s", 0, None)])


def test_merge_keeps_order():
    merged = merge_databases([_database(2, seed=1, sequence_id="a"), _database(3, seed=2, sequence_id="b")])
    assert len(merged) == 5
    assert [e["sequence_id"] for e in merged.entries] == ["a", "a", "b", "b", "b"]
    with pytest.raises(ValidationError):
        merge_databases([])
    with pytest.raises(ValidationError):
        merge_databases([_database(1), DescriptorDatabase(np.zeros((1, 8)), [entry_for("s", 0, None)])])


def test_truncated_database(tmp_path):
    path = str(tmp_path / "places.rsdb")
    save_database(_database(2), path)
    with open(path, "rb") as handle:
        blob = handle.read()
    with open(path, "wb") as handle:
        handle.write(blob[:-4])
    with pytest.raises(FormatError):
        load_database(path)


def test_missing_sidecar(tmp_path):
    path = str(tmp_path / "places.rsdb")
    save_database(_database(2), path)
    os.remove(path + ".json")
    with pytest.raises(FileNotFoundError):
        load_database(path)


@pytest.mark.parametrize("entries", [
    {"rows": []},
    [["route", 0], ["route", 1]],
    [{"pose": {"y": 0.0}}, {"pose": None}],
])
def test_malformed_sidecar(tmp_path, entries):
    path = str(tmp_path / "places.rsdb")
    save_database(_database(2), path)
    with open(path + ".json", "w", encoding="utf-8") as handle:
        json.dump(entries if isinstance(entries, dict) else {"entries": entries}, handle)
    with pytest.raises(FormatError):
        load_database(path)


def test_not_a_database(tmp_path):
    path = tmp_path / "places.rsdb"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        load_database(str(path))


def test_artifact_paths(tmp_path):
    root = str(tmp_path)
    assert StorageService.artifact_path("plots", "loss.svg", root) == os.path.join(root, "plots", "loss.svg")
    assert StorageService.artifact_path("tables", "../../etc/passwd", root) == os.path.join(root, "tables", "etc_passwd")
    with pytest.raises(ValidationError):
        StorageService.artifact_path("secrets", "x", root)
    assert StorageService.list_artifacts("images", root) == []

    os.makedirs(os.path.join(root, "images"))
    for name in ("b.png", "a.png"):
        open(os.path.join(root, "images", name), "wb").close()
    assert StorageService.list_artifacts("images", root) == ["a.png", "b.png"]
