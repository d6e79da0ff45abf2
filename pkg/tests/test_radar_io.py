import json
import math

import numpy as np
import pytest

from utils.errors import FormatError, ParseError, ValidationError
from utils.radar_io import (
    Descriptor,
    Frame,
    Pose,
    RadarPoint,
    RadarScan,
    ScanSequence,
    load_sequence,
    read_scan,
    save_sequence,
    wrap_yaw,
    write_scan,
)


def _scan(t=0.0):
    return RadarScan(np.array([[1.0, 2.0, 0.5, -0.25, 10.0], [0.1, -3.3, 1.0 / 3.0, 2.0, -5.0]]), t)


def test_point_at_origin_is_rejected():
    with pytest.raises(ValidationError):
        RadarPoint(0.0, 0.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValidationError):
        RadarScan(np.array([[1.0, 0.0, 0.0, np.inf, 0.0]]))


def test_scan_is_read_only():
    scan = _scan()
    with pytest.raises(ValueError):
        scan.points[0, 0] = 5.0


def test_scan_csv_round_trip_is_exact(tmp_path):
    scan = _scan(1.5)
    path = tmp_path / "scan.csv"
    write_scan(scan, str(path))
    assert path.read_text(encoding="utf-8").startswith("x,y,z,v_d,rcs\n")
    assert read_scan(str(path), timestamp=1.5) == scan


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x,y,z,v_d,rcs\n1,2,abc,0,0\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        read_scan(str(path))
    assert excinfo.value.line == 2
    assert "line 2" in str(excinfo.value)


def test_wrong_header_and_arity(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_scan(str(path))
    path.write_text("x,y,z,v_d,rcs\n1,2,3\n", encoding="utf-8")
    with pytest.raises(ParseError):
        read_scan(str(path))


def test_header_only_gives_empty_scan(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("x,y,z,v_d,rcs\n", encoding="utf-8")
    assert len(read_scan(str(path))) == 0


def test_sequence_requires_increasing_timestamps():
    with pytest.raises(ValidationError):
        ScanSequence((Frame(_scan(0.1)), Frame(_scan(0.1))), 10.0)


def test_sequence_round_trip_keeps_order_and_poses(tmp_path):
    frames = tuple(Frame(_scan(0.1 * i), Pose(float(i), 0.5, 0.0, 0.1 * i)) for i in range(3))
    sequence = ScanSequence(frames, 10.0)
    manifest = save_sequence(sequence, str(tmp_path / "seq"))
    loaded = load_sequence(manifest)
    assert loaded.frame_rate == 10.0
    assert [s.timestamp for s in loaded.scans] == [0.0, 0.1, 0.2]
    assert loaded.poses == sequence.poses
    assert loaded.scans == sequence.scans


def test_missing_scan_file_is_named(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"frame_rate_hz": 10, "frames": [{"t": 0.0, "scan": "gone.csv"}]}))
    with pytest.raises(FileNotFoundError, match="gone.csv"):
        load_sequence(str(manifest))


def test_malformed_manifest(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text("{not json")
    with pytest.raises(FormatError):
        load_sequence(str(manifest))
    manifest.write_text(json.dumps({"frames": []}))
    with pytest.raises(FormatError):
        load_sequence(str(manifest))


@pytest.mark.parametrize("frame", [
    {"scan": "a.csv", "pose": None},
    {"t": 0.0},
    {"t": "soon", "scan": "a.csv"},
    "a.csv",
])
def test_malformed_frame_entry(tmp_path, frame):
    write_scan(_scan(), str(tmp_path / "a.csv"))
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"frame_rate_hz": 10, "frames": [frame]}))
    with pytest.raises(FormatError, match="frame 0"):
        load_sequence(str(manifest))


def test_yaw_wraps_into_half_open_interval():
    assert wrap_yaw(-math.pi) == pytest.approx(math.pi)
    assert Pose(0.0, 0.0, yaw=3 * math.pi).yaw == pytest.approx(math.pi)
    assert Pose(0.0, 0.0).planar_distance(Pose(3.0, 4.0)) == pytest.approx(5.0)


def test_descriptor_dimension_and_distance():
    with pytest.raises(ValidationError):
        Descriptor(np.zeros(10))
    a = Descriptor(np.zeros(256))
    b = Descriptor(np.full(256, 0.5))
    assert a.distance(b) == pytest.approx(8.0)
