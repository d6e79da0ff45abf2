import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from utils.radar_io import Pose  # noqa: E402
from utils.storage import DescriptorDatabase, entry_for, save_database  # noqa: E402


@pytest.fixture
def database_file(tmp_path):
    """Four one-hot descriptors at places 30 m apart, saved as a database."""
    entries = [entry_for("traversal_0", i, Pose(30.0 * i, 0.0)) for i in range(4)]
    path = str(tmp_path / "databases" / "places.rsdb")
    save_database(DescriptorDatabase(np.eye(4, 256), entries), path)
    return path


@pytest.fixture
def artifact_folder(tmp_path):
    root = tmp_path / "artifacts"
    (root / "plots").mkdir(parents=True)
    (root / "plots" / "loss.svg").write_text("<svg></svg>", encoding="utf-8")
    return str(root)
