import numpy as np
import pytest

from utils.errors import ValidationError
from utils.evaluation import build_database, embed_windows, rank_references, recall_at_n, write_recall_csv
from utils.gradcheck import toy_model_config, toy_window
from utils.mining import EvalProtocol
from utils.model import init_model
from utils.preprocess import Window
from utils.radar_io import Pose
from utils.storage import DescriptorDatabase, entry_for, load_database


def _database(descriptors, xs, ys=None):
    ys = np.zeros(len(xs)) if ys is None else ys
    entries = [entry_for("route", i, Pose(float(x), float(y))) for i, (x, y) in enumerate(zip(xs, ys))]
    return DescriptorDatabase(np.asarray(descriptors, dtype=np.float32), entries)


def test_self_match_recall_is_perfect():
    rng = np.random.default_rng(0)
    references = _database(rng.normal(size=(20, 256)), np.arange(20) * 25.0)
    result = recall_at_n(references, references)
    assert result.recall == {1: 1.0, 5: 1.0, 10: 1.0}
    assert result.excluded == 0 and result.total == 20
    assert [row[0] for row in result.retrieved] == list(range(20))


def test_recall_is_monotone_and_bookkept():
    rng = np.random.default_rng(1)
    references = _database(rng.normal(size=(60, 32)), rng.uniform(0, 200, 60), rng.uniform(0, 20, 60))
    queries = _database(rng.normal(size=(40, 32)), rng.uniform(0, 260, 40), rng.uniform(0, 20, 40))
    result = recall_at_n(queries, references)
    assert result.recall[1] <= result.recall[5] <= result.recall[10]
    for n in (1, 5, 10):
        assert result.successes[n] + result.failures(n) + result.excluded == result.total


def test_queries_without_nearby_reference_are_excluded():
    descriptors = np.eye(3, 8)
    references = _database(descriptors, [0.0, 50.0, 100.0])
    queries = _database(descriptors, [1.0, 51.0, 500.0])
    result = recall_at_n(queries, references, EvalProtocol(recall_n=(1,)))
    assert result.excluded == 1
    assert result.evaluated == 2
    assert result.recall == {1: 1.0}


def test_random_descriptors_recall_at_chance_level():
    rng = np.random.default_rng(2)
    places = 50
    references = _database(rng.normal(size=(places, 64)), np.arange(places) * 20.0)
    query_places = rng.integers(0, places, size=2000)
    queries = _database(rng.normal(size=(2000, 64)), query_places * 20.0)
    result = recall_at_n(queries, references)
    assert result.recall[1] == pytest.approx(1 / places, abs=0.015)
    assert result.recall[10] == pytest.approx(10 / places, abs=0.04)

    # brute-force count of correct top-1 retrievals
    distances = np.linalg.norm(queries.descriptors[:, None, :].astype(np.float64) - references.descriptors[None, :, :], axis=2)
    assert result.successes[1] == int(np.sum(np.argmin(distances, axis=1) == query_places))


def test_empty_or_poseless_databases():
    references = _database(np.zeros((1, 8)), [0.0])
    with pytest.raises(ValidationError):
        recall_at_n(DescriptorDatabase(np.zeros((0, 8)), []), references)
    poseless = DescriptorDatabase(np.zeros((1, 8)), [entry_for("route", 0, None)])
    with pytest.raises(ValidationError):
        recall_at_n(poseless, references)


def test_rank_references_is_stable_on_ties():
    references = _database(np.zeros((4, 8)), [0.0, 1.0, 2.0, 3.0])
    ranked = rank_references(references, references, 3)
    assert ranked.tolist() == [[0, 1, 2]] * 4


def test_recall_csv(tmp_path):
    rng = np.random.default_rng(3)
    references = _database(rng.normal(size=(5, 8)), np.arange(5) * 30.0)
    path = tmp_path / "tables" / "recall.csv"
    write_recall_csv(recall_at_n(references, references), str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "n,recall,excluded"
    assert lines[1:] == ["1,1.0,0", "5,1.0,0", "10,1.0,0"]


def test_build_database_from_windows(tmp_path):
    config = toy_model_config()
    params = init_model(config, seed=1)
    rng = np.random.default_rng(4)
    windows = []
    for i in range(4):
        window = toy_window(rng)
        windows.append(Window(window.scans, window.velocities, anchor=i + 2, pose=Pose(i * 30.0, 0.0), sequence_id="toy"))

    path = str(tmp_path / "toy.rsdb")
    database = build_database(windows, params, config, path=path)
    assert len(database) == 4 and database.dim == 256
    assert database.entries[2] == {"sequence_id": "toy", "frame_index": 4, "pose": Pose(60.0, 0.0).to_dict()}
    np.testing.assert_array_equal(build_database(windows, params, config).descriptors, database.descriptors)
    np.testing.assert_array_equal(load_database(path).descriptors, database.descriptors)
    np.testing.assert_allclose(database.descriptors, embed_windows(windows, params, config), rtol=1e-6)
    assert embed_windows([], params, config).shape == (0, 256)
