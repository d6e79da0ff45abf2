from dataclasses import replace

import numpy as np
import pytest

from utils.ablation import AblationFlags
from utils.errors import DivergenceError, ValidationError
from utils.gradcheck import toy_model_config, toy_window
from utils.model import forward, init_model, load_model
from utils.preprocess import Window
from utils.radar_io import Pose
from utils.training import LOSS_COLUMNS, Adam, TrainConfig, TrainingData, train


def _windows(rng, xs, sequence_id):
    windows = []
    for i, x in enumerate(xs):
        window = toy_window(rng)
        windows.append(Window(window.scans, window.velocities, anchor=i, pose=Pose(float(x), 0.0), sequence_id=sequence_id))
    return windows


@pytest.fixture(scope="module")
def toy_data():
    rng = np.random.default_rng(0)
    database = _windows(rng, np.arange(10) * 30.0, "db")
    queries = _windows(rng, [1.0, 31.0, 62.0], "query")
    return TrainingData(database, queries)


def test_train_config_validation():
    assert TrainConfig(learning_rate=1e-3, lr_decay=0.5).learning_rate_at(2) == pytest.approx(2.5e-4)
    assert TrainConfig(gradient_accumulation=True, accumulation_steps=4).samples_per_step == 4
    assert TrainConfig(accumulation_steps=4).samples_per_step == 1
    for bad in ({"learning_rate": 0.0}, {"lr_decay": 1.5}, {"alpha": 0.0}, {"n_negatives": 0}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_one_epoch_writes_one_row_per_step(toy_data, tmp_path):
    loss_csv = tmp_path / "tables" / "loss.csv"
    result = train(toy_data, TrainConfig(epochs=1, n_negatives=3), toy_model_config(),
                   loss_csv=str(loss_csv), checkpoint_dir=str(tmp_path / "checkpoints"))
    assert list(result.losses.columns) == LOSS_COLUMNS
    assert len(result.losses) == 3
    assert result.losses["step"].tolist() == [0, 1, 2]
    assert (result.losses["loss"] >= 0).all()
    assert len(result.epoch_means) == 1

    lines = loss_csv.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch,step,loss,lr"
    assert len(lines) == 4
    params, _ = load_model(str(tmp_path / "checkpoints" / "epoch_000.rspr"))
    assert params.shapes() == result.params.shapes()


def test_training_is_deterministic(toy_data):
    config = TrainConfig(epochs=2, n_negatives=3, seed=5)
    first = train(toy_data, config, toy_model_config())
    second = train(toy_data, config, toy_model_config())
    for (name, a), (_, b) in zip(first.params.items(), second.params.items()):
        np.testing.assert_array_equal(a.values, b.values, err_msg=name)
    assert first.losses.equals(second.losses)


def test_gradient_accumulation_groups_steps(toy_data):
    result = train(toy_data, TrainConfig(epochs=1, n_negatives=3, gradient_accumulation=True, accumulation_steps=2),
                   toy_model_config())
    assert len(result.losses) == 2


def test_learning_rate_decays_per_epoch(toy_data):
    result = train(toy_data, TrainConfig(epochs=2, n_negatives=3, learning_rate=1e-3, lr_decay=0.9), toy_model_config())
    assert sorted(set(result.losses["lr"].round(12))) == [pytest.approx(9e-4), pytest.approx(1e-3)]


def test_non_finite_parameters_abort_training(toy_data):
    model_config = toy_model_config()
    params = init_model(model_config)
    bias = params["head.fc2.bias"]
    bias.values = np.full(bias.shape, np.inf)
    with pytest.raises(DivergenceError):
        train(toy_data, TrainConfig(epochs=1, n_negatives=3), model_config, params=params)


def test_no_usable_quadruplets(toy_data):
    far_queries = _windows(np.random.default_rng(1), [1000.0], "query")
    with pytest.raises(ValidationError):
        train(TrainingData(toy_data.database, far_queries), TrainConfig(epochs=1, n_negatives=3), toy_model_config())


def test_training_needs_poses(toy_data):
    unposed = [Window(w.scans, w.velocities) for w in toy_data.queries]
    with pytest.raises(ValidationError):
        train(TrainingData(toy_data.database, unposed), TrainConfig(epochs=1), toy_model_config())


def test_adam_first_step_moves_by_learning_rate():
    params = init_model(toy_model_config())
    optimizer = Adam(params)
    before = {name: t.values.copy() for name, t in params.items()}
    grads = {name: np.ones(t.shape) for name, t in params.items()}
    optimizer.step(grads, lr=0.01)
    for name, tensor in params.items():
        np.testing.assert_allclose(before[name] - tensor.values, 0.01, rtol=1e-6)


def test_training_pulls_negatives_apart():
    rng = np.random.default_rng(7)
    place, other = toy_window(rng), toy_window(rng)
    database = [
        Window(place.scans, place.velocities, anchor=0, pose=Pose(0.0, 0.0), sequence_id="db"),
        Window(other.scans, other.velocities, anchor=1, pose=Pose(30.0, 0.0), sequence_id="db"),
    ]
    queries = [Window(place.scans, place.velocities, anchor=0, pose=Pose(1.0, 0.0), sequence_id="query")]
    model_config = replace(toy_model_config(), flags=AblationFlags(False, False, False, False))
    params = init_model(model_config, seed=0)
    start = np.linalg.norm(forward(database[0], params, model_config).values
                           - forward(database[1], params, model_config).values)
    assert start > 0

    # the query equals its positive, so the loss only falls by separating the negative
    margin = 2.0 * start
    config = TrainConfig(epochs=30, learning_rate=5e-3, lr_decay=1.0, n_negatives=1, alpha=margin, beta=margin)
    result = train(TrainingData(database, queries), config, model_config, params=params)
    assert result.epoch_means[0] == pytest.approx(2.0 * start, rel=1e-9)
    assert result.epoch_means[-1] < 0.25 * result.epoch_means[0]
