from dataclasses import replace

import numpy as np
import pytest

from utils.ablation import AblationFlags
from utils.bev_pillars import GridConfig
from utils.errors import ValidationError
from utils.gradcheck import toy_model_config, toy_window
from utils.model import ModelConfig, describe, encode_window, forward, fuse_maps, init_model, load_model, save_model
from utils.preprocess import Window
from utils.radar_io import Descriptor

PLAIN = AblationFlags(False, False, False, False)


@pytest.fixture
def toy():
    config = toy_model_config()
    return config, init_model(config, seed=4)


def test_forward_gives_a_256_dimensional_descriptor(toy):
    config, params = toy
    vector = forward(toy_window(np.random.default_rng(0)), params, config)
    assert vector.shape == (256,)
    assert np.all(np.isfinite(vector.values))
    assert np.all(vector.values >= 0.0)


def test_inference_is_deterministic(toy):
    config, params = toy
    window = toy_window(np.random.default_rng(1))
    first = forward(window, params, config).values
    np.testing.assert_array_equal(forward(window, params, config).values, first)
    np.testing.assert_array_equal(forward(window, init_model(config, seed=4), config).values, first)


def test_training_mode_applies_dropout(toy):
    config, params = toy
    window = toy_window(np.random.default_rng(2))
    assert not np.array_equal(
        forward(window, params, config, training=True, seed=1).values,
        forward(window, params, config).values,
    )


def test_normalized_descriptors_have_unit_norm(toy):
    config, params = toy
    config = replace(config, normalize=True)
    vector = forward(toy_window(np.random.default_rng(3)), params, config).values
    assert np.linalg.norm(vector) == pytest.approx(1.0)


def test_plain_fusion_sums_maps(toy):
    config, params = toy
    config = replace(config, flags=PLAIN)
    window = toy_window(np.random.default_rng(4))
    maps = encode_window(window, params, config)
    fused = fuse_maps(maps, params, config)
    np.testing.assert_allclose(fused.values, sum(m.values for m in maps))


def test_pyramid_pads_and_crops_odd_grids():
    grid = GridConfig(x_range=(0.0, 3.2), y_range=(-1.6, 1.6), z_range=(-1.0, 1.0), max_points_per_pillar=4, channels=4)
    config = replace(toy_model_config(), grid=grid)
    params = init_model(config)
    window = toy_window(np.random.default_rng(5))
    maps = encode_window(window, params, config)
    assert fuse_maps(maps, params, config).shape == (4, 10, 10)
    assert forward(window, params, config).shape == (256,)


def test_window_length_must_match(toy):
    config, params = toy
    window = toy_window(np.random.default_rng(6))
    short = Window(window.scans[:2], window.velocities[:2])
    with pytest.raises(ValidationError):
        forward(short, params, config)


def test_describe_refines_raw_scans(toy):
    config, params = toy
    window = toy_window(np.random.default_rng(7))
    descriptor = describe(list(window.scans), params, config)
    assert isinstance(descriptor, Descriptor)
    assert descriptor.values.shape == (256,)
    assert describe(window, params, config) == Descriptor(forward(window, params, config).values)


def test_config_round_trip():
    config = replace(toy_model_config(), flags=AblationFlags(True, False, True, False), window=2)
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"grid": config.grid.to_dict()})


def test_model_checkpoint_round_trip(toy, tmp_path):
    config, params = toy
    path = str(tmp_path / "model.rspr")
    save_model(params, config, path)
    loaded, loaded_config = load_model(path, expected_grid=config.grid)
    assert loaded_config == config
    window = toy_window(np.random.default_rng(8))
    np.testing.assert_array_equal(forward(window, loaded, loaded_config).values, forward(window, params, config).values)

    with pytest.raises(ValidationError):
        load_model(path, expected_grid=GridConfig.desk())
