import numpy as np
import pytest

from extensions.autodiff import Tensor
from extensions.nn_ops import layer_norm
from utils.errors import ValidationError
from utils.params_io import ParameterStore
from utils.stpdfa import (
    DeformConfig,
    advanced_query,
    aggregate_layer,
    build_pyramid,
    deformable_attention,
    init_stpdfa_params,
    run_stpdt,
    update_query,
)


def _params(channels, config, seed=0):
    store = ParameterStore()
    init_stpdfa_params(store, channels, config, np.random.default_rng(seed))
    return store


def _identity_ffn(params, level, channels):
    eye = np.eye(channels)
    params.assign(f"aggregate.{level}.ffn1.weight", np.vstack([eye, -eye]))
    params.assign(f"aggregate.{level}.ffn2.weight", np.hstack([eye, -eye]))


def test_pyramid_shapes():
    config = DeformConfig()
    params = _params(32, config)
    levels = build_pyramid(Tensor(np.random.default_rng(0).normal(size=(32, 64, 64))), params, config)
    assert [level.shape for level in levels] == [(32, 64, 64), (64, 32, 32), (128, 16, 16), (256, 8, 8)]


def test_zero_input_gives_zero_pyramid():
    config = DeformConfig()
    params = _params(4, config)
    for level in build_pyramid(Tensor(np.zeros((4, 16, 16))), params, config):
        assert not level.values.any()


def test_pyramid_needs_divisible_maps():
    config = DeformConfig()
    with pytest.raises(ValidationError):
        build_pyramid(Tensor(np.zeros((4, 12, 16))), _params(4, config), config)


def test_channels_must_split_into_heads():
    with pytest.raises(ValidationError):
        _params(6, DeformConfig(n_heads=4))


def test_update_query():
    config = DeformConfig()
    params = _params(4, config)
    top = Tensor(np.ones((32, 2, 2)))
    assert update_query(3, top, None, params) is top

    current = Tensor(np.random.default_rng(1).normal(size=(16, 4, 4)))
    params.assign("query.2.weight", np.hstack([np.eye(16), np.zeros((16, 32))]))
    query = update_query(2, current, Tensor(np.zeros((32, 2, 2))), params)
    np.testing.assert_allclose(query.values, current.values, atol=1e-12)

    shape = update_query(2, current, Tensor(np.random.default_rng(2).normal(size=(32, 2, 2))), _params(4, config))
    assert shape.shape == (16, 4, 4)
    with pytest.raises(ValidationError):
        update_query(2, current, Tensor(np.zeros((8, 2, 2))), params)


def test_advanced_query_projections():
    config = DeformConfig()
    params = _params(4, config)
    rng = np.random.default_rng(3)
    query, aligned = Tensor(rng.normal(size=(4, 8, 8))), Tensor(rng.normal(size=(4, 8, 8)))
    params.assign("advanced.0.weight", np.hstack([np.eye(4), np.zeros((4, 4))]))
    np.testing.assert_allclose(advanced_query(0, query, aligned, params).values, query.values, atol=1e-12)
    params.assign("advanced.0.weight", np.hstack([np.zeros((4, 4)), np.eye(4)]))
    np.testing.assert_allclose(advanced_query(0, query, aligned, params).values, aligned.values, atol=1e-12)
    with pytest.raises(ValidationError):
        advanced_query(0, query, Tensor(np.zeros((4, 4, 4))), params)


@pytest.mark.parametrize("heads,points", [(1, 1), (4, 2)])
def test_zero_offsets_reproduce_past_features(heads, points):
    config = DeformConfig(n_heads=heads, n_points=points)
    params = _params(4, config)
    rng = np.random.default_rng(4)
    advanced, aligned = Tensor(rng.normal(size=(4, 8, 8))), Tensor(rng.normal(size=(4, 8, 8)))
    out = deformable_attention(0, advanced, aligned, config, params)
    np.testing.assert_allclose(out.values, aligned.values, atol=1e-12)


def test_zero_past_features_give_zero_output():
    config = DeformConfig(n_heads=4, n_points=2)
    params = _params(4, config)
    rng = np.random.default_rng(5)
    params.assign("deform.0.offset.bias", rng.uniform(-2.0, 2.0, size=16))
    out = deformable_attention(0, Tensor(rng.normal(size=(4, 8, 8))), Tensor(np.zeros((4, 8, 8))), config, params)
    assert not out.values.any()


def test_sampling_is_local():
    config = DeformConfig(n_heads=4, n_points=2)
    params = _params(4, config)
    rng = np.random.default_rng(6)
    params.assign("deform.0.offset.bias", rng.uniform(-0.4, 0.4, size=16))
    advanced = Tensor(rng.normal(size=(4, 8, 8)))
    aligned = rng.normal(size=(4, 8, 8))
    before = deformable_attention(0, advanced, Tensor(aligned), config, params).values
    perturbed = aligned.copy()
    perturbed[:, 4:, 4:] += rng.normal(size=(4, 4, 4))
    after = deformable_attention(0, advanced, Tensor(perturbed), config, params).values
    np.testing.assert_array_equal(after[:, :2, :], before[:, :2, :])
    np.testing.assert_array_equal(after[:, :, :2], before[:, :, :2])


def test_aggregate_without_motion_is_normalized_query():
    config = DeformConfig()
    params = _params(4, config)
    _identity_ffn(params, 0, 4)
    query = Tensor(np.random.default_rng(7).normal(size=(4, 8, 8)))
    expected = layer_norm(query, 0, Tensor(np.ones(4)), Tensor(np.zeros(4))).values

    with_zeros = aggregate_layer(0, query, [Tensor(np.zeros((4, 8, 8)))] * 2, params, config)
    np.testing.assert_allclose(with_zeros.values, expected, atol=1e-12)
    single_frame = aggregate_layer(0, query, [], params, config)
    np.testing.assert_allclose(single_frame.values, expected, atol=1e-12)
    with pytest.raises(ValidationError):
        aggregate_layer(0, query, [Tensor(np.zeros((4, 4, 4)))], params, config)


def test_run_stpdt_shape_and_determinism():
    config = DeformConfig(n_heads=4, n_points=2)
    params = _params(4, config)
    rng = np.random.default_rng(8)
    pyramids = [build_pyramid(Tensor(rng.normal(size=(4, 16, 8))), params, config) for _ in range(3)]
    first = run_stpdt(pyramids, config, params)
    assert first.shape == (4, 16, 8)
    np.testing.assert_array_equal(run_stpdt(pyramids, config, params).values, first.values)
    trained = run_stpdt(pyramids, config, params, training=True, seed=3)
    assert not np.array_equal(trained.values, first.values)
    with pytest.raises(ValidationError):
        run_stpdt([], config, params)


def test_single_frame_window_uses_no_temporal_terms():
    config = DeformConfig(n_heads=4, n_points=2)
    params = _params(4, config)
    rng = np.random.default_rng(9)
    current = build_pyramid(Tensor(rng.normal(size=(4, 8, 8))), params, config)
    with_deform = run_stpdt([current], config, params, use_deformable=True)
    without = run_stpdt([current], config, params, use_deformable=False)
    np.testing.assert_array_equal(with_deform.values, without.values)
