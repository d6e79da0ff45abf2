"""
Central finite-difference checks of the hand-written reverse passes.

Each check builds a scalar loss from fixed random inputs, runs backward once on
a tape, then compares sampled gradient entries with (f(x+e) - f(x-e)) / 2e.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from extensions.autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    mul,
    power,
    reduce_mean,
    reduce_sum,
    relu,
)
from extensions.nn_ops import (
    bilinear_sample,
    conv2d,
    dropout,
    euclidean_distance,
    l2_normalize,
    layer_norm,
    linear,
    masked_max,
    softmax,
    upsample,
)
from utils.ablation import AblationFlags
from utils.bev_pillars import GridConfig
from utils.descriptor_head import GemConfig, gem_pool, lazy_quadruplet_loss
from utils.model import ModelConfig, forward, init_model
from utils.params_io import ParameterStore
from utils.preprocess import Window
from utils.radar_io import RadarScan
from utils.stpdfa import (
    DeformConfig,
    aggregate_layer,
    build_pyramid,
    deformable_attention,
    init_stpdfa_params,
    update_query,
)

logger = logging.getLogger(__name__)

FD_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
TIGHT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(
    name: str,
    loss_fn: Callable[[], Tensor],
    tensors: Dict[str, Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    samples: Optional[int] = None,
    seed: int = 0,
    eps: float = FD_EPS,
) -> GradcheckResult:
    """
    Compare tape gradients of `loss_fn()` with central differences.

    Args:
        name: Label of the check
        loss_fn: Builds the scalar loss from the current tensor values
        tensors: Inputs to differentiate; they must have requires_grad set
        tolerance: Maximum allowed relative error
        samples: Entries checked per tensor (all when None)
        seed: Chooses the sampled entries
    """
    for tensor in tensors.values():
        tensor.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    analytic_all, numeric_all = [], []
    for tensor in tensors.values():
        analytic = np.zeros_like(tensor.values) if tensor.grad is None else tensor.grad
        flat_size = tensor.size
        if samples is None or samples >= flat_size:
            picks = np.arange(flat_size)
        else:
            picks = rng.choice(flat_size, size=samples, replace=False)
        for flat in picks:
            index = np.unravel_index(int(flat), tensor.shape)
            original = tensor.values[index]
            tensor.values[index] = original + eps
            plus = loss_fn().item()
            tensor.values[index] = original - eps
            minus = loss_fn().item()
            tensor.values[index] = original
            numeric_all.append((plus - minus) / (2.0 * eps))
            analytic_all.append(float(analytic[index]))
        tensor.grad = None
    error = relative_error(np.array(analytic_all), np.array(numeric_all))
    return GradcheckResult(name, error, tolerance, len(analytic_all))


def _weighted_sum(output: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(mul(output, weights))


def _param(rng: np.random.Generator, shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def op_checks(seed: int = 0) -> List[GradcheckResult]:
    """One finite-difference check per differentiable op."""
    rng = np.random.default_rng(seed)
    results: List[GradcheckResult] = []

    a, b = _param(rng, (3, 4)), _param(rng, (4,))
    w = rng.normal(size=(3, 4))
    results.append(check_gradients("add", lambda: _weighted_sum(add(a, b), w), {"a": a, "b": b}, TIGHT_TOLERANCE))
    results.append(check_gradients("mul", lambda: _weighted_sum(mul(a, b), w), {"a": a, "b": b}, TIGHT_TOLERANCE))

    # keep relu inputs away from the kink
    r = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    results.append(check_gradients("relu", lambda: _weighted_sum(relu(r), w), {"x": r}))

    positive = _param(rng, (3, 4), 0.5, 2.0)
    results.append(check_gradients("power", lambda: _weighted_sum(power(positive, 3.0), w), {"x": positive}))
    results.append(check_gradients("reduce_mean", lambda: _weighted_sum(reduce_mean(a, axis=1), w[:, 0]), {"x": a}))

    c = _param(rng, (2, 4))
    wc = rng.normal(size=(5, 4))
    results.append(check_gradients("concat", lambda: _weighted_sum(concat([a, c], axis=0), wc), {"a": a, "c": c}))

    x = _param(rng, (5, 3))
    weight, bias = _param(rng, (2, 3)), _param(rng, (2,))
    wl = rng.normal(size=(5, 2))
    results.append(check_gradients(
        "linear", lambda: _weighted_sum(linear(x, weight, bias), wl),
        {"x": x, "weight": weight, "bias": bias}, TIGHT_TOLERANCE,
    ))

    fmap = _param(rng, (2, 5, 5))
    kernel, kbias = _param(rng, (3, 2, 3, 3)), _param(rng, (3,))
    w1 = rng.normal(size=(3, 5, 5))
    w2 = rng.normal(size=(3, 3, 3))
    results.append(check_gradients(
        "conv2d", lambda: _weighted_sum(conv2d(fmap, kernel, kbias, stride=1, padding=1), w1),
        {"x": fmap, "weight": kernel, "bias": kbias}, TIGHT_TOLERANCE,
    ))
    results.append(check_gradients(
        "conv2d_stride2", lambda: _weighted_sum(conv2d(fmap, kernel, kbias, stride=2, padding=1), w2),
        {"x": fmap, "weight": kernel, "bias": kbias}, TIGHT_TOLERANCE,
    ))

    gain, shift = _param(rng, (2,), 0.5, 1.5), _param(rng, (2,))
    wn = rng.normal(size=(2, 5, 5))
    results.append(check_gradients(
        "layer_norm", lambda: _weighted_sum(layer_norm(fmap, 0, gain, shift), wn),
        {"x": fmap, "gain": gain, "bias": shift}, TIGHT_TOLERANCE,
    ))
    results.append(check_gradients("softmax", lambda: _weighted_sum(softmax(a, axis=-1), w), {"x": a}, TIGHT_TOLERANCE))

    coords = Tensor(rng.uniform(0.1, 3.9, size=(6, 2)) + 0.05, requires_grad=True)
    ws = rng.normal(size=(2, 6))
    results.append(check_gradients(
        "bilinear_sample", lambda: _weighted_sum(bilinear_sample(fmap, coords), ws),
        {"map": fmap, "coords": coords}, 1e-5,
    ))
    small = _param(rng, (2, 3, 3))
    wu = rng.normal(size=(2, 6, 6))
    results.append(check_gradients("upsample", lambda: _weighted_sum(upsample(small, 6, 6), wu), {"x": small}))
    results.append(check_gradients(
        "dropout", lambda: _weighted_sum(dropout(a, 0.5, True, seed), w), {"x": a},
    ))

    points = _param(rng, (3, 4, 2))
    mask = np.array([[True, True, False, False], [True, True, True, True], [True, False, False, False]])
    wm = rng.normal(size=(3, 2))
    results.append(check_gradients("masked_max", lambda: _weighted_sum(masked_max(points, mask), wm), {"x": points}))

    u, v = _param(rng, (6,)), _param(rng, (6,))
    results.append(check_gradients("euclidean_distance", lambda: euclidean_distance(u, v), {"a": u, "b": v}))
    wv = rng.normal(size=6)
    results.append(check_gradients("l2_normalize", lambda: _weighted_sum(l2_normalize(u), wv), {"x": u}))

    activations = _param(rng, (3, 4, 4), 0.2, 2.0)
    wg = rng.normal(size=3)
    results.append(check_gradients(
        "gem_pool", lambda: _weighted_sum(gem_pool(activations, GemConfig(p=3.0)), wg), {"x": activations},
    ))

    q, pos = _param(rng, (8,)), _param(rng, (8,))
    negatives = [_param(rng, (8,)) for _ in range(3)]
    hard = _param(rng, (8,))
    results.append(check_gradients(
        "lazy_quadruplet_loss",
        lambda: lazy_quadruplet_loss(q, pos, negatives, hard, alpha=5.0, beta=5.0),
        {"query": q, "positive": pos, "hard": hard, **{f"neg{i}": n for i, n in enumerate(negatives)}},
        1e-5,
    ))
    return results


def toy_deform_config() -> DeformConfig:
    return DeformConfig(n_heads=4, n_points=2, n_levels=4, dropout=0.1)


def _perturb_deformable(params: ParameterStore, rng: np.random.Generator) -> None:
    """Move sampling offsets off the lattice so every sample sits strictly inside a cell."""
    for name, tensor in params.items():
        if ".offset.bias" in name:
            params.assign(name, rng.uniform(0.15, 0.35, size=tensor.shape) * rng.choice([-1.0, 1.0], size=tensor.shape))
        elif ".offset.weight" in name or ".attn." in name:
            params.assign(name, rng.normal(0.0, 0.02, size=tensor.shape))


def stpdfa_checks(seed: int = 0) -> List[GradcheckResult]:
    """Pyramid, deformable attention and stacked aggregation on a 4-channel 8x8 toy."""
    rng = np.random.default_rng(seed)
    config = toy_deform_config()
    params = ParameterStore()
    init_stpdfa_params(params, 4, config, rng)
    _perturb_deformable(params, rng)
    results: List[GradcheckResult] = []

    fmap = Tensor(rng.normal(size=(4, 8, 8)))
    top = build_pyramid(fmap, params, config)[3]
    w3 = rng.normal(size=top.shape)
    block_params = {name: t for name, t in params.items() if name.startswith("pyramid.")}
    results.append(check_gradients(
        "pyramid", lambda: _weighted_sum(build_pyramid(fmap, params, config)[3], w3), block_params, samples=4, seed=seed,
    ))

    query = Tensor(rng.normal(size=(4, 8, 8)))
    past = Tensor(rng.normal(size=(4, 8, 8)))
    wd = rng.normal(size=(4, 8, 8))
    offset_params = {name: t for name, t in params.items() if name.startswith("deform.0.")}
    results.append(check_gradients(
        "deformable_attention",
        lambda: _weighted_sum(deformable_attention(0, query, past, config, params), wd),
        offset_params, samples=6, seed=seed,
    ))

    query1, past1 = Tensor(rng.normal(size=(8, 4, 4))), Tensor(rng.normal(size=(8, 4, 4)))
    query0, past0 = Tensor(rng.normal(size=(4, 8, 8))), Tensor(rng.normal(size=(4, 8, 8)))

    def stacked() -> Tensor:
        coarse = aggregate_layer(1, query1, [past1], params, config)
        refined = update_query(0, query0, coarse, params)
        return _weighted_sum(aggregate_layer(0, refined, [past0], params, config), wd)

    layer_params = {
        name: t for name, t in params.items()
        if name.startswith(("aggregate.0.", "aggregate.1.", "query.0."))
    }
    results.append(check_gradients("aggregate_stacked", stacked, layer_params, samples=4, seed=seed))
    return results


def toy_model_config() -> ModelConfig:
    """4 channels on an 8x8 grid, K=3."""
    grid = GridConfig(x_range=(0.0, 2.56), y_range=(-1.28, 1.28), z_range=(-1.0, 1.0),
                      max_points_per_pillar=4, channels=4)
    return ModelConfig(grid=grid, deform=toy_deform_config(), flags=AblationFlags(), window=3)


def toy_window(rng: np.random.Generator, n_points: int = 30, velocity=(1.0, 0.3, 0.0)) -> Window:
    scans = []
    for _ in range(3):
        x = rng.uniform(0.05, 2.5, size=n_points)
        y = rng.uniform(-1.25, 1.25, size=n_points)
        z = rng.uniform(-0.9, 0.9, size=n_points)
        v_d = rng.normal(0.0, 1.0, size=n_points)
        rcs = rng.uniform(0.0, 30.0, size=n_points)
        scans.append(RadarScan(np.column_stack([x, y, z, v_d, rcs])))
    return Window(tuple(scans), np.tile(np.array(velocity, dtype=np.float64), (3, 1)))


def pipeline_check(seed: int = 0, samples: int = 3) -> GradcheckResult:
    """Quadruplet loss through the whole model on the toy configuration."""
    rng = np.random.default_rng(seed)
    config = toy_model_config()
    params = init_model(config, seed)
    _perturb_deformable(params, rng)
    windows = [toy_window(rng) for _ in range(4)]

    def loss() -> Tensor:
        vectors = [forward(w, params, config, training=False) for w in windows]
        return lazy_quadruplet_loss(vectors[0], vectors[1], [vectors[2]], vectors[3], alpha=10.0, beta=10.0)

    return check_gradients("pipeline", loss, dict(params.items()), DEFAULT_TOLERANCE, samples=samples, seed=seed)


def run_suite(seed: int = 0, include_pipeline: bool = True) -> List[GradcheckResult]:
    results = op_checks(seed) + stpdfa_checks(seed)
    if include_pipeline:
        results.append(pipeline_check(seed))
    for result in results:
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, "gradcheck %-22s rel.err %.3e (tol %.0e)", result.name, result.max_rel_error, result.tolerance)
    return results
