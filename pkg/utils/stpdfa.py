"""
Spatio-temporal pyramid and deformable temporal aggregation.

Every frame of a window goes through the same residual pyramid (levels 0-3,
each level halving H and W and doubling channels). Aggregation then runs
coarse to fine: at each level an iterative query built from the current frame
(and the upsampled aggregate of the level above) attends to the aligned past
frames through deformable sampling, and the result is normalized and passed
through a feed-forward block.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import DEFORM_HEADS, DEFORM_LEVELS, DEFORM_POINTS, DROPOUT_RATE
from extensions.autodiff import (
    Tensor,
    add,
    concat,
    getitem,
    mul,
    reduce_sum,
    relu,
    reshape,
    transpose,
)
from extensions.nn_ops import (
    bilinear_sample,
    channel_linear,
    conv2d,
    dropout,
    from_tokens,
    layer_norm,
    linear,
    softmax,
    sum_maps,
    to_tokens,
    upsample,
)
from utils.errors import ValidationError
from utils.params_io import ParameterStore, glorot_uniform

logger = logging.getLogger(__name__)

Pyramid = List[Tensor]
Seed = Union[int, Sequence[int]]


@dataclass(frozen=True)
class DeformConfig:
    """
    Attributes:
        n_heads: Attention heads M
        n_points: Sampling points P per head
        n_levels: Pyramid levels, aggregation runs from n_levels-1 down to 0
        dropout: Rate applied to the summed intermediate features
    """

    n_heads: int = DEFORM_HEADS
    n_points: int = DEFORM_POINTS
    n_levels: int = DEFORM_LEVELS
    dropout: float = DROPOUT_RATE

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.n_points < 1:
            raise ValidationError("n_heads and n_points must be at least 1")
        if self.n_levels < 1:
            raise ValidationError("n_levels must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")

    @property
    def stride(self) -> int:
        """Spatial divisor the input maps must satisfy."""
        return 2 ** (self.n_levels - 1)

    def level_channels(self, channels: int, level: int) -> int:
        return channels * 2 ** level

    def check_channels(self, channels: int) -> None:
        for level in range(self.n_levels):
            if self.level_channels(channels, level) % self.n_heads:
                raise ValidationError(
                    f"level {level} has {self.level_channels(channels, level)} channels, "
                    f"not divisible by {self.n_heads} heads"
                )


def init_stpdfa_params(
    store: ParameterStore,
    channels: int,
    config: DeformConfig,
    rng: np.random.Generator,
    prefix: str = "",
) -> None:
    """Add pyramid, query, deformable and aggregation parameters for every level."""
    config.check_channels(channels)
    mp = config.n_heads * config.n_points
    for block in range(1, config.n_levels):
        c_in, c_out = config.level_channels(channels, block - 1), config.level_channels(channels, block)
        name = f"{prefix}pyramid.{block}."
        store.add(name + "conv.weight", glorot_uniform(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        store.add(name + "conv.bias", np.zeros(c_out))
        store.add(name + "norm.gain", np.ones(c_out))
        store.add(name + "norm.bias", np.zeros(c_out))
        store.add(name + "skip.weight", glorot_uniform(rng, (c_out, c_in, 1, 1), c_in, c_out))

    for level in range(config.n_levels):
        c = config.level_channels(channels, level)
        if level < config.n_levels - 1:
            c_up = config.level_channels(channels, level + 1)
            store.add(f"{prefix}query.{level}.weight", glorot_uniform(rng, (c, c + c_up), c + c_up, c))
            store.add(f"{prefix}query.{level}.bias", np.zeros(c))
        store.add(f"{prefix}advanced.{level}.weight", glorot_uniform(rng, (c, 2 * c), 2 * c, c))
        store.add(f"{prefix}advanced.{level}.bias", np.zeros(c))

        deform = f"{prefix}deform.{level}."
        store.add(deform + "offset.weight", np.zeros((mp * 2, c)))
        store.add(deform + "offset.bias", np.zeros(mp * 2))
        store.add(deform + "attn.weight", np.zeros((mp, c)))
        store.add(deform + "attn.bias", np.zeros(mp))
        store.add(deform + "value.weight", np.eye(c))
        store.add(deform + "output.weight", np.eye(c))

        agg = f"{prefix}aggregate.{level}."
        store.add(agg + "norm.gain", np.ones(c))
        store.add(agg + "norm.bias", np.zeros(c))
        store.add(agg + "ffn1.weight", glorot_uniform(rng, (2 * c, c), c, 2 * c))
        store.add(agg + "ffn1.bias", np.zeros(2 * c))
        store.add(agg + "ffn2.weight", glorot_uniform(rng, (c, 2 * c), 2 * c, c))
        store.add(agg + "ffn2.bias", np.zeros(c))


def residual_block(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    """relu(LN(conv3x3 stride 2) + conv1x1 stride 2 skip): halves H and W."""
    main = conv2d(x, params[name + "conv.weight"], params[name + "conv.bias"], stride=2, padding=1)
    main = layer_norm(main, 0, params[name + "norm.gain"], params[name + "norm.bias"])
    skip = conv2d(x, params[name + "skip.weight"], None, stride=2, padding=0)
    return relu(add(main, skip))


def build_pyramid(feature_map: Tensor, params: ParameterStore, config: DeformConfig, prefix: str = "") -> Pyramid:
    """
    Multi-scale features of one frame: level 0 is the input, level l has
    shape [2^l C, H / 2^l, W / 2^l].

    Raises:
        ValidationError: H or W not divisible by 2^(n_levels - 1)
    """
    _, height, width = feature_map.shape
    if height % config.stride or width % config.stride:
        raise ValidationError(f"map {height}x{width} is not divisible by {config.stride}")
    levels = [feature_map]
    for block in range(1, config.n_levels):
        levels.append(residual_block(levels[-1], params, f"{prefix}pyramid.{block}."))
    return levels


def update_query(
    level: int,
    current: Tensor,
    coarser_aggregate: Optional[Tensor],
    params: ParameterStore,
    prefix: str = "",
) -> Tensor:
    """
    Iterative query of one level. At the top level the query is the current
    frame's features; below it the upsampled aggregate of the level above is
    concatenated and projected back to this level's channels.
    """
    if coarser_aggregate is None:
        return current
    channels, height, width = current.shape
    if coarser_aggregate.shape[0] != 2 * channels:
        raise ValidationError(
            f"aggregate {coarser_aggregate.shape} does not fit level {level} features {current.shape}"
        )
    upsampled = upsample(coarser_aggregate, height, width)
    stacked = concat([current, upsampled], axis=0)
    return channel_linear(stacked, params[f"{prefix}query.{level}.weight"], params[f"{prefix}query.{level}.bias"])


def advanced_query(level: int, query: Tensor, aligned: Tensor, params: ParameterStore, prefix: str = "") -> Tensor:
    """Per-past-frame query: projection of the iterative query joined with that frame's features."""
    if query.shape != aligned.shape:
        raise ValidationError(f"query {query.shape} and past features {aligned.shape} differ")
    stacked = concat([query, aligned], axis=0)
    return channel_linear(stacked, params[f"{prefix}advanced.{level}.weight"], params[f"{prefix}advanced.{level}.bias"])


def _reference_points(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)


def deformable_attention(
    level: int,
    advanced: Tensor,
    aligned: Tensor,
    config: DeformConfig,
    params: ParameterStore,
    prefix: str = "",
) -> Tensor:
    """
    Deformable sampling of a past frame's features.

    For each query cell, every head predicts P (column, row) offsets in cells and
    P softmax weights from the advanced query; the head's value channels are
    sampled bilinearly at cell + offset and summed with those weights. Heads are
    concatenated and passed through the output projection.

    Returns:
        Tensor with the shape of `aligned`
    """
    if advanced.shape != aligned.shape:
        raise ValidationError(f"advanced query {advanced.shape} and features {aligned.shape} differ")
    channels, height, width = aligned.shape
    heads, points = config.n_heads, config.n_points
    if channels % heads:
        raise ValidationError(f"{channels} channels are not divisible by {heads} heads")
    head_dim = channels // heads
    n = height * width
    name = f"{prefix}deform.{level}."

    tokens = to_tokens(advanced)
    offsets = reshape(
        linear(tokens, params[name + "offset.weight"], params[name + "offset.bias"]),
        (n, heads, points, 2),
    )
    logits = reshape(linear(tokens, params[name + "attn.weight"], params[name + "attn.bias"]), (n, heads, points))
    weights = softmax(logits, axis=-1)
    value = channel_linear(aligned, params[name + "value.weight"])

    reference = _reference_points(height, width)[:, None, :]
    head_outputs = []
    for m in range(heads):
        locations = add(getitem(offsets, (slice(None), m)), reference)
        value_m = getitem(value, slice(m * head_dim, (m + 1) * head_dim))
        sampled = reshape(bilinear_sample(value_m, reshape(locations, (n * points, 2))), (head_dim, n, points))
        head_weights = reshape(getitem(weights, (slice(None), m)), (1, n, points))
        head_outputs.append(reduce_sum(mul(sampled, head_weights), axis=2))
    merged = transpose(concat(head_outputs, axis=0), (1, 0))
    projected = linear(merged, params[name + "output.weight"])
    return from_tokens(projected, height, width)


def aggregate_layer(
    level: int,
    query: Tensor,
    intermediates: Sequence[Tensor],
    params: ParameterStore,
    config: DeformConfig,
    training: bool = False,
    seed: Seed = 0,
    prefix: str = "",
) -> Tensor:
    """
    A_l = FFN(LN(Dropout(sum of intermediates) + Q_l)); with no past frames
    the sum is empty and A_l = FFN(LN(Q_l)).
    """
    for item in intermediates:
        if item.shape != query.shape:
            raise ValidationError(f"intermediate {item.shape} does not match query {query.shape}")
    name = f"{prefix}aggregate.{level}."
    if intermediates:
        fused = dropout(sum_maps(intermediates), config.dropout, training, seed)
        combined = add(fused, query)
    else:
        combined = query
    normed = layer_norm(combined, 0, params[name + "norm.gain"], params[name + "norm.bias"])
    hidden = relu(channel_linear(normed, params[name + "ffn1.weight"], params[name + "ffn1.bias"]))
    return channel_linear(hidden, params[name + "ffn2.weight"], params[name + "ffn2.bias"])


def run_stpdt(
    pyramids: Sequence[Pyramid],
    config: DeformConfig,
    params: ParameterStore,
    training: bool = False,
    seed: int = 0,
    use_deformable: bool = True,
    prefix: str = "",
) -> Tensor:
    """
    Coarse-to-fine aggregation over a window.

    Args:
        pyramids: One pyramid per frame, oldest first; the last is the current frame,
            the others are aligned past frames. All pyramids have the same depth.
        config: Heads, points and dropout
        params: Parameters from init_stpdfa_params
        training: Enables dropout
        seed: Dropout seed; each level derives its own stream
        use_deformable: When false the intermediate feature of a past frame is
            its aligned map itself (identity sampling)

    Returns:
        The level-0 aggregate, shape of the current frame's level-0 map
    """
    if not pyramids:
        raise ValidationError("run_stpdt needs at least the current frame")
    depth = len(pyramids[-1])
    if any(len(p) != depth for p in pyramids):
        raise ValidationError("all pyramids must have the same number of levels")
    current = pyramids[-1]
    past = pyramids[:-1]

    aggregate: Optional[Tensor] = None
    for level in range(depth - 1, -1, -1):
        query = update_query(level, current[level], aggregate, params, prefix)
        intermediates = []
        for frame in past:
            if use_deformable:
                advanced = advanced_query(level, query, frame[level], params, prefix)
                intermediates.append(deformable_attention(level, advanced, frame[level], config, params, prefix))
            else:
                intermediates.append(frame[level])
        aggregate = aggregate_layer(level, query, intermediates, params, config, training, (seed, level), prefix)
    return aggregate
