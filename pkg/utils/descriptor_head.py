"""
Descriptor head (channel MLP + GeM pooling) and the lazy quadruplet loss.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from config import DESCRIPTOR_DIM, GEM_EPS, GEM_P, MARGIN_ALPHA, MARGIN_BETA
from extensions.autodiff import (
    Tensor,
    add,
    clamp_min,
    power,
    reduce_max,
    reduce_mean,
    relu,
    stack_scalars,
    sub,
)
from extensions.nn_ops import channel_linear, euclidean_distance
from utils.errors import ValidationError
from utils.params_io import ParameterStore, glorot_uniform
from utils.radar_io import Descriptor


@dataclass(frozen=True)
class GemConfig:
    p: float = GEM_P
    eps: float = GEM_EPS

    def __post_init__(self) -> None:
        if not self.p >= 1.0:
            raise ValidationError(f"GeM exponent must be at least 1, got {self.p}")
        if not self.eps > 0:
            raise ValidationError("GeM eps must be positive")


@dataclass(frozen=True)
class QuadrupletBatch:
    """
    Window indices of one training sample.

    Attributes:
        query: Query window index (training split)
        positive: Database window within the positive radius
        negatives: J database windows beyond the negative radius
        hard_negative: Negative nearest to the query in descriptor space
    """

    query: int
    positive: int
    negatives: Tuple[int, ...]
    hard_negative: int
    alpha: float = MARGIN_ALPHA
    beta: float = MARGIN_BETA

    def __post_init__(self) -> None:
        object.__setattr__(self, "negatives", tuple(int(i) for i in self.negatives))
        if not self.negatives:
            raise ValidationError("a quadruplet needs at least one negative")
        if not self.alpha > 0 or not self.beta > 0:
            raise ValidationError("margins must be positive")


def init_head_params(store: ParameterStore, channels: int, rng: np.random.Generator, prefix: str = "head.") -> None:
    store.add(prefix + "fc1.weight", glorot_uniform(rng, (DESCRIPTOR_DIM, channels), channels, DESCRIPTOR_DIM))
    store.add(prefix + "fc1.bias", np.zeros(DESCRIPTOR_DIM))
    store.add(prefix + "fc2.weight", glorot_uniform(rng, (DESCRIPTOR_DIM, DESCRIPTOR_DIM), DESCRIPTOR_DIM, DESCRIPTOR_DIM))
    store.add(prefix + "fc2.bias", np.zeros(DESCRIPTOR_DIM))


def project_channels(feature_map: Tensor, params: ParameterStore, prefix: str = "head.") -> Tensor:
    """Per-cell MLP C -> 256 -> 256."""
    hidden = relu(channel_linear(feature_map, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    return channel_linear(hidden, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"])


def gem_pool(feature_map: Tensor, config: GemConfig = GemConfig()) -> Tensor:
    """Generalized mean over cells per channel: (mean(max(x, eps)^p))^(1/p)."""
    if feature_map.ndim != 3:
        raise ValidationError(f"gem_pool expects [C, H, W], got {feature_map.shape}")
    clamped = clamp_min(feature_map, config.eps)
    pooled = reduce_mean(power(clamped, config.p), axis=(1, 2))
    return power(pooled, 1.0 / config.p)


def to_descriptor(vector: Tensor) -> Descriptor:
    return Descriptor(vector.values.copy())


def lazy_quadruplet_loss(
    query: Tensor,
    positive: Tensor,
    negatives: Sequence[Tensor],
    hard_negative: Tensor,
    alpha: float = MARGIN_ALPHA,
    beta: float = MARGIN_BETA,
) -> Tensor:
    """
    max_j [alpha + d(q, pos) - d(q, neg_j)]+ + [beta + d(q, pos) - d(q, neg*)]+

    Hinges use relu, so a term exactly at zero has zero gradient; the max over
    negatives takes the lowest index on ties.
    """
    if not negatives:
        raise ValidationError("lazy quadruplet loss needs at least one negative")
    for other in (positive, hard_negative, *negatives):
        if other.shape != query.shape:
            raise ValidationError(f"descriptor dimension mismatch: {other.shape} vs {query.shape}")
    d_pos = euclidean_distance(query, positive)
    hinges = [relu(sub(add(d_pos, alpha), euclidean_distance(query, negative))) for negative in negatives]
    lazy = reduce_max(stack_scalars(hinges), axis=0)
    hard = relu(sub(add(d_pos, beta), euclidean_distance(query, hard_negative)))
    return add(lazy, hard)


def quadruplet_loss_from_distances(
    d_pos: float,
    d_negatives: Sequence[float],
    d_hard: float,
    alpha: float = MARGIN_ALPHA,
    beta: float = MARGIN_BETA,
) -> float:
    """The same loss evaluated directly on distances."""
    if len(d_negatives) == 0:
        raise ValidationError("need at least one negative distance")
    lazy = max(max(alpha + d_pos - d, 0.0) for d in d_negatives)
    return lazy + max(beta + d_pos - d_hard, 0.0)
