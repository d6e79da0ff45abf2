"""
Positive/negative bookkeeping on planar poses and quadruplet mining.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from config import N_NEGATIVES, NEGATIVE_RADIUS_M, POSITIVE_RADIUS_M, RECALL_N
from utils.descriptor_head import QuadrupletBatch
from utils.errors import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalProtocol:
    positive_radius: float = POSITIVE_RADIUS_M
    negative_radius: float = NEGATIVE_RADIUS_M
    recall_n: tuple = field(default_factory=lambda: tuple(RECALL_N))

    def __post_init__(self) -> None:
        object.__setattr__(self, "recall_n", tuple(sorted(int(n) for n in self.recall_n)))
        if not 0 < self.positive_radius < self.negative_radius:
            raise ValidationError("need 0 < positive_radius < negative_radius")
        if not self.recall_n or self.recall_n[0] < 1:
            raise ValidationError("recall N values must be at least 1")


class MiningIndex:
    """
    Radius queries over database positions.

    Positives lie within positive_radius of the query; negatives lie strictly
    beyond negative_radius. Samples in between belong to neither set.
    """

    def __init__(self, positions: np.ndarray, protocol: EvalProtocol = EvalProtocol()):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(positions)):
            raise ValidationError("every database row needs a pose for mining")
        self.positions = positions
        self.protocol = protocol
        self._tree = cKDTree(positions) if positions.shape[0] else None

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def positives(self, point: Sequence[float]) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        found = self._tree.query_ball_point(np.asarray(point, dtype=np.float64), self.protocol.positive_radius)
        return np.array(sorted(found), dtype=np.int64)

    def negatives(self, point: Sequence[float]) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        near = self._tree.query_ball_point(np.asarray(point, dtype=np.float64), self.protocol.negative_radius)
        mask = np.ones(len(self), dtype=bool)
        mask[near] = False
        return np.flatnonzero(mask)


def _nearest(candidates: np.ndarray, descriptors: np.ndarray, query: np.ndarray) -> int:
    distances = np.linalg.norm(descriptors[candidates] - query, axis=1)
    return int(candidates[int(np.argmin(distances))])


def mine_quadruplets(
    query_positions: np.ndarray,
    query_descriptors: np.ndarray,
    database_descriptors: np.ndarray,
    index: MiningIndex,
    n_negatives: int = N_NEGATIVES,
    seed: int = 0,
    epoch: int = 0,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
) -> List[QuadrupletBatch]:
    """
    One quadruplet per usable query, in a seeded shuffled order.

    The positive is the descriptor-nearest positive, negatives are sampled
    uniformly without replacement, and the hard negative is the
    descriptor-nearest of all negatives. Queries without a positive or with
    fewer than `n_negatives` negatives are skipped with a warning.
    """
    if n_negatives < 1:
        raise ValidationError("n_negatives must be at least 1")
    query_positions = np.asarray(query_positions, dtype=np.float64).reshape(-1, 2)
    rng = np.random.default_rng([seed, epoch])
    margins = {}
    if alpha is not None:
        margins["alpha"] = alpha
    if beta is not None:
        margins["beta"] = beta

    batches: List[QuadrupletBatch] = []
    skipped = 0
    for q in rng.permutation(query_positions.shape[0]):
        positives = index.positives(query_positions[q])
        negatives = index.negatives(query_positions[q])
        if positives.size == 0 or negatives.size < n_negatives:
            skipped += 1
            continue
        anchor = query_descriptors[q]
        batches.append(QuadrupletBatch(
            query=int(q),
            positive=_nearest(positives, database_descriptors, anchor),
            negatives=tuple(int(i) for i in rng.choice(negatives, size=n_negatives, replace=False)),
            hard_negative=_nearest(negatives, database_descriptors, anchor),
            **margins,
        ))
    if skipped:
        logger.warning("Skipped %d of %d queries without a positive or enough negatives", skipped, query_positions.shape[0])
    return batches
