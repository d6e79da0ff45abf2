"""
Descriptor databases from windows and Recall@N retrieval evaluation.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from tqdm import tqdm

from utils.errors import ValidationError
from utils.mining import EvalProtocol
from utils.model import ModelConfig, forward
from utils.params_io import ParameterStore
from utils.preprocess import Window
from utils.storage import DescriptorDatabase, entry_for, save_database

logger = logging.getLogger(__name__)

RECALL_COLUMNS = ["n", "recall", "excluded"]


def embed_windows(
    windows: Sequence[Window],
    params: ParameterStore,
    config: ModelConfig,
    progress: bool = False,
) -> np.ndarray:
    """Inference-mode descriptors, [len(windows), 256] float64."""
    rows = [
        forward(window, params, config, training=False).values
        for window in tqdm(windows, desc="embed", disable=not progress)
    ]
    return np.stack(rows) if rows else np.zeros((0, 256))


def build_database(
    windows: Sequence[Window],
    params: ParameterStore,
    config: ModelConfig,
    path: Optional[str] = None,
    progress: bool = False,
) -> DescriptorDatabase:
    """One descriptor per window with its sequence id, anchor frame and pose; saved when `path` is given."""
    descriptors = embed_windows(windows, params, config, progress)
    entries = [entry_for(w.sequence_id, w.anchor, w.pose) for w in windows]
    database = DescriptorDatabase(descriptors.astype(np.float32), entries)
    if path:
        save_database(database, path)
    return database


@dataclass(frozen=True)
class RecallResult:
    """
    Attributes:
        recall: N -> fraction of evaluated queries with a true positive in the top N
        successes: N -> successful query count
        excluded: Queries with no reference inside the positive radius
        total: All queries
    """

    recall: Dict[int, float]
    successes: Dict[int, int]
    excluded: int
    total: int
    retrieved: List[List[int]] = field(default_factory=list, repr=False)

    @property
    def evaluated(self) -> int:
        return self.total - self.excluded

    def failures(self, n: int) -> int:
        return self.evaluated - self.successes[n]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"n": n, "recall": self.recall[n], "excluded": self.excluded} for n in sorted(self.recall)],
            columns=RECALL_COLUMNS,
        )


def rank_references(queries: DescriptorDatabase, references: DescriptorDatabase, top_n: int) -> np.ndarray:
    """[queries, min(top_n, refs)] reference indices by ascending descriptor distance, stable on ties."""
    distances = cdist(queries.descriptors.astype(np.float64), references.descriptors.astype(np.float64))
    return np.argsort(distances, axis=1, kind="stable")[:, :top_n]


def recall_at_n(
    queries: DescriptorDatabase,
    references: DescriptorDatabase,
    protocol: EvalProtocol = EvalProtocol(),
) -> RecallResult:
    """
    A query succeeds at N when any of its N nearest references lies within the
    positive radius (planar). Queries with no reference inside that radius are
    excluded from the denominator and counted separately.

    Raises:
        ValidationError: Either database is empty or lacks poses
    """
    if len(queries) == 0 or len(references) == 0:
        raise ValidationError("recall needs non-empty query and reference databases")
    query_xy = queries.planar_positions()
    ref_xy = references.planar_positions()
    if not (np.all(np.isfinite(query_xy)) and np.all(np.isfinite(ref_xy))):
        raise ValidationError("recall needs a pose for every database row")

    max_n = max(protocol.recall_n)
    ranked = rank_references(queries, references, max_n)
    tree = cKDTree(ref_xy)
    successes = {n: 0 for n in protocol.recall_n}
    excluded = 0
    for q in range(len(queries)):
        true_positives = set(tree.query_ball_point(query_xy[q], protocol.positive_radius))
        if not true_positives:
            excluded += 1
            continue
        hits = [int(r) in true_positives for r in ranked[q]]
        for n in protocol.recall_n:
            if any(hits[:n]):
                successes[n] += 1

    evaluated = len(queries) - excluded
    if evaluated == 0:
        logger.warning("No query has a reference within %.1f m; recall is reported as 0", protocol.positive_radius)
    recall = {n: (successes[n] / evaluated if evaluated else 0.0) for n in protocol.recall_n}
    return RecallResult(recall, successes, excluded, len(queries), ranked.tolist())


def write_recall_csv(result: RecallResult, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    result.to_frame().to_csv(path, index=False, lineterminator="\n")
