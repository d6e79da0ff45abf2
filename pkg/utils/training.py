"""
Quadruplet training loop with Adam and per-epoch exponential learning-rate decay.
"""
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import (
    ACCUMULATION_STEPS,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    BATCH_SIZE,
    EPOCHS,
    LEARNING_RATE,
    LR_DECAY,
    MARGIN_ALPHA,
    MARGIN_BETA,
    N_NEGATIVES,
    SEED,
    USE_GRADIENT_ACCUMULATION,
)
from extensions.autodiff import Tape, Tensor
from utils.descriptor_head import QuadrupletBatch, lazy_quadruplet_loss
from utils.errors import DivergenceError, NonFiniteError, ValidationError
from utils.evaluation import embed_windows
from utils.mining import EvalProtocol, MiningIndex, mine_quadruplets
from utils.model import ModelConfig, forward, init_model, save_model
from utils.params_io import ParameterStore
from utils.preprocess import Window

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "step", "loss", "lr"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    learning_rate: float = LEARNING_RATE
    lr_decay: float = LR_DECAY
    batch_size: int = BATCH_SIZE
    alpha: float = MARGIN_ALPHA
    beta: float = MARGIN_BETA
    n_negatives: int = N_NEGATIVES
    seed: int = SEED
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    gradient_accumulation: bool = USE_GRADIENT_ACCUMULATION
    accumulation_steps: int = ACCUMULATION_STEPS

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValidationError("lr_decay must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.accumulation_steps < 1:
            raise ValidationError("epochs, batch_size and accumulation_steps out of range")
        if not self.alpha > 0 or not self.beta > 0:
            raise ValidationError("margins must be positive")
        if self.n_negatives < 1:
            raise ValidationError("n_negatives must be at least 1")

    @property
    def samples_per_step(self) -> int:
        return self.batch_size * (self.accumulation_steps if self.gradient_accumulation else 1)

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch


@dataclass
class TrainingData:
    """Database windows (positives/negatives are drawn from them) and training query windows."""

    database: List[Window]
    queries: List[Window]

    def positions(self, windows: Sequence[Window]) -> np.ndarray:
        if any(w.pose is None for w in windows):
            raise ValidationError("training windows need ground-truth poses")
        return np.array([[w.pose.x, w.pose.y] for w in windows], dtype=np.float64).reshape(-1, 2)


@dataclass
class TrainResult:
    params: ParameterStore
    losses: pd.DataFrame
    epoch_means: List[float]


class Adam:
    """Adam with bias correction, updating ParameterStore tensors in place."""

    def __init__(self, params: ParameterStore, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v: Dict[str, np.ndarray] = {name: np.zeros(t.shape) for name, t in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, tensor in self.params.items():
            grad = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            update = lr * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            tensor.values = tensor.values - update


def _dropout_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def quadruplet_loss(
    batch: QuadrupletBatch,
    data: TrainingData,
    params: ParameterStore,
    model_config: ModelConfig,
    seed: int,
    epoch: int,
    step: int,
) -> Tensor:
    """Training-mode loss of one quadruplet; a database window used twice is encoded once."""
    cache: Dict[int, Tensor] = {}

    def database_vector(index: int) -> Tensor:
        if index not in cache:
            cache[index] = forward(data.database[index], params, model_config, True,
                                   _dropout_seed(seed, epoch, step, 1, index))
        return cache[index]

    query = forward(data.queries[batch.query], params, model_config, True, _dropout_seed(seed, epoch, step, 0))
    return lazy_quadruplet_loss(
        query,
        database_vector(batch.positive),
        [database_vector(i) for i in batch.negatives],
        database_vector(batch.hard_negative),
        batch.alpha,
        batch.beta,
    )


def train(
    data: TrainingData,
    train_config: TrainConfig,
    model_config: ModelConfig,
    params: Optional[ParameterStore] = None,
    protocol: EvalProtocol = EvalProtocol(),
    loss_csv: Optional[str] = None,
    checkpoint_dir: Optional[str] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Train the descriptor model on mined quadruplets.

    Each epoch re-embeds database and query windows with the current parameters,
    mines one quadruplet per usable query, and takes an Adam step every
    `samples_per_step` quadruplets at lr * decay^epoch.

    Raises:
        DivergenceError: The loss became NaN or infinite
    """
    params = params if params is not None else init_model(model_config, train_config.seed)
    optimizer = Adam(params, train_config.beta1, train_config.beta2, train_config.adam_eps)
    index = MiningIndex(data.positions(data.database), protocol)
    query_positions = data.positions(data.queries)

    rows: List[Dict[str, float]] = []
    epoch_means: List[float] = []
    global_step = 0
    for epoch in range(train_config.epochs):
        lr = train_config.learning_rate_at(epoch)
        try:
            database_descriptors = embed_windows(data.database, params, model_config)
            query_descriptors = embed_windows(data.queries, params, model_config)
        except NonFiniteError as e:
            raise DivergenceError(f"non-finite descriptor at epoch {epoch}: {e}") from e
        batches = mine_quadruplets(
            query_positions, query_descriptors, database_descriptors, index,
            train_config.n_negatives, train_config.seed, epoch, train_config.alpha, train_config.beta,
        )
        if not batches:
            raise ValidationError("no usable training quadruplets; check poses and radii")

        accumulated: "OrderedDict[str, np.ndarray]" = OrderedDict()
        group_losses: List[float] = []
        epoch_losses: List[float] = []
        for position, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not progress)):
            with Tape() as tape:
                try:
                    loss = quadruplet_loss(batch, data, params, model_config, train_config.seed, epoch, position)
                except NonFiniteError as e:
                    raise DivergenceError(f"non-finite value at epoch {epoch}, sample {position}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss is {value} at epoch {epoch}, sample {position}")
            grads = tape.backward(loss, params)
            params.zero_grad()
            for name, grad in grads.items():
                accumulated[name] = accumulated[name] + grad if name in accumulated else grad.copy()
            group_losses.append(value)
            epoch_losses.append(value)

            if len(group_losses) == train_config.samples_per_step or position == len(batches) - 1:
                scale = 1.0 / len(group_losses)
                optimizer.step({name: grad * scale for name, grad in accumulated.items()}, lr)
                rows.append({"epoch": epoch, "step": global_step, "loss": float(np.mean(group_losses)), "lr": lr})
                global_step += 1
                accumulated = OrderedDict()
                group_losses = []

        epoch_means.append(float(np.mean(epoch_losses)))
        logger.info("Epoch %d: mean loss %.6f, lr %.6g, %d quadruplets", epoch, epoch_means[-1], lr, len(batches))
        if checkpoint_dir:
            save_model(params, model_config, os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.rspr"))

    losses = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    if loss_csv:
        os.makedirs(os.path.dirname(os.path.abspath(loss_csv)), exist_ok=True)
        losses.to_csv(loss_csv, index=False, lineterminator="\n")
    return TrainResult(params, losses, epoch_means)
