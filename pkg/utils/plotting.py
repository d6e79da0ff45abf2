"""
SVG charts of the loss, recall and ablation tables.
"""
import logging
import os
from typing import Callable, Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from utils.ablation import FLAG_NAMES  # noqa: E402
from utils.errors import ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_COLOR = "#2a6f97"
RECALL_COLOR = "#4d908e"
ABLATION_COLOR = "#d1495b"

plt.rcParams.update(
    {
        "font.size": 10,
        "axes.titlesize": 12,
        "axes.labelsize": 10,
        "svg.hashsalt": "radar-pr",
    }
)


def _read_table(path: str, required: List[str]) -> pd.DataFrame:
    table = pd.read_csv(path)
    missing = [column for column in required if column not in table.columns]
    if missing:
        raise ValidationError(f"{path} lacks columns {missing}")
    if table.empty:
        raise ValidationError(f"{path} has no rows")
    return table


def _save(fig, out_path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
    logger.info("Wrote chart %s", out_path)
    return out_path


def plot_loss_curve(table: pd.DataFrame, out_path: str) -> str:
    """Loss per optimizer step, with epoch means as a step line."""
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(table["step"], table["loss"], color=LOSS_COLOR, linewidth=1.0, alpha=0.6, label="step loss")
    epoch_means = table.groupby("epoch").agg(step=("step", "max"), loss=("loss", "mean"))
    ax.step(epoch_means["step"], epoch_means["loss"], where="post", color="black", linewidth=1.5, label="epoch mean")
    ax.set_title("Training loss")
    ax.set_xlabel("Step")
    ax.set_ylabel("Quadruplet loss")
    ax.legend(loc="best")
    return _save(fig, out_path)


def plot_recall(table: pd.DataFrame, out_path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"R@{int(n)}" for n in table["n"]]
    bars = ax.bar(labels, table["recall"] * 100.0, color=RECALL_COLOR)
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("Recall (%)")
    ax.set_title("Retrieval recall")
    return _save(fig, out_path)


def ladder_label(row: pd.Series) -> str:
    enabled = [name.upper() for name in FLAG_NAMES if int(row[name])]
    return "+".join(enabled) if enabled else "plain"


def plot_ablation(table: pd.DataFrame, out_path: str) -> str:
    """Recall@1 per flag combination, in table order."""
    fig, ax = plt.subplots(figsize=(8, 4))
    labels = [ladder_label(row) for _, row in table.iterrows()]
    bars = ax.bar(labels, table["r1"] * 100.0, color=ABLATION_COLOR)
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("Recall@1 (%)")
    ax.set_title("Component ablation")
    ax.tick_params(axis="x", labelrotation=20)
    return _save(fig, out_path)


CHARTS: Dict[str, tuple] = {
    "loss": (["epoch", "step", "loss"], plot_loss_curve),
    "recall": (["n", "recall"], plot_recall),
    "ablation": (list(FLAG_NAMES) + ["r1"], plot_ablation),
}


def detect_kind(columns) -> str:
    for kind, (required, _) in CHARTS.items():
        if all(column in columns for column in required):
            return kind
    raise ValidationError(f"cannot tell which chart fits columns {list(columns)}")


def plot_csv(csv_path: str, out_path: str, kind: str = "auto") -> str:
    """
    Render one CSV table to a standalone SVG.

    Args:
        csv_path: Loss, recall or ablation table
        out_path: SVG destination
        kind: "loss", "recall", "ablation" or "auto" to pick by header

    Raises:
        ValidationError: Unknown kind or missing columns
    """
    if kind == "auto":
        kind = detect_kind(pd.read_csv(csv_path, nrows=0).columns)
    if kind not in CHARTS:
        raise ValidationError(f"unknown chart kind: {kind}")
    required, render = CHARTS[kind]
    chart: Callable[[pd.DataFrame, str], str] = render
    return chart(_read_table(csv_path, required), out_path)
