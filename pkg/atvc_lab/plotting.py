# atvc_lab/plotting.py
"""SVG figures, each derived only from a CSV written by the harness."""

import logging
import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, filename: str) -> str:
    fig.tight_layout()
    fig.savefig(filename, format="svg")
    plt.close(fig)
    logger.info(f"Plot written to {filename}")
    return filename


def plot_training(metrics_csv: str, filename: str, baselines_csv: Optional[str] = None) -> str:
    """Mean episode reward per iteration, with JSQ/Random reference lines when available."""
    metrics = pd.read_csv(metrics_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(metrics["iteration"], metrics["mean_reward"], label="ATVC")
    if baselines_csv and os.path.exists(baselines_csv):
        for _, row in pd.read_csv(baselines_csv).iterrows():
            ax.axhline(row["mean_reward"], linestyle="--", linewidth=1, label=row["policy"])
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode reward")
    ax.legend()
    return _save(fig, filename)


def plot_comm_ratio(metrics_csv: str, filename: str) -> str:
    metrics = pd.read_csv(metrics_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(metrics["iteration"], metrics["comm_ratio"], label="ATVC")
    ax.axhline(1.0, linestyle="--", linewidth=1, label="full communication")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("iteration")
    ax.set_ylabel("communication ratio")
    ax.legend()
    return _save(fig, filename)


def plot_sweep(sweep_csv: str, column: str, filename: str) -> str:
    """Drop rate against the swept column, one line per policy."""
    sweep = pd.read_csv(sweep_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for policy, rows in sweep.groupby("policy", sort=False):
        rows = rows.sort_values(column)
        ax.plot(rows[column], rows["drop_rate"], marker="o", label=policy)
    ax.set_xlabel(column)
    ax.set_ylabel("packet drop rate")
    ax.legend()
    return _save(fig, filename)


def plot_heatmap(heatmap_csv: str, filename: str) -> str:
    frame = pd.read_csv(heatmap_csv)
    size = int(frame["b1"].max()) + 1
    grid = np.zeros((size, size))
    grid[frame["b1"].to_numpy(), frame["b2"].to_numpy()] = frame["p_queue2"].to_numpy()
    fig, ax = plt.subplots(figsize=(5, 4))
    image = ax.imshow(grid, origin="lower", cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xlabel("b2")
    ax.set_ylabel("b1")
    fig.colorbar(image, ax=ax, label="P(send to queue 2)")
    return _save(fig, filename)
