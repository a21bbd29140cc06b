"""PNG output for reports and analysis maps."""

from __future__ import annotations
from typing import Dict, Optional, Sequence

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .evalkit import EvalReport  # noqa: E402


def success_plot(reports: Dict[str, EvalReport], path: str, title: Optional[str] = None):
    """Grouped bars of mean success per condition, one group per report
    label, with the across-seed std as error bars."""
    labels = list(reports)
    conditions = list(
        dict.fromkeys(name for report in reports.values() for name in report.condition_names())
    )
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(conditions))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * len(conditions)), 3.2))
    for i, label in enumerate(labels):
        rows = {row["condition"]: row for row in reports[label].summary()}
        means = [100 * rows[c]["mean"] if c in rows else 0.0 for c in conditions]
        stds = [100 * rows[c]["std"] if c in rows else 0.0 for c in conditions]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, means, width, yerr=stds,
               capsize=3, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(conditions, rotation=20, ha="right")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    if title:
        ax.set_title(title)
    if len(labels) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def curve_plot(steps: Sequence[int], series: Dict[str, Sequence[float]], path: str,
               ylabel: str = ""):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name, values in series.items():
        ax.plot(steps, values, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def _save(fig, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def heat_overlay(rgb: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Color `heat` in [0, 1] with a jet map and blend it over `rgb`."""
    colored = matplotlib.colormaps["jet"](np.clip(heat, 0.0, 1.0))[..., :3] * 255.0
    out = alpha * colored + (1.0 - alpha) * np.asarray(rgb, dtype=np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def similarity_image(similarity: np.ndarray) -> np.ndarray:
    """Map cosine similarities in [-1, 1] onto [0, 1]."""
    return (np.clip(similarity, -1.0, 1.0) + 1.0) / 2.0


def save_png(image: np.ndarray, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
