"""SVG figures for loss curves, policy trajectories and run comparisons."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "svg.hashsalt": "autoview",  # stable element ids across runs
    "svg.fonttype": "none",
}


def read_metrics(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_trajectory(path) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """Returns (operation names, steps, probabilities (rows, ops))."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory file")
    header, body = rows[0], rows[1:]
    if header[0] != "step":
        raise ValueError(f"{path}: first column must be 'step'")
    if not body:
        return header[1:], np.zeros(0, dtype=np.int64), np.zeros((0, len(header) - 1))
    data = np.asarray(body, dtype=np.float64)
    return header[1:], data[:, 0].astype(np.int64), data[:, 1:]


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def plot_loss_curves(records: Sequence[dict], out_path) -> Path:
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key, label in (("loss", "total"), ("h_main", "distillation"), ("h_reg", "self-regularizer")):
            ys = [np.nan if r.get(key) is None else r[key] for r in records]
            if not np.all(np.isnan(ys)):
                ax.plot(steps, ys, label=label, gid=f"curve-{key}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(loc="best")
        return _save(fig, out_path)


def plot_sampling_probabilities(names: Sequence[str], steps: np.ndarray, probs: np.ndarray, out_path,
                                label_top: int = 6) -> Path:
    """One line per operation; the ``label_top`` most probable at the end get legend entries."""
    if probs.ndim != 2 or probs.shape[1] != len(names):
        raise ValueError("trajectory width does not match the operation names")
    final = probs[-1] if len(probs) else np.zeros(len(names))
    top = set(np.argsort(-final, kind="stable")[:label_top].tolist())
    cmap = plt.get_cmap("tab20")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for j, name in enumerate(names):
            ax.plot(steps, probs[:, j], color=cmap(j % 20), linewidth=1.6 if j in top else 0.8,
                    label=name if j in top else None, gid=f"op-{j}")
        ax.axhline(1.0 / len(names), color="0.4", linestyle=":", linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("sampling probability")
        ax.legend(loc="upper left", fontsize=7, ncol=2)
        return _save(fig, out_path)


def plot_comparison(rows: Sequence[Dict], label_key: str, value_key: str, out_path,
                    ylabel: str = "k-NN accuracy") -> Path:
    labels = [str(r[label_key]) for r in rows]
    values = [float(r[value_key]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        bars = ax.bar(range(len(values)), values, color="#4c72b0")
        ax.bar_label(bars, fmt="%.3f", fontsize=7)
        ax.set_xticks(range(len(values)), labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        return _save(fig, out_path)


def count_operation_lines(svg_path) -> int:
    """Number of per-operation line groups in an emitted sampling-probability SVG."""
    import xml.etree.ElementTree as ET

    root = ET.parse(svg_path).getroot()
    return sum(1 for el in root.iter() if el.get("id", "").startswith("op-"))
