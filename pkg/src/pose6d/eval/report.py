"""Report files: CSV tables, JSON summaries and PNG figures.

Figures are drawn with the Agg canvas directly (no pyplot state) and saved
without the software tag, so identical data gives byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from pose6d.net.train import History


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.9g}"
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def jsonable(obj):
    """``obj`` with numpy scalars unwrapped and non-finite floats as null."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return jsonable(obj.item())
    return obj


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def _save(fig: Figure, path: Path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata={"Software": None})


def plot_curves(history: History, path: Path, title: str = "") -> None:
    fig = Figure(figsize=(10, 3.2))
    axes = fig.subplots(1, 3)
    for ax, key, label in zip(axes, ("loss", "trans_px", "rot_deg"),
                              ("loss", "translation error [px]", "orientation error [deg]")):
        ax.plot(history.epoch, getattr(history, f"train_{key}"), label="train")
        ax.plot(history.epoch, getattr(history, f"val_{key}"), label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        if key == "loss":
            ax.set_yscale("log")
    axes[0].legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_grouped_bars(path: Path, groups: Sequence[str], series: dict[str, Sequence[float]], ylabel: str,
                      title: str = "") -> None:
    fig = Figure(figsize=(max(5.0, 1.1 * len(groups) + 2), 3.6))
    ax = fig.subplots()
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(groups))
    for i, (name, values) in enumerate(series.items()):
        vals = [np.nan if v is None else v for v in values]
        ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(groups, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_symmetry_curves(path: Path, epochs: Sequence[int], curves: dict[str, Sequence[float]],
                         marks: dict[str, int | None]) -> None:
    fig = Figure(figsize=(6, 3.6))
    ax = fig.subplots()
    for name, values in curves.items():
        line = ax.plot(epochs, values, label=name)[0]
        if marks.get(name) is not None:
            ax.axvline(marks[name], color=line.get_color(), linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation quaternion loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_occlusion_bins(path: Path, rows: Sequence[dict]) -> None:
    fig = Figure(figsize=(8, 3.2))
    axes = fig.subplots(1, 2)
    labels = [f"{r['lo']:.2f}-{r['hi']:.2f}" for r in rows]
    for ax, key, ylabel in zip(axes, ("trans_px", "rot_deg"), ("translation error [px]", "orientation error [deg]")):
        vals = [np.nan if r[key] is None else r[key] for r in rows]
        ax.bar(np.arange(len(rows)), vals)
        ax.set_xticks(np.arange(len(rows)))
        ax.set_xticklabels(labels, fontsize="small")
        ax.set_xlabel("occluded fraction")
        ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
