"""Report artifacts: CSV/JSON tables and matplotlib figures written to files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsBundle  # noqa: E402

FIG_DPI = 120


def write_json(path: str | Path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def write_metrics_csv(path: str | Path, results: dict[str, MetricsBundle]) -> Path:
    cols = ["method", "full_accuracy", "full_mean_iou", "obstructed_accuracy", "obstructed_mean_iou"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for name, m in results.items():
            w.writerow([name] + [getattr(m, c) for c in cols[1:]])
    return Path(path)


def write_rows_csv(path: str | Path, rows: list[dict]) -> Path:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return Path(path)


def _save(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return Path(path)


def plot_loss_history(rows: list[dict], path: str | Path) -> Path:
    """One line per loss term over epochs (log scale)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    terms = sorted({r["term"] for r in rows})
    for term in terms:
        pts = [(r["epoch"], r["value"]) for r in rows if r["term"] == term]
        ax.plot(*zip(*pts), marker=".", label=term)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_method_comparison(results: dict[str, MetricsBundle], path: str | Path) -> Path:
    """Grouped bars of full-image and obstructed-region mean IoU per method."""
    names = list(results)
    full = [results[n].full_mean_iou for n in names]
    obst = [results[n].obstructed_mean_iou or 0.0 for n in names]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 4))
    ax.bar(x - 0.2, full, 0.4, label="full image")
    ax.bar(x + 0.2, obst, 0.4, label="obstructed region")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("mean IoU")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_bandwidth(rows: list[dict], path: str | Path) -> Path:
    """Target transmission (fraction of one raw image) against query width."""
    fig, ax = plt.subplots(figsize=(5, 4))
    qs = [r["query_dim"] for r in rows]
    ax.plot(qs, [r["target_fraction"] for r in rows], marker="o")
    for r in rows:
        ax.annotate(f"{r['target_fraction']:.2f}x", (r["query_dim"], r["target_fraction"]), textcoords="offset points", xytext=(4, -10))
    ax.set_xscale("log", base=2)
    ax.set_xlabel("query channels Q")
    ax.set_ylabel("target Tx / raw image")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def _class_cmap(n_classes: int):
    return matplotlib.colormaps["tab10"].resampled(max(n_classes, 2))


def plot_round(sample, masks: dict[int, np.ndarray], path: str | Path, n_classes: int) -> Path:
    """Observation, ground truth and fused mask for every target, one row each."""
    targets = sorted(masks)
    fig, axes = plt.subplots(len(targets), 3, figsize=(7, 2.3 * len(targets)), squeeze=False)
    cmap = _class_cmap(n_classes)
    for row, t in zip(axes, targets):
        obs = np.clip(sample.observations[t], 0, 1)
        row[0].imshow(obs)
        if sample.obstruction_masks[t].any():
            row[0].contour(sample.obstruction_masks[t], levels=[0.5], colors="w", linewidths=0.8)
        row[1].imshow(sample.gt_masks[t], cmap=cmap, vmin=0, vmax=n_classes - 1, interpolation="nearest")
        row[2].imshow(masks[t], cmap=cmap, vmin=0, vmax=n_classes - 1, interpolation="nearest")
        row[0].set_ylabel(f"agent {t}")
        for ax in row:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, title in zip(axes[0], ("observation", "ground truth", "fused")):
        ax.set_title(title)
    return _save(fig, path)


def write_pgm(path: str | Path, mask: np.ndarray, n_classes: int) -> Path:
    """Binary greyscale PGM with classes spread over 0..255."""
    scale = 255 // max(n_classes - 1, 1)
    img = (np.asarray(mask, dtype=np.int64) * scale).clip(0, 255).astype(np.uint8)
    rows, cols = img.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes())
    return Path(path)
