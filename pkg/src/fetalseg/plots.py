"""SVG charts: embedding scatter panels, per-structure Dice bars, radial Dice
plots and fraction-ablation curves. Output is byte-stable for fixed input."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.fonttype"] = "none"  # keep labels as <text> elements
plt.rcParams["svg.hashsalt"] = "fetalseg"

PLANE_ORDER = ("TC", "TV")


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _colors(names):
    cmap = plt.get_cmap("tab10")
    return {n: cmap(i % 10) for i, n in enumerate(sorted(names))}


def scatter_panels(points, path) -> None:
    devices = sorted({p.device for p in points})
    colors = _colors(devices)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    for ax, plane in zip(axes, PLANE_ORDER):
        ax.set_title(f"{plane} images")
        ax.set_xticks([])
        ax.set_yticks([])
        for dev in devices:
            pts = [p for p in points if p.plane == plane and p.device == dev]
            if pts:
                ax.scatter([p.x for p in pts], [p.y for p in pts], s=8, color=colors[dev])
    handles = [plt.Line2D([], [], marker="o", ls="", color=colors[d], label=d) for d in devices]
    if handles:
        fig.legend(handles=handles, loc="lower center", ncol=min(6, len(handles)), frameon=False)
    _save(fig, path)


def dice_bars(rows, path) -> None:
    """Grouped bars of per-structure Dice: one group per class, one bar per
    (test_set, arm)."""
    rows = [r for r in rows if r["class_name"] != "mean"]
    classes = list(dict.fromkeys(r["class_name"] for r in rows))
    series = list(dict.fromkeys((r["test_set"], r["arm"]) for r in rows))
    values = defaultdict(list)
    for r in rows:
        values[(r["test_set"], r["arm"], r["class_name"])].append(float(r["dice"]))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes) + 2), 4))
    width = 0.8 / max(1, len(series))
    x = np.arange(len(classes))
    for i, (ts, arm) in enumerate(series):
        ys = [np.mean(values[(ts, arm, c)]) if values[(ts, arm, c)] else 0.0 for c in classes]
        ax.bar(x + i * width, ys, width, label=f"{ts} / {arm}")
    ax.set_xticks(x + 0.4 - width / 2 if series else x)
    ax.set_xticklabels(classes, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("Dice")
    if series:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def dice_radial(rows, path) -> None:
    """One polar trace per (test_set, arm) over the structures."""
    rows = [r for r in rows if r["class_name"] != "mean"]
    classes = list(dict.fromkeys(r["class_name"] for r in rows))
    series = list(dict.fromkeys((r["test_set"], r["arm"]) for r in rows))
    values = defaultdict(list)
    for r in rows:
        values[(r["test_set"], r["arm"], r["class_name"])].append(float(r["dice"]))
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="polar")
    if classes:
        theta = np.linspace(0, 2 * np.pi, len(classes), endpoint=False)
        for ts, arm in series:
            ys = [np.mean(values[(ts, arm, c)]) if values[(ts, arm, c)] else 0.0 for c in classes]
            ax.plot(np.append(theta, theta[0]), ys + ys[:1], label=f"{ts} / {arm}")
        ax.set_xticks(theta)
        ax.set_xticklabels(classes, fontsize=7)
        ax.legend(fontsize=7, loc="upper right", bbox_to_anchor=(1.3, 1.1))
    ax.set_ylim(0, 1)
    _save(fig, path)


def fraction_curves(rows, path) -> None:
    """Mean Dice against training fraction, one line per (test_set, arm)."""
    rows = [r for r in rows if r["class_name"] == "mean"]
    series = defaultdict(list)
    for r in rows:
        series[(r["test_set"], r["arm"])].append((float(r["fraction"]), float(r["dice"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (ts, arm), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ls="-" if arm == "da" else "--",
                label=f"{ts} / {arm}")
    ax.set_xlabel("training fraction")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    if series:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
