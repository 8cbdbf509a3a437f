"""SVG figures for reports.

Output is byte-stable for equal inputs: the SVG hash salt is fixed and the
date metadata is dropped.  Every heatmap cell is its own ``<g id="cell-i-j">``
group so cells can be counted in the file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "layerlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
METADATA = {"Date": None, "Creator": "layerlab"}
NAN_COLOR = "#d9d9d9"


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=METADATA)
    plt.close(fig)
    return path


def heatmap(
    matrix: np.ndarray,
    path: str | Path,
    title: str,
    xlabel: str,
    ylabel: str,
    vmin: float | None = None,
    vmax: float | None = None,
    cmap: str = "viridis",
    annotate: bool = True,
) -> Path:
    """One rectangle per entry; NaN entries are drawn grey and labelled 'n/a'."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    finite = m[np.isfinite(m)]
    lo = vmin if vmin is not None else (float(finite.min()) if finite.size else 0.0)
    hi = vmax if vmax is not None else (float(finite.max()) if finite.size else 1.0)
    if hi <= lo:
        hi = lo + 1e-12
    norm = matplotlib.colors.Normalize(lo, hi)
    colormap = matplotlib.colormaps[cmap]
    with plt.rc_context(RC):
        size = max(3.0, 0.45 * max(rows, cols) + 1.8)
        fig, ax = plt.subplots(figsize=(size + 0.8, size))
        for i in range(rows):
            for j in range(cols):
                v = m[i, j]
                face = NAN_COLOR if np.isnan(v) else colormap(norm(v))
                ax.add_patch(Rectangle((j, i), 1, 1, facecolor=face, edgecolor="white", lw=0.5, gid=f"cell-{i}-{j}"))
                if annotate and rows <= 12 and cols <= 12:
                    text = "n/a" if np.isnan(v) else f"{v:.2f}"
                    shade = 0.0 if np.isnan(v) else norm(v)
                    ax.text(j + 0.5, i + 0.5, text, ha="center", va="center", fontsize=6,
                            color="white" if shade < 0.5 else "black")
        ax.set_xlim(0, cols)
        ax.set_ylim(rows, 0)
        ax.set_aspect("equal")
        ax.set_xticks(np.arange(cols) + 0.5, [str(j) for j in range(cols)])
        ax.set_yticks(np.arange(rows) + 0.5, [str(i) for i in range(rows)])
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.colorbar(matplotlib.cm.ScalarMappable(norm=norm, cmap=colormap), ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        return _save(fig, Path(path))


def line_chart(
    x: Sequence[float],
    series: dict[str, Sequence[float]],
    path: str | Path,
    title: str,
    xlabel: str,
    ylabel: str,
    reference: float | None = None,
    reference_label: str = "baseline",
) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for label, ys in series.items():
            ax.plot(list(x), list(ys), marker="o", ms=3.5, lw=1.4, label=label, gid=f"series-{label}")
        if reference is not None and np.isfinite(reference):
            ax.axhline(reference, color="0.4", ls="--", lw=1.0, label=reference_label)
        ax.set_xticks(list(x))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, Path(path))


def wtl_bars(summaries: dict[str, tuple[int, int, int]], path: str | Path, title: str) -> Path:
    """Stacked horizontal bars of win / tie / loss counts per intervention."""
    names = list(summaries)
    counts = np.array([summaries[n] for n in names], dtype=float).reshape(len(names), 3)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.8, 0.5 * len(names) + 1.2))
        left = np.zeros(len(names))
        for col, (label, color) in enumerate(zip(("win", "tie", "loss"), ("#4c9a2a", "#bdbdbd", "#c0392b"))):
            ax.barh(names, counts[:, col], left=left, color=color, label=label)
            left += counts[:, col]
        ax.set_xlabel("plans x datasets")
        ax.set_title(title)
        ax.invert_yaxis()
        ax.legend(frameon=False, fontsize=7, ncol=3, loc="lower right")
        fig.tight_layout()
        return _save(fig, Path(path))


def training_curve(losses: np.ndarray, path: str | Path) -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    window = max(1, len(losses) // 50)
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid") if len(losses) else losses
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        ax.plot(np.arange(len(losses)), losses, color="0.75", lw=0.6, label="per step")
        ax.plot(np.arange(len(smooth)) + window - 1, smooth, color="C0", lw=1.4, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.set_title("training loss")
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        return _save(fig, Path(path))
