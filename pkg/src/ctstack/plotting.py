"""Area-plot figures rendered to files with a non-interactive matplotlib backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import AreaPlot  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "svg.hashsalt": "ctstack",
    "svg.fonttype": "none",
}

COLORS = {"truth": "#1b1b1b", "pred": "#d1495b"}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(tmp, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def _draw(ax, series: dict[str, AreaPlot], title: str | None):
    for label, plot in series.items():
        ax.plot(range(len(plot)), plot.normalized, label=label, color=COLORS.get(label))
    ax.set_xlabel("slice index")
    ax.set_ylabel("normalized area")
    ax.set_ylim(-0.05, 1.05)
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", frameon=False)


def plot_area_plots(series: dict[str, AreaPlot], path, title: str | None = None) -> Path:
    """Draw one or more area-plots (e.g. ``truth`` and ``pred``) on shared axes."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        _draw(ax, series, title)
        return _save(fig, path)


def plot_sweep(panels: dict[str, dict[str, AreaPlot]], path) -> Path:
    """Side-by-side panels, one per overlap factor."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2), sharey=True, squeeze=False)
        for ax, (title, series) in zip(axes[0], panels.items()):
            _draw(ax, series, title)
        fig.tight_layout()
        return _save(fig, path)
