"""SVG figures: density box plots, loss curves and top-down cloud scatters.

Rendering goes through matplotlib's SVG backend with a fixed hash salt and
no date metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import as_cloud  # noqa: E402

_RC = {"svg.hashsalt": "roofcloud", "svg.fonttype": "none", "font.size": 9}


def _render(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def density_boxplot(groups: list[tuple[str, np.ndarray]], radius: float, title: str = "") -> str:
    """Box plot of per-point neighbour counts, one box per ``(label, counts)``."""
    if not groups:
        raise ValueError("no density groups to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(groups), 3.2))
        ax.boxplot([np.asarray(c) for _, c in groups], showfliers=True)
        ax.set_xticks(range(1, len(groups) + 1), [g for g, _ in groups])
        ax.set_ylabel(f"points within {radius:g} m")
        ax.set_title(title or "neighbour counts around ground-truth points")
        fig.tight_layout()
        return _render(fig)


def loss_curves(history: dict[str, np.ndarray], iterations: np.ndarray, log_y: bool = True, title: str = "") -> str:
    """Line plot of loss columns against iteration; missing values are skipped."""
    if not history:
        raise ValueError("no loss columns to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for name, vals in history.items():
            vals = np.asarray(vals, dtype=float)
            ok = np.isfinite(vals)
            ax.plot(np.asarray(iterations)[ok], vals[ok], label=name, linewidth=1.0)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title(title or "loss history")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _render(fig)


def cloud_topdown(cloud, color_by: np.ndarray | None = None, label: str = "height (m)", title: str = "") -> str:
    """Top-down scatter coloured by ``color_by`` (default: z) with a colour-bar legend."""
    cloud = as_cloud(cloud)
    cloud.require_nonempty()
    values = cloud.points[:, 2] if color_by is None else np.asarray(color_by, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        sc = ax.scatter(cloud.points[:, 0], cloud.points[:, 1], c=values, s=2, cmap="viridis", linewidths=0)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title or "top-down view")
        fig.colorbar(sc, ax=ax, label=label)
        fig.tight_layout()
        return _render(fig)
