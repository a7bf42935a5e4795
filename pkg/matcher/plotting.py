"""
Static figures: cumulative error curves and match visualizations
"""

import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import ConnectionPatch

from common.image_io import GrayImage
from matcher.evaluation import CumulativeCurve
from matcher.inference import MatchSet

logger = logging.getLogger(__name__)

METHOD_STYLES = {
    "proposed": {"color": "tab:blue", "label": "Proposed approach"},
    "baseline-inverse-consistency": {"color": "tab:orange", "label": "DoG - inverse consistency"},
    "baseline-ratio-test": {"color": "tab:green", "label": "DoG - ratio test"}
}


def plot_cumulative_curves(curves: Dict[Tuple[str, str], CumulativeCurve], path: str,
                           crosshair_mm: Optional[float] = 64.0,
                           crosshair_method: str = "baseline-ratio-test") -> str:
    """One panel per family, one curve per method, log-scaled error axis"""
    families = sorted({family for _, family in curves})
    if not families:
        raise ValueError("No curves to plot")

    # Figure objects without pyplot: safe to build from worker threads
    fig = Figure(figsize=(5 * len(families), 4))
    axes = fig.subplots(1, len(families), squeeze=False)
    for ax, family in zip(axes[0], families):
        for (method, curve_family), curve in sorted(curves.items()):
            if curve_family != family:
                continue
            style = METHOD_STYLES.get(method, {"color": None, "label": method})
            # log axis: draw 0 mm at a small positive offset
            x = np.maximum(np.asarray(curve.thresholds), 0.1)
            ax.plot(x, curve.fractions, marker="o", markersize=3, color=style["color"],
                    label=style["label"] + (" (no matches)" if curve.warning else ""))

            if crosshair_mm is not None and method == crosshair_method and crosshair_mm in curve.thresholds:
                level = curve.fraction_at(crosshair_mm)
                ax.axvline(crosshair_mm, color="gray", linestyle="--", linewidth=0.8)
                ax.axhline(level, color="gray", linestyle="--", linewidth=0.8)
                ax.annotate(f"{level:.2f}", (crosshair_mm, level), textcoords="offset points",
                            xytext=(4, -12), fontsize=8, color="gray")

        ax.set_xscale("log")
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("spatial matching error (mm)")
        ax.set_title(family)
        ax.grid(True, which="both", alpha=0.3)
    axes[0][0].set_ylabel("fraction of matches")
    axes[0][-1].legend(loc="lower right", fontsize=8)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    logger.info("Wrote %s", path)
    return path


def location_colors(points: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """RGB color per point from its (row, col) position in the reference image"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    red = points[:, 0] / max(shape[0] - 1, 1)
    green = points[:, 1] / max(shape[1] - 1, 1)
    blue = np.full(len(points), 0.6)
    return np.clip(np.stack([red, green, blue], axis=1), 0.0, 1.0)


def plot_matches(reference: GrayImage, target: GrayImage, matches: MatchSet, path: str,
                 title: Optional[str] = None, max_lines: int = 200) -> str:
    """Reference and target side by side; each match colored by its reference location"""
    fig = Figure(figsize=(10, 5))
    axes = fig.subplots(1, 2)
    axes[0].imshow(reference.pixels, cmap="gray")
    axes[1].imshow(target.pixels, cmap="gray")

    if len(matches):
        p1, p2 = matches.points1, matches.points2
        colors = location_colors(p1, reference.shape)
        axes[0].scatter(p1[:, 1], p1[:, 0], c=colors, s=10)
        axes[1].scatter(p2[:, 1], p2[:, 0], c=colors, s=10)

        step = max(1, len(matches) // max_lines)
        for k in range(0, len(matches), step):
            fig.add_artist(ConnectionPatch(
                xyA=(p1[k, 1], p1[k, 0]), xyB=(p2[k, 1], p2[k, 0]),
                coordsA=axes[0].transData, coordsB=axes[1].transData,
                color=colors[k], linewidth=0.6, alpha=0.5
            ))

    axes[0].set_title("reference")
    axes[1].set_title(f"target ({len(matches)} matches)")
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    return path
