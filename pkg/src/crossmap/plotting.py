"""Matplotlib figures written as SVG: episode path renders and training curves.

Renders are deterministic byte for byte (fixed hash salt, no date stamp) so
they can be diffed between runs.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import navworld as nw  # noqa: E402

STYLE = {
    "svg.hashsalt": "crossmap",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
PATH_COLORS = {"reference": "#2b8cbe", "generated": "#e34a33"}
NODE_GID = "nodes"


def _save(fig, out: Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


def _xy(graph: nw.NavGraph, ids: Sequence[str]):
    return [graph.nodes[i].position[0] for i in ids], [graph.nodes[i].position[1] for i in ids]


def render_episode(graph: nw.NavGraph, episode: nw.Episode, generated: Sequence[str] | None, out,
                   title: str | None = None) -> Path:
    """Top-down view: every graph node and edge, the reference path and the generated path."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        for a in sorted(graph.edges):
            for e in graph.edges[a]:
                if a < e.to_id:
                    xs, ys = _xy(graph, [a, e.to_id])
                    ax.plot(xs, ys, color="0.85", lw=0.8, zorder=1)
        ids = sorted(graph.nodes)
        xs, ys = _xy(graph, ids)
        nodes = ax.scatter(xs, ys, s=14, color="0.4", zorder=2)
        nodes.set_gid(NODE_GID)
        xs, ys = _xy(graph, episode.path)
        ax.plot(xs, ys, color=PATH_COLORS["reference"], lw=2.5, alpha=0.7, label="reference", zorder=3)
        if generated:
            xs, ys = _xy(graph, generated)
            ax.plot(xs, ys, color=PATH_COLORS["generated"], lw=1.5, ls="--", marker="o", ms=3,
                    label="generated", zorder=4)
        sx, sy = _xy(graph, [episode.path[0]])
        gx, gy = _xy(graph, [episode.goal])
        ax.plot(sx, sy, marker="s", color="k", ms=6, ls="none", label="start", zorder=5)
        ax.plot(gx, gy, marker="*", color="gold", mec="k", ms=11, ls="none", label="goal", zorder=5)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title(title or episode.id)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def svg_node_count(path) -> int:
    """Number of node markers in a render produced by :func:`render_episode`."""
    root = ET.parse(path).getroot()
    for g in root.iter("{http://www.w3.org/2000/svg}g"):
        if g.get("id") == NODE_GID:
            return sum(1 for el in g.iter("{http://www.w3.org/2000/svg}use"))
    raise ValueError(f"{path}: no node group")


def plot_curves(rows: Sequence[dict], out, keys: Sequence[str] | None = None, title: str = "") -> Path:
    """One line per numeric column of per-epoch rows, against the epoch."""
    rows = list(rows)
    if keys is None:
        keys = [k for k in (rows[0] if rows else {}) if k not in ("epoch", "phase")
                and isinstance(rows[0][k], (int, float))]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        epochs = [r["epoch"] for r in rows]
        for k in keys:
            ax.plot(epochs, [r.get(k, float("nan")) for r in rows], label=k, lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("value")
        if title:
            ax.set_title(title)
        if keys:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, out)
