"""Render loss-landscape grids and early-detection curves to PNG files.

Input formats are exactly what the training/evaluation CLI emits: a landscape
CSV whose header row carries the beta axis and whose first column carries the
alpha axis (JSON sidecar at ``<csv>.meta.json``), and early-detection CSVs of
``k,accuracy`` rows.  Rendering is deterministic: the same inputs produce
pixel-identical images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150

STYLES = ("contour2d", "surface3d")


@dataclass
class GridFile:
    """Parsed landscape grid plus its sidecar metadata."""

    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    meta: dict = field(default_factory=dict)
    label: str = ""

    @property
    def center_loss(self) -> float:
        i = int(np.argmin(np.abs(self.alphas)))
        j = int(np.argmin(np.abs(self.betas)))
        return float(self.losses[i, j])

    @classmethod
    def load(cls, csv_path: str | Path) -> "GridFile":
        csv_path = Path(csv_path)
        lines = [line for line in csv_path.read_text(encoding="utf-8").splitlines()
                 if line.strip()]
        if len(lines) < 2:
            raise ValueError(f"{csv_path}: grid CSV needs a header and at least one row")
        header = lines[0].split(",")
        betas = np.asarray([float(x) for x in header[1:]])
        alphas = []
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            cells = line.split(",")
            if len(cells) != len(betas) + 1:
                raise ValueError(
                    f"{csv_path}:{lineno}: ragged row, expected {len(betas) + 1} "
                    f"cells, got {len(cells)}"
                )
            alphas.append(float(cells[0]))
            rows.append([float(c) for c in cells[1:]])
        sidecar = Path(f"{csv_path}.meta.json")
        if not sidecar.exists():
            raise ValueError(f"missing sidecar metadata: {sidecar}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        return cls(
            alphas=np.asarray(alphas),
            betas=betas,
            losses=np.asarray(rows),
            meta=meta,
            label=csv_path.stem,
        )


def build_landscape_figure(grids: list[GridFile], style: str):
    """One panel per grid on a shared color scale; returns (figure, artists)."""
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}, got {style!r}")
    if not grids:
        raise ValueError("at least one grid is required")
    vmin = min(float(g.losses.min()) for g in grids)
    vmax = max(float(g.losses.max()) for g in grids)
    levels = np.linspace(vmin, vmax, 21)
    n = len(grids)
    fig = plt.figure(figsize=(6.0 * n, 5.0))
    artists = []
    for idx, grid in enumerate(grids):
        mesh_b, mesh_a = np.meshgrid(grid.betas, grid.alphas)
        if style == "contour2d":
            ax = fig.add_subplot(1, n, idx + 1)
            contours = ax.contour(mesh_a, mesh_b, grid.losses, levels=levels,
                                  cmap="viridis", vmin=vmin, vmax=vmax)
            ax.clabel(contours, inline=True, fontsize=7, fmt="%.3f")
            ax.annotate(
                f"f(0,0)={grid.center_loss:.4f}",
                xy=(0.0, 0.0), xytext=(0.05, 0.05),
                textcoords="axes fraction", fontsize=8,
                arrowprops={"arrowstyle": "->", "lw": 0.8},
            )
            ax.set_xlabel("alpha")
            ax.set_ylabel("beta")
            artists.append(contours)
        else:
            ax = fig.add_subplot(1, n, idx + 1, projection="3d")
            surface = ax.plot_surface(mesh_a, mesh_b, grid.losses, cmap="viridis",
                                      vmin=vmin, vmax=vmax, linewidth=0)
            ax.set_xlabel("alpha")
            ax.set_ylabel("beta")
            ax.set_zlabel("loss")
            ax.set_zlim(vmin, vmax)
            ax.set_title(f"f(0,0)={grid.center_loss:.4f}", fontsize=9)
            artists.append(surface)
        checkpoint = grid.meta.get("checkpoint_id", "")
        suffix = f" [{checkpoint}]" if checkpoint else ""
        if style == "contour2d":
            ax.set_title(f"{grid.label}{suffix}", fontsize=10)
        else:
            ax.text2D(0.5, 0.98, f"{grid.label}{suffix}", fontsize=10,
                      transform=ax.transAxes, ha="center")
    fig.colorbar(artists[-1], ax=fig.axes, shrink=0.8, label="loss")
    return fig, artists


def render_landscape(grid_csvs: list[str | Path], style: str = "contour2d",
                     out: str | Path | None = None) -> Path:
    """Render one or more grid CSVs into a single PNG (shared color scale)."""
    paths = [Path(p) for p in grid_csvs]
    grids = [GridFile.load(p) for p in paths]
    if out is None:
        out = paths[0].with_name(f"{paths[0].stem}_{style}.png")
    out = Path(out)
    fig, _ = build_landscape_figure(grids, style)
    fig.savefig(out, dpi=DPI)
    plt.close(fig)
    return out


def load_early_csv(path: str | Path) -> list[tuple[int, float]]:
    path = Path(path)
    lines = [line for line in path.read_text(encoding="utf-8").splitlines()
             if line.strip()]
    if not lines or lines[0].strip() != "k,accuracy":
        raise ValueError(f"{path}: expected a 'k,accuracy' header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != 2:
            raise ValueError(f"{path}:{lineno}: expected two cells, got {len(cells)}")
        rows.append((int(cells[0]), float(cells[1])))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def build_early_figure(curves: dict[str, list[tuple[int, float]]]):
    """One line per model over the union of k values; missing k leaves a gap."""
    all_k = sorted({k for rows in curves.values() for k, _ in rows})
    fig = plt.figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot(1, 1, 1)
    for label, rows in curves.items():
        by_k = dict(rows)
        ys = [by_k.get(k, np.nan) for k in all_k]
        ax.plot(all_k, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel("posts")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    return fig, ax


def render_early_curve(csv_paths: list[str | Path],
                       out: str | Path | None = None) -> Path:
    """Render one or more k,accuracy CSVs into a single PNG; legend from names."""
    paths = [Path(p) for p in csv_paths]
    if not paths:
        raise ValueError("at least one CSV is required")
    curves = {p.stem: load_early_csv(p) for p in paths}
    if out is None:
        out = paths[0].with_name(f"{paths[0].stem}_curve.png")
    out = Path(out)
    fig, _ = build_early_figure(curves)
    fig.savefig(out, dpi=DPI)
    plt.close(fig)
    return out
