"""Figure rendering for loss-landscape grids and early-detection curves."""

from .render import (
    DPI,
    GridFile,
    build_early_figure,
    build_landscape_figure,
    load_early_csv,
    render_early_curve,
    render_landscape,
)

__version__ = "0.1.0"

__all__ = [
    "DPI",
    "GridFile",
    "build_early_figure",
    "build_landscape_figure",
    "load_early_csv",
    "render_early_curve",
    "render_landscape",
]
