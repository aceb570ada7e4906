"""Optional SVG renderings of the CSV plot tables (needs matplotlib)."""
from __future__ import annotations

import numpy as np

from .grid import Grid


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError("SVG output needs matplotlib (pip install 'artifact[plot]')") from exc
    matplotlib.use("Agg")
    # fixed salt and no date so repeated runs give identical files
    matplotlib.rcParams["svg.hashsalt"] = "prefgeo"
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def field_svg(grid: Grid, values, path, title: str = "", band=None) -> None:
    """Line plot for 1-D grids (with an optional (lower, upper) band), heat map for 2-D."""
    plt = _pyplot()
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    if grid.dimension == 1:
        x = grid.centroids[:, 0]
        if band is not None:
            ax.fill_between(x, band[0], band[1], alpha=0.3, linewidth=0)
        ax.plot(x, values)
        ax.set_xlabel("x")
    else:
        img = np.full(int(np.prod(grid.shape)), np.nan)
        img[grid.lattice_index] = values
        (x0, x1), (y0, y1) = grid.region.bounds
        im = ax.imshow(img.reshape(grid.shape).T, origin="lower", extent=(x0, x1, y0, y1))
        fig.colorbar(im, ax=ax)
    ax.set_title(title)
    _save(fig, path)
    plt.close(fig)


def variogram_svg(empirical, band, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    if band is not None:
        h, lo, med, hi = (np.asarray(c) for c in zip(*band))
        ax.fill_between(h, lo, hi, alpha=0.3, linewidth=0)
        ax.plot(h, med)
    if empirical:
        mid, semi, _ = zip(*empirical)
        ax.plot(mid, semi, "o")
    ax.set_xlabel("distance")
    ax.set_ylabel("semivariance")
    _save(fig, path)
    plt.close(fig)
