"""Regions, uniform cell grids and centroid distances."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist


@dataclass(frozen=True)
class Region:
    """Axis-aligned box in one or two dimensions."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(bounds) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(bounds)}")
        for lo, hi in bounds:
            if not lo < hi:
                raise ValueError(f"invalid interval [{lo}, {hi}]")
        object.__setattr__(self, "bounds", bounds)

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    @property
    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform partition of a region, optionally restricted by a cell mask.

    ``centroids`` and ``volumes`` refer to active cells only; ``lattice_index``
    maps each active cell back to its position on the full lattice, which is
    what neighbourhood moves in the design sampler use.
    """

    region: Region
    shape: tuple[int, ...]
    centroids: np.ndarray
    volumes: np.ndarray
    lattice_index: np.ndarray = field(repr=False)

    @property
    def cell_count(self) -> int:
        return len(self.volumes)

    @property
    def dimension(self) -> int:
        return self.region.dimension

    @property
    def cell_widths(self) -> np.ndarray:
        return np.array([(hi - lo) / k for (lo, hi), k in zip(self.region.bounds, self.shape)])

    @property
    def active_mask(self) -> np.ndarray:
        mask = np.zeros(int(np.prod(self.shape)), dtype=bool)
        mask[self.lattice_index] = True
        return mask

    def neighbours(self, cell: int) -> list[int]:
        """Active cells adjacent to ``cell`` along one axis (4-neighbourhood in 2-D)."""
        pos = np.unravel_index(self.lattice_index[cell], self.shape)
        lookup = self._lattice_lookup
        out = []
        for axis in range(len(self.shape)):
            for step in (-1, 1):
                q = list(pos)
                q[axis] += step
                if 0 <= q[axis] < self.shape[axis]:
                    j = lookup[np.ravel_multi_index(q, self.shape)]
                    if j >= 0:
                        out.append(int(j))
        return out

    @property
    def _lattice_lookup(self) -> np.ndarray:
        cached = self.__dict__.get("_lookup")
        if cached is None:
            cached = np.full(int(np.prod(self.shape)), -1, dtype=np.int64)
            cached[self.lattice_index] = np.arange(self.cell_count)
            self.__dict__["_lookup"] = cached
        return cached

    def to_csv(self, path: str | Path) -> None:
        write_grid_csv(self, path)


def build_grid(region: Region, cells_per_axis, mask=None) -> Grid:
    """Partition ``region`` into equal boxes with centroids at their centres.

    ``mask`` is an optional boolean array over the full lattice (C order);
    cells where it is False are dropped.
    """
    cells = tuple(int(k) for k in np.atleast_1d(cells_per_axis))
    if len(cells) != region.dimension:
        raise ValueError(f"need {region.dimension} cell counts, got {len(cells)}")
    if any(k <= 0 for k in cells):
        raise ValueError(f"cell counts must be positive, got {cells}")

    axes = []
    for (lo, hi), k in zip(region.bounds, cells):
        width = (hi - lo) / k
        axes.append(lo + width * (np.arange(k) + 0.5))
    mesh = np.meshgrid(*axes, indexing="ij")
    centroids = np.stack([m.ravel() for m in mesh], axis=1)
    volume = region.measure / int(np.prod(cells))

    total = int(np.prod(cells))
    if mask is None:
        index = np.arange(total)
    else:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.size != total:
            raise ValueError(f"mask has {mask.size} entries, lattice has {total}")
        index = np.flatnonzero(mask)
        if index.size == 0:
            raise ValueError("mask removes every cell")

    return Grid(
        region=region,
        shape=cells,
        centroids=centroids[index],
        volumes=np.full(index.size, volume),
        lattice_index=index,
    )


def pairwise_distances(grid: Grid) -> np.ndarray:
    """Euclidean distances between all pairs of active centroids."""
    d = cdist(grid.centroids, grid.centroids)
    # cdist is symmetric up to rounding; force exact symmetry and zero diagonal
    d = np.triu(d, 1)
    return d + d.T


def write_grid_csv(grid: Grid, path: str | Path) -> None:
    coord_cols = [f"coord_{k + 1}" for k in range(grid.dimension)]
    full = int(np.prod(grid.shape))
    lookup = grid._lattice_lookup
    widths = grid.cell_widths
    lo = np.array([b[0] for b in grid.region.bounds])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", *coord_cols, "volume", "active_flag"])
        vol = grid.region.measure / full
        for lat in range(full):
            pos = np.array(np.unravel_index(lat, grid.shape))
            c = lo + widths * (pos + 0.5)
            active = lookup[lat] >= 0
            w.writerow([lat, *(repr(float(v)) for v in c), repr(vol), int(active)])


def read_grid_csv(path: str | Path, region: Region, cells_per_axis) -> Grid:
    """Rebuild a grid from a CSV written by :func:`write_grid_csv` (or a mask file)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    shape = tuple(int(k) for k in np.atleast_1d(cells_per_axis))
    mask = np.zeros(int(np.prod(shape)), dtype=bool)
    for line, row in enumerate(rows, start=2):
        try:
            mask[int(row["cell_id"])] = bool(int(row["active_flag"]))
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{line}: bad grid row ({exc})") from None
    return build_grid(region, shape, mask=mask)
