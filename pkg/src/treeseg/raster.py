"""Canopy height model rasters and watershed crown segmentation.

The watershed pipeline rasterizes a height-normalized cloud into a canopy
height model (CHM), smooths it with a background-aware Gaussian filter,
detects treetops as local maxima of the smoothed surface, floods crown
labels outward from those markers in descending height order, and finally
projects the 2D crown labels back onto the 3D points.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import check_in_range, check_odd, check_positive
from .evaluation import Segmentation
from .terrain import fill_empty_cells, normalize_heights

#: Cells whose canopy height falls below this value are background (meters).
BACKGROUND_HEIGHT = 2.0


@dataclass(frozen=True)
class Raster:
    """Regular grid of cell values anchored in world coordinates.

    Cell (row, col) has its center at
    ``origin + (col + 0.5, row + 0.5) * resolution``; row 0 is the
    southernmost row. ``background`` flags cells excluded from analysis.
    """

    origin_xy: tuple
    resolution: float
    values: np.ndarray
    background: np.ndarray = field(default=None)

    def __post_init__(self):
        check_positive("resolution", self.resolution)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError("values must be a non-empty 2D grid")
        bg = self.background
        bg = np.zeros(values.shape, dtype=bool) if bg is None else np.asarray(bg, dtype=bool)
        if bg.shape != values.shape:
            raise ValueError("background mask shape must match values")
        values = values.copy()
        values.flags.writeable = False
        bg = bg.copy()
        bg.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "background", bg)
        ox, oy = self.origin_xy
        object.__setattr__(self, "origin_xy", (float(ox), float(oy)))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def cell_of(self, x, y):
        """(row, col) arrays of the cells containing world points."""
        col = np.floor((np.asarray(x) - self.origin_xy[0]) / self.resolution)
        row = np.floor((np.asarray(y) - self.origin_xy[1]) / self.resolution)
        col = np.clip(col.astype(np.intp), 0, self.width - 1)
        row = np.clip(row.astype(np.intp), 0, self.height - 1)
        return row, col

    def cell_center(self, row, col):
        """World coordinates of cell centers."""
        x = self.origin_xy[0] + (np.asarray(col) + 0.5) * self.resolution
        y = self.origin_xy[1] + (np.asarray(row) + 0.5) * self.resolution
        return x, y


@dataclass(frozen=True)
class WatershedParams:
    """Watershed segmentation parameters.

    Attributes:
        resolution: CHM cell size in meters, in [0.05, 1.00].
        sigma: Gaussian smoothing width, in [0.1, 6.0].
        window_gf: Gaussian filter window in cells, odd, in [3, 41].
        window_mf: maximum filter window in cells, odd, in [3, 41].
    """

    resolution: float = 0.5
    sigma: float = 0.7
    window_gf: int = 5
    window_mf: int = 5

    def validate(self):
        check_in_range("resolution", self.resolution, 0.05, 1.00)
        check_in_range("sigma", self.sigma, 0.1, 6.0)
        for name in ("window_gf", "window_mf"):
            window = getattr(self, name)
            check_odd(name, window)
            check_in_range(name, window, 3, 41)
        return self


def build_chm(normalized_cloud, resolution):
    """Rasterize a height-normalized cloud into a canopy height model.

    Every populated cell takes the maximum point height inside it; empty
    cells are filled by interpolation from populated neighbors. Cells
    below ``BACKGROUND_HEIGHT`` are flagged background.
    """
    check_positive("resolution", resolution)
    if normalized_cloud.point_count == 0:
        raise ValueError("cloud is empty")
    xyz = normalized_cloud.xyz
    ox, oy = xyz[:, 0].min(), xyz[:, 1].min()
    ncols = int((xyz[:, 0].max() - ox) / resolution) + 1
    nrows = int((xyz[:, 1].max() - oy) / resolution) + 1
    col = np.clip(((xyz[:, 0] - ox) / resolution).astype(np.intp), 0, ncols - 1)
    row = np.clip(((xyz[:, 1] - oy) / resolution).astype(np.intp), 0, nrows - 1)
    grid = np.full((nrows, ncols), -np.inf)
    np.maximum.at(grid, (row, col), xyz[:, 2])
    grid[np.isinf(grid)] = np.nan
    grid = fill_empty_cells(grid)
    return Raster(
        origin_xy=(ox, oy),
        resolution=resolution,
        values=grid,
        background=grid < BACKGROUND_HEIGHT,
    )


def gaussian_smooth(chm, sigma, window):
    """Smooth a raster with a truncated Gaussian, honoring background.

    Background cells contribute nothing and are passed through unchanged;
    for the remaining cells the kernel is renormalized over the
    non-background support inside the window (likewise at raster edges),
    so constant surfaces are preserved exactly.
    """
    check_positive("sigma", sigma)
    check_odd("window", window)
    half = window // 2
    offsets = np.arange(-half, half + 1)
    kernel1d = np.exp(-(offsets**2) / (2.0 * sigma**2))

    support = (~chm.background).astype(np.float64)
    masked = np.where(chm.background, 0.0, chm.values)

    def conv2(grid):
        tmp = ndimage.correlate1d(grid, kernel1d, axis=0, mode="constant", cval=0.0)
        return ndimage.correlate1d(tmp, kernel1d, axis=1, mode="constant", cval=0.0)

    num = conv2(masked)
    den = conv2(support)
    smoothed = np.where(den > 0, num / np.where(den > 0, den, 1.0), chm.values)
    smoothed = np.where(chm.background, chm.values, smoothed)
    return Raster(
        origin_xy=chm.origin_xy,
        resolution=chm.resolution,
        values=smoothed,
        background=chm.background,
    )


def find_local_maxima(chm, window):
    """Cells that survive a window maximum filter, as treetop candidates.

    A cell qualifies iff it is non-background and equals the maximum over
    its window neighborhood. Equal-valued connected plateaus (8-neighbor
    connectivity) are collapsed to their lexicographically smallest cell.

    Returns:
        List of ((row, col), height), sorted by (row, col).
    """
    check_odd("window", window)
    masked = np.where(chm.background, -np.inf, chm.values)
    filtered = ndimage.maximum_filter(masked, size=window, mode="constant", cval=-np.inf)
    candidates = (~chm.background) & (masked == filtered)
    if not candidates.any():
        return []
    eight = np.ones((3, 3), dtype=bool)
    result = []
    for value in np.unique(chm.values[candidates]):
        level = candidates & (chm.values == value)
        labeled, n_comp = ndimage.label(level, structure=eight)
        for comp in range(1, n_comp + 1):
            rows, cols = np.nonzero(labeled == comp)
            best = np.lexsort((cols, rows))[0]
            result.append(((int(rows[best]), int(cols[best])), float(value)))
    result.sort(key=lambda item: item[0])
    return result


def flood_from_markers(chm, markers):
    """Marker-controlled watershed by priority flooding.

    Each marker seeds one label; cells are claimed in descending raster
    value (ties broken by (row, col)), spreading to 4-connected,
    non-background, unclaimed neighbors. Background cells are never
    labeled.

    Returns:
        (nrows, ncols) int32 label grid, 0 = unlabeled.
    """
    labels = np.zeros(chm.shape, dtype=np.int32)
    values = chm.values
    bg = chm.background
    heap = []
    for label, (row, col) in enumerate(markers, start=1):
        if bg[row, col]:
            continue
        labels[row, col] = label
        heapq.heappush(heap, (-values[row, col], row, col))
    nrows, ncols = chm.shape
    while heap:
        _, row, col = heapq.heappop(heap)
        label = labels[row, col]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if 0 <= r < nrows and 0 <= c < ncols and not bg[r, c] and labels[r, c] == 0:
                labels[r, c] = label
                heapq.heappush(heap, (-values[r, c], r, c))
    return labels


def watershed_its(cloud, ground, params=None):
    """Segment trees by watershed on a smoothed canopy height model.

    Pipeline: height-normalize, rasterize to a CHM, Gaussian-smooth,
    detect treetop markers with a maximum filter, flood crown labels from
    the markers, then give every 3D point over a labeled crown cell that
    crown's instance id. Points over background cells stay unassigned.
    Finding no treetops yields an empty segmentation rather than an error.
    """
    params = (params or WatershedParams()).validate()
    normalized = normalize_heights(cloud, ground)
    chm = build_chm(normalized, params.resolution)
    smoothed = gaussian_smooth(chm, params.sigma, params.window_gf)
    maxima = find_local_maxima(smoothed, params.window_mf)
    if not maxima:
        return Segmentation(labels=np.zeros(cloud.point_count, dtype=np.int32))
    crowns = flood_from_markers(smoothed, [cell for cell, _ in maxima])
    row, col = smoothed.cell_of(cloud.x, cloud.y)
    return Segmentation(labels=crowns[row, col])


def write_ascii_grid(raster, path, nodata=-9999.0):
    """Write a raster as an ASCII grid for external inspection.

    Background cells are written as the nodata value; rows are emitted
    north to south per the format convention.
    """
    values = np.where(raster.background, nodata, raster.values)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"ncols {raster.width}\n")
        fh.write(f"nrows {raster.height}\n")
        fh.write(f"xllcorner {raster.origin_xy[0]!r}\n")
        fh.write(f"yllcorner {raster.origin_xy[1]!r}\n")
        fh.write(f"cellsize {raster.resolution!r}\n")
        fh.write(f"NODATA_value {nodata!r}\n")
        for row in values[::-1]:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
