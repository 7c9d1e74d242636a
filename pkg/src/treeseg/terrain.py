"""Ground surface estimation and point height normalization.

The ground surface is modeled as a regular grid of elevations queried with
continuous piecewise-bilinear interpolation. Estimation takes the per-cell
minimum z after discarding cell-local low outliers, then fills empty cells
from their populated neighbors, so no cloth simulation or external terrain
product is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import griddata

from ._validation import check_positive


class ExtentError(ValueError):
    """Raised when a query falls outside the ground model's footprint."""


@dataclass(frozen=True)
class GroundModel:
    """Gridded ground elevations with bilinear query.

    Attributes:
        origin_xy: world coordinates of the grid's lower-left corner.
        cell_size: cell edge length in meters.
        elevation: (nrows, ncols) float64 grid; row 0 is the southernmost
            row. Every cell is finite.
    """

    origin_xy: tuple
    cell_size: float
    elevation: np.ndarray

    def __post_init__(self):
        check_positive("cell_size", self.cell_size)
        elev = np.asarray(self.elevation, dtype=np.float64)
        if elev.ndim != 2 or elev.size == 0:
            raise ValueError("elevation must be a non-empty 2D grid")
        if not np.isfinite(elev).all():
            raise ValueError("elevation grid contains non-finite cells")
        elev = elev.copy()
        elev.flags.writeable = False
        object.__setattr__(self, "elevation", elev)
        ox, oy = self.origin_xy
        object.__setattr__(self, "origin_xy", (float(ox), float(oy)))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def shape(self):
        return self.elevation.shape

    @property
    def extent(self):
        """(xmin, ymin, xmax, ymax) covered by the grid."""
        nrows, ncols = self.elevation.shape
        ox, oy = self.origin_xy
        return (ox, oy, ox + ncols * self.cell_size, oy + nrows * self.cell_size)

    def query(self, x, y):
        """Ground elevation at (x, y) via bilinear interpolation.

        Interpolation runs between cell centers; within the outer half-cell
        band the edge value is held, keeping the surface continuous over the
        whole extent.

        Raises:
            ExtentError: any query point outside the grid footprint
                (beyond a 1e-9 tolerance).
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        xmin, ymin, xmax, ymax = self.extent
        eps = 1e-9 * max(1.0, xmax - xmin, ymax - ymin)
        if ((x < xmin - eps) | (x > xmax + eps) | (y < ymin - eps) | (y > ymax + eps)).any():
            raise ExtentError(
                f"query outside ground extent {self.extent}"
            )
        nrows, ncols = self.elevation.shape
        # Fractional cell-center coordinates, clamped to the center lattice.
        cx = np.clip((x - self.origin_xy[0]) / self.cell_size - 0.5, 0, ncols - 1)
        cy = np.clip((y - self.origin_xy[1]) / self.cell_size - 0.5, 0, nrows - 1)
        c0 = np.clip(np.floor(cx).astype(np.intp), 0, max(ncols - 2, 0))
        r0 = np.clip(np.floor(cy).astype(np.intp), 0, max(nrows - 2, 0))
        c1 = np.minimum(c0 + 1, ncols - 1)
        r1 = np.minimum(r0 + 1, nrows - 1)
        fx = cx - c0
        fy = cy - r0
        e = self.elevation
        top = e[r0, c0] * (1 - fx) + e[r0, c1] * fx
        bot = e[r1, c0] * (1 - fx) + e[r1, c1] * fx
        return top * (1 - fy) + bot * fy

    def to_raster(self):
        """Export the elevation grid as a single-band raster."""
        from .raster import Raster

        return Raster(
            origin_xy=self.origin_xy,
            resolution=self.cell_size,
            values=self.elevation.copy(),
        )


def fill_empty_cells(values):
    """Fill NaN cells of a grid from populated ones.

    Interior holes are filled by linear (barycentric) interpolation between
    populated cell centers; cells outside their convex hull take the nearest
    populated value. At least one populated cell is required.
    """
    values = np.asarray(values, dtype=np.float64)
    filled = values.copy()
    holes = np.isnan(values)
    if not holes.any():
        return filled
    known = ~holes
    if not known.any():
        raise ValueError("grid has no populated cells")
    kr, kc = np.nonzero(known)
    hr, hc = np.nonzero(holes)
    points = np.column_stack([kr, kc])
    targets = np.column_stack([hr, hc])
    if known.sum() >= 4:
        interp = griddata(points, values[known], targets, method="linear")
    else:
        interp = np.full(len(targets), np.nan)
    missing = np.isnan(interp)
    if missing.any():
        interp[missing] = griddata(
            points, values[known], targets[missing], method="nearest"
        )
    filled[hr, hc] = interp
    return filled


def estimate_ground(cloud, cell_size=1.0):
    """Estimate a ground surface from the lowest returns per grid cell.

    Within each populated cell, points more than 0.5 m below the cell's
    1st z-percentile are treated as low outliers and ignored; the cell's
    ground is the minimum z of the remainder. Empty cells are filled by
    interpolation from populated ones.
    """
    check_positive("cell_size", cell_size)
    if cloud.point_count == 0:
        raise ValueError("cloud is empty")
    xyz = cloud.xyz
    ox, oy = xyz[:, 0].min(), xyz[:, 1].min()
    ncols = int((xyz[:, 0].max() - ox) / cell_size) + 1
    nrows = int((xyz[:, 1].max() - oy) / cell_size) + 1
    col = np.clip(((xyz[:, 0] - ox) / cell_size).astype(np.intp), 0, ncols - 1)
    row = np.clip(((xyz[:, 1] - oy) / cell_size).astype(np.intp), 0, nrows - 1)
    flat = row * ncols + col
    grid = np.full(nrows * ncols, np.nan)
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(nrows * ncols + 1))
    for cell in np.unique(flat):
        zs = xyz[order[bounds[cell] : bounds[cell + 1]], 2]
        floor = np.percentile(zs, 1) - 0.5
        kept = zs[zs >= floor]
        grid[cell] = kept.min() if kept.size else zs.min()
    return GroundModel(
        origin_xy=(ox, oy),
        cell_size=cell_size,
        elevation=fill_empty_cells(grid.reshape(nrows, ncols)),
    )


def normalize_heights(cloud, ground):
    """Subtract the ground elevation from every point's z-coordinate.

    All non-z attributes, point count and ordering are preserved, so the
    operation is inverted exactly by :func:`denormalize_heights` with the
    same model.

    Raises:
        ExtentError: the cloud extends beyond the ground model.
    """
    offsets = ground.query(cloud.x, cloud.y)
    xyz = cloud.xyz.copy()
    xyz[:, 2] -= offsets
    return cloud.with_xyz(xyz)


def denormalize_heights(cloud, ground):
    """Restore raw z-coordinates removed by :func:`normalize_heights`."""
    offsets = ground.query(cloud.x, cloud.y)
    xyz = cloud.xyz.copy()
    xyz[:, 2] += offsets
    return cloud.with_xyz(xyz)
