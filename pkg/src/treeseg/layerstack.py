"""Layer-stacking tree segmentation.

The cloud is sliced into 1 m height bands, each band is clustered in the
xy-plane around canopy-model treetops, and the clusters are buffered into
polygons. Stacking those polygons yields an overlap map whose peaks mark
probable stems; small discs around the peaks become tree cores. A second
clustering pass, run at three progressively finer overlap-map resolutions,
produces the final polygons, which are filtered (oversized or ambiguously
assigned ones removed) and attached to the core they overlap; a tree is
the union of points inside its core's polygons across all layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import MultiPoint, Point

from ._validation import check_in_range, check_int_in_range, check_positive
from .evaluation import Segmentation
from .raster import Raster, build_chm, find_local_maxima
from .terrain import normalize_heights

#: Points below this normalized height are treated as ground returns and
#: never enter a layer (understory floor guard).
LAYER_FLOOR = 0.5

#: Height of one layer slice in meters.
LAYER_THICKNESS = 1.0

#: DBSCAN settings for the optional understory filter on the lowest layers.
DBSCAN_EPS = 0.5
DBSCAN_MIN_POINTS = 10

#: Normalized height below which the DBSCAN understory filter applies.
UNDERSTORY_CEILING = 2.0

_KMEANS_TOL = 1e-4
_KMEANS_MAX_ITER = 50


@dataclass(frozen=True)
class LayerStackParams:
    """Layer-stacking parameters.

    Attributes:
        resolution_coarse: coarsest overlap-map cell size (m), in
            [0.05, 1.00]; the two refinement passes halve and quarter it.
        filter_cutoff: polygons larger than this multiple of their layer's
            median area are discarded, in [2.5, 3.5].
        dbscan_filter: apply the DBSCAN understory filter to the lowest
            layers.
        buffer_width: dilation of cluster hulls into polygons (m), in
            [0.1, 1.5].
        core_width: radius of the tree-core discs (m), in [0.1, 1.0].
        window: max-filter window (cells) for raster peak detection, in
            [1, 15]; even values are widened to the next odd size.
    """

    resolution_coarse: float = 1.0
    filter_cutoff: float = 3.5
    dbscan_filter: bool = True
    buffer_width: float = 0.6
    core_width: float = 0.6
    window: int = 3

    def validate(self):
        check_in_range("resolution_coarse", self.resolution_coarse, 0.05, 1.00)
        check_in_range("filter_cutoff", self.filter_cutoff, 2.5, 3.5)
        check_in_range("buffer_width", self.buffer_width, 0.1, 1.5)
        check_in_range("core_width", self.core_width, 0.1, 1.0)
        check_int_in_range("window", self.window, 1, 15)
        if not isinstance(self.dbscan_filter, (bool, np.bool_)):
            raise ValueError("dbscan_filter must be a boolean")
        return self


@dataclass(frozen=True)
class LayerPolygon:
    """Buffered footprint of one cluster within one height layer."""

    layer: int
    polygon: shapely.Geometry
    cluster_size: int

    def __post_init__(self):
        if not self.polygon.is_valid or self.polygon.area <= 0:
            raise ValueError("polygon must be simple with positive area")


def slice_layers(normalized_cloud):
    """Partition a height-normalized cloud into 1 m bands.

    Band ``i`` holds the ordinals of points with height in
    ``[i, i + 1)``; points below ``LAYER_FLOOR`` are dropped. The list
    spans every band up to the highest point (possibly with empty bands).
    """
    z = normalized_cloud.z
    keep = z >= LAYER_FLOOR
    if not keep.any():
        return []
    n_layers = int(z[keep].max() // LAYER_THICKNESS) + 1
    layers = [np.empty(0, dtype=np.intp) for _ in range(n_layers)]
    band = (z[keep] // LAYER_THICKNESS).astype(np.intp)
    ordinals = np.flatnonzero(keep)
    for i in np.unique(band):
        layers[i] = ordinals[band == i]
    return layers


def cluster_layer(points_xy, seeds):
    """Seeded Lloyd k-means over one layer's xy projection.

    Iterates to convergence (center shift below 1e-4 m) or 50 rounds,
    starting from the given seed centers; clusters that end up empty are
    dropped.

    Returns:
        List of member-ordinal arrays, one per non-empty cluster, ordered
        by seed.
    """
    seeds = np.asarray(seeds, dtype=np.float64)
    if seeds.ndim != 2 or len(seeds) == 0:
        raise ValueError("at least one seed is required")
    points_xy = np.asarray(points_xy, dtype=np.float64)
    centers = seeds.copy()
    assign = None
    for _ in range(_KMEANS_MAX_ITER):
        d2 = ((points_xy[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        shift = 0.0
        for k in range(len(centers)):
            members = points_xy[assign == k]
            if len(members):
                new = members.mean(axis=0)
                shift = max(shift, float(np.linalg.norm(new - centers[k])))
                centers[k] = new
        if shift < _KMEANS_TOL:
            break
    return [np.flatnonzero(assign == k) for k in range(len(centers)) if (assign == k).any()]


def buffer_cluster(points_xy, buffer_width):
    """Convex hull of a cluster dilated by the buffer width."""
    hull = MultiPoint([tuple(p) for p in np.asarray(points_xy)]).convex_hull
    return hull.buffer(buffer_width)


def build_overlap_map(polygons, resolution):
    """Count, per raster cell, the polygons whose interior covers its center."""
    check_positive("resolution", resolution)
    if not polygons:
        raise ValueError("at least one polygon is required")
    bounds = np.array([p.polygon.bounds for p in polygons])
    xmin, ymin = bounds[:, 0].min(), bounds[:, 1].min()
    xmax, ymax = bounds[:, 2].max(), bounds[:, 3].max()
    ncols = int((xmax - xmin) / resolution) + 1
    nrows = int((ymax - ymin) / resolution) + 1
    xs = xmin + (np.arange(ncols) + 0.5) * resolution
    ys = ymin + (np.arange(nrows) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    counts = np.zeros((nrows, ncols))
    for lp in polygons:
        counts += shapely.contains_xy(lp.polygon, gx, gy)
    return Raster(origin_xy=(xmin, ymin), resolution=resolution, values=counts)


def filter_oversized_polygons(polygons, cutoff):
    """Drop polygons larger than ``cutoff`` times their layer's median area."""
    by_layer = {}
    for lp in polygons:
        by_layer.setdefault(lp.layer, []).append(lp.polygon.area)
    medians = {layer: float(np.median(areas)) for layer, areas in by_layer.items()}
    return [lp for lp in polygons if lp.polygon.area <= cutoff * medians[lp.layer]]


def _odd_window(window):
    return window if window % 2 else window + 1


def _raster_peak_seeds(raster, window, floor=0.0):
    """World xy of raster local maxima with values above ``floor``."""
    background = raster.values <= floor
    if background.all():
        return np.empty((0, 2))
    masked = Raster(
        origin_xy=raster.origin_xy,
        resolution=raster.resolution,
        values=raster.values,
        background=background,
    )
    maxima = find_local_maxima(masked, _odd_window(window))
    cells = np.array([cell for cell, _ in maxima], dtype=np.intp)
    if len(cells) == 0:
        return np.empty((0, 2))
    x, y = masked.cell_center(cells[:, 0], cells[:, 1])
    return np.column_stack([x, y])


def _disjoint_cores(seeds, values, core_width):
    """Greedy disc placement: strongest peaks first, overlaps skipped."""
    order = np.argsort(-np.asarray(values), kind="stable")
    kept = []
    for i in order:
        center = seeds[i]
        if all(np.hypot(*(center - k)) >= 2 * core_width for k in kept):
            kept.append(center)
    return [Point(c).buffer(core_width) for c in kept]


def _understory_filter(cloud, layers):
    """Drop DBSCAN noise points from the lowest layers."""
    from sklearn.cluster import DBSCAN

    filtered = []
    for i, members in enumerate(layers):
        if i * LAYER_THICKNESS >= UNDERSTORY_CEILING or len(members) == 0:
            filtered.append(members)
            continue
        xy = cloud.xyz[members][:, :2]
        labels = DBSCAN(eps=DBSCAN_EPS, min_samples=DBSCAN_MIN_POINTS).fit_predict(xy)
        filtered.append(members[labels >= 0])
    return filtered


def layer_stacking_segment(cloud, ground, params=None, seed=0):
    """Segment trees by stacking per-layer cluster polygons over tree cores.

    ``seed`` is accepted for interface uniformity; the pipeline is
    deterministic (clustering is seeded by canopy maxima).
    """
    del seed
    params = (params or LayerStackParams()).validate()
    n = cloud.point_count
    empty = Segmentation(labels=np.zeros(n, dtype=np.int32))
    if n == 0:
        return empty
    normalized = normalize_heights(cloud, ground)
    chm = build_chm(normalized, params.resolution_coarse)
    chm_maxima = find_local_maxima(chm, _odd_window(params.window))
    if not chm_maxima:
        return empty
    cells = np.array([cell for cell, _ in chm_maxima], dtype=np.intp)
    seed_x, seed_y = chm.cell_center(cells[:, 0], cells[:, 1])
    chm_seeds = np.column_stack([seed_x, seed_y])

    layers = slice_layers(normalized)
    if params.dbscan_filter:
        layers = _understory_filter(normalized, layers)

    def polygons_from_seeds(seeds):
        out = []
        for layer_idx, members in enumerate(layers):
            if len(members) == 0:
                continue
            xy = normalized.xyz[members][:, :2]
            for cluster in cluster_layer(xy, seeds):
                out.append(
                    LayerPolygon(
                        layer=layer_idx,
                        polygon=buffer_cluster(xy[cluster], params.buffer_width),
                        cluster_size=len(cluster),
                    )
                )
        return out

    first_pass = polygons_from_seeds(chm_seeds)
    if not first_pass:
        return empty

    resolutions = [
        params.resolution_coarse,
        params.resolution_coarse / 2,
        params.resolution_coarse / 4,
    ]
    overlap_maps = [build_overlap_map(first_pass, r) for r in resolutions]

    coarse_seeds = _raster_peak_seeds(overlap_maps[0], params.window)
    if len(coarse_seeds) == 0:
        return empty
    rows, cols = overlap_maps[0].cell_of(coarse_seeds[:, 0], coarse_seeds[:, 1])
    peak_values = overlap_maps[0].values[rows, cols]
    cores = _disjoint_cores(coarse_seeds, peak_values, params.core_width)

    polygons = []
    for overlap in overlap_maps:
        seeds = _raster_peak_seeds(overlap, params.window)
        if len(seeds):
            polygons.extend(polygons_from_seeds(seeds))
    polygons = filter_oversized_polygons(polygons, params.filter_cutoff)

    labels = np.zeros(n, dtype=np.int32)
    for lp in polygons:
        touching = [ci for ci, core in enumerate(cores) if lp.polygon.intersects(core)]
        if len(touching) != 1:
            continue
        members = layers[lp.layer]
        if len(members) == 0:
            continue
        xy = normalized.xyz[members][:, :2]
        inside = shapely.covers(lp.polygon, shapely.points(xy))
        labels[members[inside]] = touching[0] + 1
    return Segmentation(labels=labels).compact()
