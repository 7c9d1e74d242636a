"""Adaptive mean-shift tree segmentation with small-segment merging.

Every point ascends the local density surface under a cylindrical,
height-adaptive kernel: the cylinder's radius and half-height grow
linearly with the height of the current position, matching how crown
diameter and depth scale with tree size. Points whose trajectories end at
the same mode form one candidate tree; undersized fragments are then
folded into their nearest neighbor segment, and labels are propagated
from the thinned working cloud back to full density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_in_range, check_positive
from .cloud import PlotGeometry, downsample_to_density, nearest_neighbor_transfer
from .evaluation import Segmentation
from .terrain import normalize_heights

logger = logging.getLogger(__name__)

#: Normalized height below which points count as ground returns and are
#: excluded from clustering (stand-in for an explicit ground classifier).
GROUND_FLOOR = 0.5

#: Weight of the vertical component in the fragment-merging distance.
VERTICAL_MERGE_WEIGHT = 2.0

#: Fraction of the kernel bandwidth within which two modes coalesce.
MODE_GROUPING_FRACTION = 0.5

_STATUS_CONVERGED = "converged"
_STATUS_MAX_ITER = "max_iter"
_STATUS_EMPTY = "empty"


@dataclass(frozen=True)
class AMS3DParams:
    """Adaptive mean-shift parameters.

    Attributes:
        s_s: horizontal bandwidth slope (kernel radius per meter of
            height), in [0, 1].
        s_z: vertical bandwidth slope (kernel half-height per meter of
            height), in [0, 1].
        work_density: target density (points/m²) of the working cloud the
            clustering runs on; labels are propagated back afterwards.
        merge_min_points: segments below this size enter fragment merging.
        merge_dist_thresh: distance gate for fragment merging (meters).
    """

    s_s: float = 0.3
    s_z: float = 0.4
    work_density: float = 100.0
    merge_min_points: int = 50
    merge_dist_thresh: float = 2.0

    def validate(self):
        check_in_range("s_s", self.s_s, 0.0, 1.0)
        check_in_range("s_z", self.s_z, 0.0, 1.0)
        check_positive("work_density", self.work_density)
        if self.merge_min_points < 0:
            raise ValueError("merge_min_points must be non-negative")
        check_positive("merge_dist_thresh", self.merge_dist_thresh)
        return self


def _shift_batch(positions, xyz, tree2d, s_s, s_z, tol, max_iter, trace=None):
    """Run mean-shift iterations for many start positions at once.

    Returns final positions and a status string per trajectory. ``trace``,
    when given, collects the position after every iteration (single
    trajectory only).
    """
    pos = np.array(positions, dtype=np.float64)
    m = len(pos)
    status = np.full(m, _STATUS_MAX_ITER, dtype=object)
    active = np.ones(m, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        if trace is not None and m == 1:
            trace.append(pos[0].copy())
        idx = np.flatnonzero(active)
        cur = pos[idx]
        h_s = s_s * cur[:, 2]
        h_z = s_z * cur[:, 2]
        empty = (h_s <= 0) | (h_z <= 0)
        if empty.any():
            status[idx[empty]] = _STATUS_EMPTY
            active[idx[empty]] = False
            idx = idx[~empty]
            cur, h_s, h_z = cur[~empty], h_s[~empty], h_z[~empty]
            if len(idx) == 0:
                continue
        hoods = tree2d.query_ball_point(cur[:, :2], r=h_s)
        counts = np.fromiter((len(h) for h in hoods), dtype=np.intp, count=len(hoods))
        flat = np.concatenate([np.asarray(h, dtype=np.intp) for h in hoods]) if counts.sum() else np.empty(0, dtype=np.intp)
        owner = np.repeat(np.arange(len(idx)), counts)
        d_h2 = ((xyz[flat, :2] - cur[owner, :2]) ** 2).sum(axis=1)
        d_z = xyz[flat, 2] - cur[owner, 2]
        w = np.maximum(0.0, 1.0 - d_h2 / h_s[owner] ** 2) * np.maximum(
            0.0, 1.0 - (d_z / h_z[owner]) ** 2
        )
        den = np.zeros(len(idx))
        num = np.zeros((len(idx), 3))
        np.add.at(den, owner, w)
        np.add.at(num, owner, w[:, None] * xyz[flat])
        supported = den > 0
        status[idx[~supported]] = _STATUS_EMPTY
        active[idx[~supported]] = False
        moved = idx[supported]
        new = num[supported] / den[supported, None]
        step = np.linalg.norm(new - pos[moved], axis=1)
        pos[moved] = new
        done = step < tol
        status[moved[done]] = _STATUS_CONVERGED
        active[moved[done]] = False
    return pos, status


def mean_shift_converge(start, cloud, s_s, s_z, tol=1e-3, max_iter=100, trace=None):
    """Ascend to the nearest density mode from one start position.

    The kernel is a cylinder whose radius (``s_s * z``) and half-height
    (``s_z * z``) follow the current position's height, with a parabolic
    falloff in both the horizontal and vertical direction. Iteration stops
    when the shift drops below ``tol`` or after ``max_iter`` steps.
    ``trace``, when given, receives the position at the start of every
    iteration.

    Returns:
        (position, status): final xyz and one of ``converged``,
        ``max_iter``, or ``empty`` (no points under the kernel; position
        is the start unchanged).
    """
    check_positive("s_s", s_s)
    check_positive("s_z", s_z)
    if cloud.point_count == 0:
        raise ValueError("cloud is empty")
    tree2d = cKDTree(cloud.xyz[:, :2])
    pos, status = _shift_batch(
        np.asarray(start, dtype=np.float64)[None, :],
        cloud.xyz,
        tree2d,
        s_s,
        s_z,
        tol,
        max_iter,
        trace=trace,
    )
    return pos[0], str(status[0])


def _group_modes(modes, s_s, s_z):
    """Union modes lying within half a bandwidth of each other.

    The tolerance is evaluated at the lower of the two modes, horizontally
    (``0.5 * s_s * z``) and vertically (``0.5 * s_z * z``).
    """
    m = len(modes)
    parent = np.arange(m)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = cKDTree(modes[:, :2])
    radii = np.maximum(MODE_GROUPING_FRACTION * s_s * modes[:, 2], 0.0)
    for i in range(m):
        if radii[i] <= 0:
            continue
        for j in tree.query_ball_point(modes[i, :2], r=radii[i]):
            if j <= i:
                continue
            z_low = min(modes[i, 2], modes[j, 2])
            tol_h = MODE_GROUPING_FRACTION * s_s * z_low
            tol_v = MODE_GROUPING_FRACTION * s_z * z_low
            d_h = np.hypot(*(modes[i, :2] - modes[j, :2]))
            if d_h <= tol_h and abs(modes[i, 2] - modes[j, 2]) <= tol_v:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(m)])
    labels = np.zeros(m, dtype=np.int32)
    next_id = 1
    for i in range(m):
        if roots[i] == i:
            labels[i] = next_id
            next_id += 1
    return labels[roots]


def merge_small_segments(seg, cloud, ground, min_points, dist_thresh):
    """Fold undersized segments into their nearest neighbor segment.

    Fragments are visited smallest first. A fragment merges when the
    weighted distance (horizontal plus ``VERTICAL_MERGE_WEIGHT`` times
    vertical, in ground-relative coordinates) from its center to the
    closest point of the nearest other segment is below ``dist_thresh`` or
    below the fragment center's own height above ground (a fragment
    hanging closer to a canopy than to the ground belongs to that canopy);
    otherwise it is struck off the worklist and kept as is. The instance
    count never increases.

    ``ground`` may be None when the cloud is already height-normalized.
    """
    labels = seg.labels.copy()
    height = cloud.z if ground is None else cloud.z - ground.query(cloud.x, cloud.y)
    coords = np.column_stack([cloud.x, cloud.y, height])

    def segment_stats():
        out = {}
        for instance in np.unique(labels):
            if instance == 0:
                continue
            idx = np.flatnonzero(labels == instance)
            out[int(instance)] = (len(idx), coords[idx].mean(axis=0), idx)
        return out

    def center_to_segment(center, idx):
        pts = coords[idx]
        d = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
        d += VERTICAL_MERGE_WEIGHT * np.abs(pts[:, 2] - center[2])
        return float(d.min())

    dropped = set()
    info = segment_stats()
    while True:
        worklist = sorted(
            (
                (count, instance)
                for instance, (count, _, _) in info.items()
                if count < min_points and instance not in dropped
            )
        )
        if not worklist:
            break
        _, fragment = worklist[0]
        others = [i for i in info if i != fragment]
        if not others:
            dropped.add(fragment)
            continue
        center = info[fragment][1]
        d_min, nearest = min(
            (center_to_segment(center, info[other][2]), other) for other in others
        )
        if d_min < dist_thresh or d_min < center[2]:
            labels[labels == fragment] = nearest
            info = segment_stats()
        else:
            dropped.add(fragment)
    return Segmentation(labels=labels)


def ams3d_segment(cloud, ground, params=None, seed=0, plot=None):
    """Segment trees by adaptive mean shift over a thinned working cloud.

    Pipeline: height-normalize; thin to ``work_density`` (area taken from
    ``plot`` when given, else from the xy bounding box); drop ground
    returns below ``GROUND_FLOOR``; converge every remaining point to its
    density mode; group coincident modes into candidate segments; fold in
    undersized fragments; finally propagate labels to every above-floor
    point of the full cloud through nearest-neighbor transfer.
    """
    params = (params or AMS3DParams()).validate()
    n = cloud.point_count
    if n == 0:
        return Segmentation(labels=np.zeros(0, dtype=np.int32))
    if plot is None:
        spans = cloud.xyz[:, :2].max(axis=0) - cloud.xyz[:, :2].min(axis=0)
        area = float(max(spans[0] * spans[1], 1e-9))
        plot = PlotGeometry(center_xy=(0.0, 0.0), radius=np.sqrt(area / np.pi))
    work = downsample_to_density(cloud, plot, params.work_density, seed)
    work_norm = normalize_heights(work, ground)
    veg_mask = work_norm.z >= GROUND_FLOOR
    if params.s_s <= 0 or params.s_z <= 0 or not veg_mask.any():
        return Segmentation(labels=np.zeros(n, dtype=np.int32))
    veg = work_norm.subset(np.flatnonzero(veg_mask))

    tree2d = cKDTree(veg.xyz[:, :2])
    modes, status = _shift_batch(
        veg.xyz, veg.xyz, tree2d, params.s_s, params.s_z, tol=1e-3, max_iter=100
    )
    n_unconverged = int((status == _STATUS_MAX_ITER).sum())
    if n_unconverged:
        logger.debug("%d trajectories stopped at the iteration cap", n_unconverged)
    work_labels = _group_modes(modes, params.s_s, params.s_z)

    merged = merge_small_segments(
        Segmentation(labels=work_labels),
        veg,
        None,
        params.merge_min_points,
        params.merge_dist_thresh,
    )

    full_norm = normalize_heights(cloud, ground)
    source = veg.with_instance_ids(merged.labels)
    above = np.flatnonzero(full_norm.z >= GROUND_FLOOR)
    labels = np.zeros(n, dtype=np.int32)
    if len(above):
        labels[above] = nearest_neighbor_transfer(source, full_norm.subset(above))
    return Segmentation(labels=labels).compact()
