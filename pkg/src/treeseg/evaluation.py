"""Instance matching, accuracy metrics, and per-tree geometry.

Ground-truth and predicted segmentations are compared by 3D IoU over point
sets: each ground-truth instance is matched to its best-overlapping
prediction above an IoU threshold, and precision/recall/F1, coverage,
per-crown-category recall, and (for confidence-scored predictions) average
precision are derived from the matching. Tree locations, heights, and crown
dominance categories are computed directly from the labeled points.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

#: Crown span below the instance apex used for locating trees (meters).
CROWN_DEPTH = 3.0

#: Apex gap above which the top point is treated as an outlier (meters).
APEX_OUTLIER_GAP = 0.25

#: Radius of the ground disc used for tree height estimation (meters).
GROUND_DISC_RADIUS = 0.5

#: Trees closer than this in the xy-plane are neighbors (meters).
NEIGHBOR_DISTANCE = 3.0

#: Height margin that makes a neighbor dominant (meters).
DOMINANCE_MARGIN = 2.0

#: Distance splitting categories C and D for dominated trees (meters).
UNDERSTORY_DISTANCE = 1.5

CROWN_CATEGORIES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class Segmentation:
    """Per-point instance labeling, optionally with per-instance confidence.

    Attributes:
        labels: (n,) int32 instance ids; 0 marks unassigned points.
        confidence: optional {instance_id: score in [0, 1]}; when present it
            must cover every nonzero instance exactly.
    """

    labels: np.ndarray
    confidence: dict = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.ndim != 1:
            raise ValueError(f"labels must be 1D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("instance labels must be non-negative")
        labels = labels.copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.confidence is not None:
            ids = set(np.unique(labels[labels > 0]).tolist())
            conf = {int(k): float(v) for k, v in self.confidence.items()}
            if set(conf) != ids:
                raise ValueError("confidence must cover every instance exactly")
            if any(not 0.0 <= v <= 1.0 for v in conf.values()):
                raise ValueError("confidence values must lie in [0, 1]")
            object.__setattr__(self, "confidence", conf)

    @property
    def point_count(self):
        return self.labels.shape[0]

    def instance_ids(self):
        """Sorted nonzero instance ids."""
        ids = np.unique(self.labels)
        return ids[ids > 0]

    def instances(self):
        """Return {instance_id: point count} for nonzero instances."""
        ids, counts = np.unique(self.labels, return_counts=True)
        keep = ids > 0
        return dict(zip(ids[keep].tolist(), counts[keep].tolist()))

    def instance_indices(self, instance):
        return np.flatnonzero(self.labels == instance)

    def compact(self):
        """Renumber instances to 1..K in ascending original-id order."""
        ids = self.instance_ids()
        mapping = {int(old): new for new, old in enumerate(ids, start=1)}
        labels = np.zeros_like(self.labels)
        for old, new in mapping.items():
            labels[self.labels == old] = new
        conf = None
        if self.confidence is not None:
            conf = {mapping[old]: score for old, score in self.confidence.items()}
        return Segmentation(labels=labels, confidence=conf)


@dataclass(frozen=True)
class MatchResult:
    """Unique gt-to-prediction correspondence at an IoU threshold.

    Attributes:
        pairs: list of (gt_id, pred_id, iou), one pred per gt at most.
        unmatched_gt: gt ids with no qualifying prediction (false negatives).
        unmatched_pred: prediction ids matched to no gt (false positives).
        max_iou: {gt_id: best IoU over all predictions}, sub-threshold
            values included.
    """

    pairs: tuple
    unmatched_gt: tuple
    unmatched_pred: tuple
    max_iou: dict

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.unmatched_pred)

    @property
    def fn(self):
        return len(self.unmatched_gt)


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate segmentation accuracy metrics."""

    precision: float
    recall: float
    f1: float
    coverage: float
    ap50: float = None
    recall_by_category: dict = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_dict(self):
        """Flatten to the report schema (exactly the protocol's fields)."""
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "coverage": self.coverage,
            "ap50": self.ap50,
        }
        for cat in CROWN_CATEGORIES:
            out[f"recall_{cat}"] = self.recall_by_category.get(cat)
        out.update({"tp": self.tp, "fp": self.fp, "fn": self.fn})
        return out


@dataclass(frozen=True)
class TreeRecord:
    """Location, height and crown category of one ground-truth tree."""

    instance_id: int
    x: float
    y: float
    height: float
    category: str = None


def compute_iou(gt_points, pred_points):
    """Intersection over union of two point-ordinal sets.

    Raises:
        ValueError: both sets empty.
    """
    gt = {int(v) for v in gt_points}
    pred = {int(v) for v in pred_points}
    if not gt and not pred:
        raise ValueError("IoU of two empty sets is undefined")
    inter = len(gt & pred)
    return inter / (len(gt) + len(pred) - inter)


def _overlap_table(gt_labels, pred_labels):
    """Per-(gt, pred) intersection counts and per-id sizes, zeros ignored."""
    gt_labels = np.asarray(gt_labels)
    pred_labels = np.asarray(pred_labels)
    if gt_labels.shape != pred_labels.shape:
        raise ValueError("gt and pred must label the same points")
    gt_ids, gt_counts = np.unique(gt_labels[gt_labels > 0], return_counts=True)
    pred_ids, pred_counts = np.unique(pred_labels[pred_labels > 0], return_counts=True)
    overlaps = {}
    both = (gt_labels > 0) & (pred_labels > 0)
    if both.any():
        stride = int(pred_labels.max()) + 1
        pair_key = gt_labels[both].astype(np.int64) * stride + pred_labels[both]
        keys, inter = np.unique(pair_key, return_counts=True)
        for key, count in zip(keys, inter):
            overlaps[(int(key // stride), int(key % stride))] = int(count)
    return (
        dict(zip(gt_ids.tolist(), gt_counts.tolist())),
        dict(zip(pred_ids.tolist(), pred_counts.tolist())),
        overlaps,
    )


def match_instances(gt, pred, iou_thresh=0.5):
    """Match each gt instance to its highest-IoU prediction above a threshold.

    At thresholds of 0.5 and above the matching is automatically unique;
    below that a prediction claimed by several gt instances keeps only its
    highest-IoU pairing and the other claims are dropped. Per-gt best IoU is
    reported for every gt instance, including sub-threshold values.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    gt_sizes, pred_sizes, overlaps = _overlap_table(gt.labels, pred.labels)
    max_iou = {g: 0.0 for g in gt_sizes}
    best_pred = {}
    for (g, p), inter in overlaps.items():
        iou = inter / (gt_sizes[g] + pred_sizes[p] - inter)
        # Ties between predictions resolve to the lowest prediction id.
        if iou > max_iou[g] or (iou == max_iou[g] and g in best_pred and p < best_pred[g]):
            best_pred[g] = p
        max_iou[g] = max(max_iou[g], iou)

    claims = {}
    for g in sorted(gt_sizes):
        if max_iou[g] >= iou_thresh:
            claims.setdefault(best_pred[g], []).append(g)
    pairs = []
    for p, claimants in claims.items():
        winner = max(claimants, key=lambda g: (max_iou[g], -g))
        pairs.append((winner, p, max_iou[winner]))
    pairs.sort()
    matched_gt = {g for g, _, _ in pairs}
    matched_pred = {p for _, p, _ in pairs}
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_gt=tuple(g for g in sorted(gt_sizes) if g not in matched_gt),
        unmatched_pred=tuple(p for p in sorted(pred_sizes) if p not in matched_pred),
        max_iou=max_iou,
    )


def compute_metrics(match, tree_records=None, ap50=None):
    """Derive precision/recall/F1, coverage and per-category recall.

    Coverage averages each gt instance's best IoU, counting sub-threshold
    values. Category recall only uses gt instances of that category and is
    ``None`` for categories with no trees (or when no records are given).
    """
    tp, fp, fn = match.tp, match.fp, match.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    coverage = float(np.mean(list(match.max_iou.values()))) if match.max_iou else 0.0
    recall_by_category = {cat: None for cat in CROWN_CATEGORIES}
    if tree_records:
        matched = {g for g, _, _ in match.pairs}
        for cat in CROWN_CATEGORIES:
            ids = [r.instance_id for r in tree_records if r.category == cat]
            if ids:
                recall_by_category[cat] = sum(i in matched for i in ids) / len(ids)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        coverage=coverage,
        ap50=ap50,
        recall_by_category=recall_by_category,
        tp=tp,
        fp=fp,
        fn=fn,
    )


def _confidence_matching(gt, pred, iou_thresh):
    """Greedy matching for average precision.

    Each gt instance claims the highest-confidence overlapping prediction
    whose IoU meets the threshold; every prediction is claimed at most
    once. Returns the set of matched prediction ids.
    """
    gt_sizes, pred_sizes, overlaps = _overlap_table(gt.labels, pred.labels)
    conf = pred.confidence
    by_gt = {}
    for (g, p), inter in overlaps.items():
        iou = inter / (gt_sizes[g] + pred_sizes[p] - inter)
        by_gt.setdefault(g, []).append((p, iou))
    matched = set()
    for g in sorted(gt_sizes):
        candidates = sorted(by_gt.get(g, []), key=lambda pi: (-conf[pi[0]], pi[0]))
        for p, iou in candidates:
            if p in matched:
                continue
            if iou >= iou_thresh:
                matched.add(p)
                break
    return matched, gt_sizes, pred_sizes


def average_precision(gt, pred, iou_thresh=0.5):
    """Area under the precision-recall curve of confidence-ranked matching.

    Predictions are swept in descending confidence (equal scores enter
    together); precision is interpolated to its monotone non-increasing
    envelope before integrating over recall.

    Raises:
        ValueError: predictions carry no confidence scores.
    """
    if pred.confidence is None:
        raise ValueError("average precision requires per-instance confidence")
    matched, gt_sizes, pred_sizes = _confidence_matching(gt, pred, iou_thresh)
    n_gt = len(gt_sizes)
    if n_gt == 0:
        return 0.0
    ranked = sorted(pred_sizes, key=lambda p: (-pred.confidence[p], p))
    points = []
    tp = fp = 0
    i = 0
    while i < len(ranked):
        j = i
        score = pred.confidence[ranked[i]]
        while j < len(ranked) and pred.confidence[ranked[j]] == score:
            tp += ranked[j] in matched
            fp += ranked[j] not in matched
            j += 1
        points.append((tp / n_gt, tp / (tp + fp)))
        i = j
    ap = 0.0
    prev_recall = 0.0
    for k, (recall, _) in enumerate(points):
        envelope = max(p for _, p in points[k:])
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    return ap


def postfilter_segments(pred, cloud):
    """Drop predicted instances that are both tiny and short.

    An instance is removed iff it has fewer than 40 points and a vertical
    extent under 1.5 m; its points become unassigned.
    """
    labels = pred.labels.copy()
    conf = dict(pred.confidence) if pred.confidence is not None else None
    z = cloud.z
    for instance, count in pred.instances().items():
        idx = pred.instance_indices(instance)
        extent = z[idx].max() - z[idx].min()
        if count < 40 and extent < 1.5:
            labels[idx] = 0
            if conf is not None:
                conf.pop(instance, None)
    return Segmentation(labels=labels, confidence=conf)


def filter_small_gt(gt, min_points=5):
    """Reassign gt instances with fewer than ``min_points`` points to background."""
    if min_points < 1:
        raise ValueError(f"min_points must be >= 1, got {min_points}")
    labels = gt.labels.copy()
    for instance, count in gt.instances().items():
        if count < min_points:
            labels[labels == instance] = 0
    return Segmentation(labels=labels)


def tree_location(instance_xyz):
    """Locate a tree as the centroid of its crown's convex hull.

    The crown is the uppermost ``CROWN_DEPTH`` meters of the instance; the
    location is the area centroid of the 2D convex hull of those points.
    Degenerate hulls (fewer than 3 distinct points, or collinear) fall back
    to the mean crown position.
    """
    xyz = np.asarray(instance_xyz, dtype=np.float64)
    if xyz.size == 0:
        raise ValueError("instance has no points")
    crown = xyz[xyz[:, 2] >= xyz[:, 2].max() - CROWN_DEPTH]
    xy = crown[:, :2]
    if len(np.unique(xy, axis=0)) < 3:
        return tuple(xy.mean(axis=0))
    try:
        hull = ConvexHull(xy)
    except QhullError:
        return tuple(xy.mean(axis=0))
    verts = xy[hull.vertices]
    x, y = verts[:, 0], verts[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    area = cross.sum() / 2.0
    if abs(area) < 1e-12:
        return tuple(xy.mean(axis=0))
    cx = ((x + x1) * cross).sum() / (6.0 * area)
    cy = ((y + y1) * cross).sum() / (6.0 * area)
    return (float(cx), float(cy))


def tree_height(instance_xyz, non_tree_xyz, location):
    """Tree height from the apex down to the local ground minimum.

    The apex is the highest point, unless it sits more than
    ``APEX_OUTLIER_GAP`` above the second-highest (then the second is
    used). The ground reference is the lowest non-tree point within
    ``GROUND_DISC_RADIUS`` of the location; if that disc is empty, and in
    any case never above it, the instance's own minimum is used.
    """
    xyz = np.asarray(instance_xyz, dtype=np.float64)
    if xyz.size == 0:
        raise ValueError("instance has no points")
    z_sorted = np.sort(xyz[:, 2])[::-1]
    z_max = z_sorted[0]
    if len(z_sorted) > 1 and z_sorted[0] - z_sorted[1] > APEX_OUTLIER_GAP:
        z_max = z_sorted[1]
    z_min_tree = z_sorted[-1]
    non_tree = np.asarray(non_tree_xyz, dtype=np.float64)
    z_min_ground = math.inf
    if non_tree.size:
        dist = np.hypot(non_tree[:, 0] - location[0], non_tree[:, 1] - location[1])
        disc = non_tree[dist <= GROUND_DISC_RADIUS]
        if disc.size:
            z_min_ground = disc[:, 2].min()
    return float(z_max - min(z_min_ground, z_min_tree))


def assign_crown_categories(trees):
    """Classify trees by dominance relative to their neighbors.

    Neighbors are trees within ``NEIGHBOR_DISTANCE`` in the xy-plane.
    A tree is A when isolated or at least ``DOMINANCE_MARGIN`` taller than
    every neighbor; D when some neighbor is that much taller within
    ``UNDERSTORY_DISTANCE``; C when such a dominant neighbor exists only
    farther away; B otherwise. D is checked before C, so a tree dominated
    both near and far counts as D.

    Returns:
        List of records with ``category`` filled, same order as the input.
    """
    xy = np.array([[t.x, t.y] for t in trees], dtype=np.float64)
    heights = np.array([t.height for t in trees], dtype=np.float64)
    out = []
    for i, tree in enumerate(trees):
        dist = np.hypot(xy[:, 0] - tree.x, xy[:, 1] - tree.y)
        neighbor = (dist < NEIGHBOR_DISTANCE) & (np.arange(len(trees)) != i)
        if not neighbor.any():
            category = "A"
        elif (heights[i] - heights[neighbor] >= DOMINANCE_MARGIN).all():
            category = "A"
        else:
            dominant = neighbor & (heights - heights[i] >= DOMINANCE_MARGIN)
            if (dominant & (dist < UNDERSTORY_DISTANCE)).any():
                category = "D"
            elif dominant.any():
                category = "C"
            else:
                category = "B"
        out.append(replace(tree, category=category))
    return out


def build_tree_records(cloud):
    """Compute location, height, and category for every gt instance."""
    non_tree = cloud.xyz[cloud.instance_id == 0]
    records = []
    for instance in sorted(cloud.instances()):
        xyz = cloud.xyz[cloud.instance_id == instance]
        location = tree_location(xyz)
        height = tree_height(xyz, non_tree, location)
        records.append(
            TreeRecord(
                instance_id=int(instance),
                x=location[0],
                y=location[1],
                height=height,
            )
        )
    return assign_crown_categories(records)


def write_tree_table(path, rows):
    """Write the per-tree CSV table.

    Args:
        path: output file.
        rows: iterables of (plot_id, record, matched_pred_id, iou); the
            last two may be None for unmatched trees.
    """
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["plot_id", "tree_id", "x", "y", "height_m", "category", "matched_pred_id", "iou"]
        )
        for plot_id, record, pred_id, iou in rows:
            writer.writerow(
                [
                    plot_id,
                    record.instance_id,
                    repr(record.x),
                    repr(record.y),
                    repr(record.height),
                    record.category or "",
                    "" if pred_id is None else pred_id,
                    "" if iou is None else repr(float(iou)),
                ]
            )
