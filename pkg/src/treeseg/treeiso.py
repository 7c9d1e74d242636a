"""Graph-based tree isolation via two-stage cut pursuit.

Stage one builds a k-nearest-neighbor graph over the points and partitions
it by greedy l0 cut pursuit, which trades squared deviation from cluster
centroids against a penalty per cut edge. Stage two repeats the
partitioning on the cluster centroids in the xy-plane, with clusters
weighted by size. Vertical, ground-touching clusters are then flagged as
stems, and every remaining cluster is absorbed by the stem with the best
composite affinity (vertical and horizontal overlap against point gap and
centroid distance), yielding one instance per stem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from shapely.geometry import MultiPoint

from ._validation import check_in_range, check_int_in_range
from .evaluation import Segmentation
from .terrain import normalize_heights

#: Normalized height below which points are excluded as ground returns.
GROUND_FLOOR = 0.5

#: A stem cluster must begin within this height of the ground (meters).
STEM_BASE_HEIGHT = 1.5

#: Clusters at most this large are split by exhaustive enumeration.
_EXHAUSTIVE_SPLIT_LIMIT = 12

#: Objective decrease required to accept a move.
_MOVE_TOL = 1e-12


@dataclass(frozen=True)
class TreeisoParams:
    """Cut-pursuit tree isolation parameters.

    Attributes:
        k1: neighbors in the stage-one point graph, in [3, 20].
        k2: neighbors in the stage-two centroid graph, in [3, 40].
        lambda1: stage-one regularization strength, in [0.1, 40].
        lambda2: stage-two regularization strength, in [5, 40].
        rho_zmax: vertical-extent-to-length ratio above which a cluster
            counts as a stem, in [0.1, 1].
        w_rho: weight of horizontal overlap in the merge affinity,
            in [0.1, 2].
    """

    k1: int = 5
    k2: int = 20
    lambda1: float = 1.0
    lambda2: float = 20.0
    rho_zmax: float = 0.5
    w_rho: float = 0.5

    def validate(self):
        check_int_in_range("k1", self.k1, 3, 20)
        check_int_in_range("k2", self.k2, 3, 40)
        check_in_range("lambda1", self.lambda1, 0.1, 40.0)
        check_in_range("lambda2", self.lambda2, 5.0, 40.0)
        check_in_range("rho_zmax", self.rho_zmax, 0.1, 1.0)
        check_in_range("w_rho", self.w_rho, 0.1, 2.0)
        return self


@dataclass(frozen=True)
class PointGraph:
    """Undirected weighted graph over point-like nodes.

    Attributes:
        values: (n, d) node values the fidelity term pulls toward.
        node_weights: (n,) fidelity weights.
        edges: (m, 2) node index pairs with ``edges[:, 0] < edges[:, 1]``.
        edge_weights: (m,) cut penalties.
    """

    values: np.ndarray
    node_weights: np.ndarray
    edges: np.ndarray
    edge_weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be (n, d)")
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        if len(edges) and (edges[:, 0] >= edges[:, 1]).any():
            raise ValueError("edges must satisfy i < j")
        if len(edges) and (edges.max() >= len(values) or edges.min() < 0):
            raise ValueError("edge endpoint out of range")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "node_weights", np.asarray(self.node_weights, dtype=np.float64))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_weights", np.asarray(self.edge_weights, dtype=np.float64))

    @property
    def n_nodes(self):
        return len(self.values)


@dataclass
class ClusterSet:
    """Partition of graph nodes with per-cluster geometry accessors."""

    labels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.points = np.asarray(self.points, dtype=np.float64)

    @property
    def n_clusters(self):
        return len(np.unique(self.labels))

    def cluster_ids(self):
        return np.unique(self.labels)

    def members(self, cluster):
        return np.flatnonzero(self.labels == cluster)

    def centroid(self, cluster):
        return self.points[self.members(cluster)].mean(axis=0)

    def point_count(self, cluster):
        return int((self.labels == cluster).sum())

    def z_extent(self, cluster):
        z = self.points[self.members(cluster), 2]
        return float(z.max() - z.min())


def build_knn_graph(points, k):
    """Symmetrized k-nearest-neighbor graph with unit weights.

    Distance ties resolve toward lower ordinals. Self-loops never occur;
    an undirected edge exists when either endpoint selects the other.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 2:
        raise ValueError("graph needs at least 2 points")
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    fetch = min(n, k + 2)
    dist, idx = tree.query(points, k=fetch)
    rows = []
    for i in range(n):
        d, j = dist[i], idx[i]
        keep = j != i
        d, j = d[keep], j[keep]
        order = np.lexsort((j, d))
        take = j[order][:k]
        # Boundary ties beyond the over-fetch need an exact re-query.
        if len(take) < k or (len(j) > k and d[order][k - 1] == d[order][min(k, len(d) - 1)]):
            full_d = np.linalg.norm(points - points[i], axis=1)
            full_d[i] = np.inf
            take = np.lexsort((np.arange(n), full_d))[:k]
        rows.append(take)
    pairs = np.concatenate(
        [np.column_stack([np.full(k, i), rows[i]]) for i in range(n)]
    )
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)
    return PointGraph(
        values=points,
        node_weights=np.ones(n),
        edges=edges,
        edge_weights=np.ones(len(edges)),
    )


class _Partition:
    """Mutable cut-pursuit state with O(1) per-cluster fidelity."""

    def __init__(self, graph, lam):
        self.graph = graph
        self.lam = lam
        self.labels = np.zeros(graph.n_nodes, dtype=np.int64)
        self.next_label = 1

    def fidelity_of(self, idx):
        w = self.graph.node_weights[idx]
        x = self.graph.values[idx]
        sw = w.sum()
        if sw <= 0:
            return 0.0
        sx = (w[:, None] * x).sum(axis=0)
        sq = (w * (x**2).sum(axis=1)).sum()
        return float(sq - (sx @ sx) / sw)

    def cut_weight(self):
        e = self.graph.edges
        if len(e) == 0:
            return 0.0
        different = self.labels[e[:, 0]] != self.labels[e[:, 1]]
        return float(self.graph.edge_weights[different].sum())

    def objective(self):
        total = 0.0
        for cluster in np.unique(self.labels):
            total += self.fidelity_of(np.flatnonzero(self.labels == cluster))
        return total + self.lam * self.cut_weight()


def _components_of(idx, sub_edges, n_sub):
    if len(sub_edges) == 0:
        return [np.array([i]) for i in range(n_sub)]
    adj = coo_matrix(
        (np.ones(len(sub_edges)), (sub_edges[:, 0], sub_edges[:, 1])),
        shape=(n_sub, n_sub),
    )
    n_comp, comp = connected_components(adj, directed=False)
    return [np.flatnonzero(comp == c) for c in range(n_comp)]


def _best_exhaustive_split(values, weights, sub_edges, edge_w, lam):
    """Best binary node split of a small cluster by full enumeration.

    Returns (delta, side_mask) for the best objective change, where the
    baseline is the unsplit cluster.
    """
    n = len(values)
    sq = weights * (values**2).sum(axis=1)
    wx = weights[:, None] * values

    def fid(mask):
        sw = weights[mask].sum()
        if sw <= 0:
            return 0.0
        sx = wx[mask].sum(axis=0)
        return sq[mask].sum() - (sx @ sx) / sw

    base = fid(np.ones(n, dtype=bool))
    best = (0.0, None)
    for code in range(1, 2 ** (n - 1)):
        mask = np.array([(code >> b) & 1 for b in range(n)], dtype=bool)
        cut = 0.0
        if len(sub_edges):
            crossing = mask[sub_edges[:, 0]] != mask[sub_edges[:, 1]]
            cut = edge_w[crossing].sum()
        delta = fid(mask) + fid(~mask) + lam * cut - base
        if delta < best[0] - _MOVE_TOL:
            best = (delta, mask.copy())
    return best


def _two_means_split(values, weights):
    """Deterministic weighted 2-means proposal: extremes of the principal axis."""
    center = values.mean(axis=0)
    centered = values - center
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[0]
    c = np.array([proj.min(), proj.max()])
    if c[0] == c[1]:
        return None
    assign = None
    for _ in range(20):
        assign = np.abs(proj[:, None] - c[None, :]).argmin(axis=1)
        if not assign.any() or assign.all():
            return None
        new = np.array(
            [
                np.average(proj[assign == s], weights=weights[assign == s])
                for s in (0, 1)
            ]
        )
        if np.allclose(new, c, atol=1e-10):
            break
        c = new
    return assign.astype(bool)


def cut_pursuit_l0(graph, lam, move_log=None):
    """Partition a graph by greedy l0 cut pursuit.

    Minimizes the sum of weighted squared deviations from cluster
    centroids plus ``lam`` times the weight of edges joining different
    clusters. Starting from a single cluster, clusters are repeatedly
    split (exhaustively for small clusters, by a principal-axis 2-means
    proposal otherwise, always decomposing the result into connected
    components) and adjacent clusters re-merged, while either move lowers
    the objective. Every returned cluster is connected.

    Args:
        graph: nodes, values and edges to partition.
        lam: non-negative regularization strength.
        move_log: optional list collecting the objective after every
            accepted move.

    Returns:
        (ClusterSet, objective): the partition and its exact objective.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    state = _Partition(graph, lam)
    current = state.objective()
    if move_log is not None:
        move_log.append(current)

    def log(value):
        if move_log is not None:
            move_log.append(value)

    edges, edge_w = graph.edges, graph.edge_weights
    changed = True
    while changed:
        changed = False
        # Split phase: try to break every cluster in ascending label order.
        for cluster in np.unique(state.labels):
            idx = np.flatnonzero(state.labels == cluster)
            if len(idx) < 2:
                continue
            local = np.full(graph.n_nodes, -1, dtype=np.intp)
            local[idx] = np.arange(len(idx))
            inside = (state.labels[edges[:, 0]] == cluster) & (
                state.labels[edges[:, 1]] == cluster
            ) if len(edges) else np.zeros(0, dtype=bool)
            sub_edges = local[edges[inside]] if len(edges) else np.zeros((0, 2), dtype=np.intp)
            sub_w = edge_w[inside] if len(edges) else np.zeros(0)
            values = graph.values[idx]
            weights = graph.node_weights[idx]

            proposals = []
            if len(idx) <= _EXHAUSTIVE_SPLIT_LIMIT:
                delta, mask = _best_exhaustive_split(values, weights, sub_edges, sub_w, lam)
                if mask is not None:
                    proposals.append(mask)
            else:
                mask = _two_means_split(values, weights)
                if mask is not None:
                    proposals.append(mask)

            for mask in proposals:
                base_fid = state.fidelity_of(idx)
                crossing = (
                    mask[sub_edges[:, 0]] != mask[sub_edges[:, 1]]
                    if len(sub_edges)
                    else np.zeros(0, dtype=bool)
                )
                delta = (
                    state.fidelity_of(idx[mask])
                    + state.fidelity_of(idx[~mask])
                    + lam * (sub_w[crossing].sum() if len(sub_edges) else 0.0)
                    - base_fid
                )
                if delta < -_MOVE_TOL:
                    state.labels[idx[mask]] = state.next_label
                    state.next_label += 1
                    current += delta
                    log(current)
                    # Free improvement: separate disconnected sides.
                    for side in (idx[mask], idx[~mask]):
                        current = _decompose_components(
                            state, side, edges, edge_w, current, log
                        )
                    changed = True
                    break

        # Merge phase: greedily join adjacent clusters while it pays off.
        while True:
            best = None
            if len(edges):
                la, lb = state.labels[edges[:, 0]], state.labels[edges[:, 1]]
                between = la != lb
                pair_cut = {}
                for a, b, w in zip(la[between], lb[between], edge_w[between]):
                    key = (min(a, b), max(a, b))
                    pair_cut[key] = pair_cut.get(key, 0.0) + w
                for (a, b), cutw in sorted(pair_cut.items()):
                    ia = np.flatnonzero(state.labels == a)
                    ib = np.flatnonzero(state.labels == b)
                    delta = (
                        state.fidelity_of(np.concatenate([ia, ib]))
                        - state.fidelity_of(ia)
                        - state.fidelity_of(ib)
                        - lam * cutw
                    )
                    if delta < -_MOVE_TOL and (best is None or delta < best[0]):
                        best = (delta, a, b)
            if best is None:
                break
            delta, a, b = best
            state.labels[state.labels == b] = a
            current += delta
            log(current)
            changed = True

    dense = np.zeros_like(state.labels, dtype=np.int32)
    for new, old in enumerate(np.unique(state.labels)):
        dense[state.labels == old] = new
    clusters = ClusterSet(labels=dense, points=graph.values)
    return clusters, state.objective()


def _decompose_components(state, idx, edges, edge_w, current, log):
    """Split a cluster into its connected components (never raises cost)."""
    if len(idx) < 2:
        return current
    cluster = state.labels[idx[0]]
    local = np.full(len(state.labels), -1, dtype=np.intp)
    local[idx] = np.arange(len(idx))
    if len(edges):
        inside = (state.labels[edges[:, 0]] == cluster) & (
            state.labels[edges[:, 1]] == cluster
        )
        sub_edges = local[edges[inside]]
    else:
        sub_edges = np.zeros((0, 2), dtype=np.intp)
    comps = _components_of(idx, sub_edges, len(idx))
    if len(comps) <= 1:
        return current
    before = state.fidelity_of(idx)
    after = 0.0
    for comp in comps[1:]:
        state.labels[idx[comp]] = state.next_label
        state.next_label += 1
    for comp in comps:
        after += state.fidelity_of(idx[comp])
    if after < before - _MOVE_TOL:
        current += after - before
        log(current)
    return current


def stage2_cluster(clusters, k2, lambda2):
    """Re-partition stage-one clusters by their centroid positions.

    Builds a k-nearest-neighbor graph over cluster centroids in the
    xy-plane, weighting each node by its point count, and runs cut pursuit
    on it; stage-one clusters are relabeled by the resulting groups and
    never split. ``k2`` is clamped below the cluster count; a single
    cluster passes through unchanged.
    """
    ids = clusters.cluster_ids()
    if len(ids) == 0:
        raise ValueError("empty cluster set")
    if len(ids) == 1:
        return ClusterSet(labels=np.zeros_like(clusters.labels), points=clusters.points)
    centroids = np.array([clusters.centroid(c)[:2] for c in ids])
    counts = np.array([clusters.point_count(c) for c in ids], dtype=np.float64)
    k2 = min(k2, len(ids) - 1)
    edges = build_knn_graph(centroids, k2).edges
    graph = PointGraph(
        values=centroids,
        node_weights=counts,
        edges=edges,
        edge_weights=np.ones(len(edges)),
    )
    grouped, _ = cut_pursuit_l0(graph, lambda2)
    mapping = {int(c): int(grouped.labels[i]) for i, c in enumerate(ids)}
    labels = np.array([mapping[int(c)] for c in clusters.labels], dtype=np.int32)
    return ClusterSet(labels=labels, points=clusters.points)


def identify_stems(clusters, rho_zmax):
    """Flag clusters that are tall relative to their principal length.

    A cluster is a stem iff its vertical extent divided by its longest
    principal-axis extent reaches ``rho_zmax`` and its lowest point lies
    within ``STEM_BASE_HEIGHT`` of the ground (heights are assumed
    normalized).

    Returns:
        {cluster_id: bool} stem flags.
    """
    ids = clusters.cluster_ids()
    if len(ids) == 0:
        raise ValueError("empty cluster set")
    flags = {}
    for cluster in ids:
        pts = clusters.points[clusters.members(cluster)]
        if len(pts) < 2:
            flags[int(cluster)] = False
            continue
        centered = pts - pts.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[0]
        length = proj.max() - proj.min()
        ratio = 0.0 if length <= 0 else (pts[:, 2].max() - pts[:, 2].min()) / length
        flags[int(cluster)] = bool(ratio >= rho_zmax and pts[:, 2].min() <= STEM_BASE_HEIGHT)
    return flags


def _interval_overlap(a_lo, a_hi, b_lo, b_hi):
    inter = min(a_hi, b_hi) - max(a_lo, b_lo)
    shorter = max(min(a_hi - a_lo, b_hi - b_lo), 1e-9)
    return float(np.clip(inter / shorter, 0.0, 1.0))


def _hull(points_xy):
    geom = MultiPoint([tuple(p) for p in points_xy]).convex_hull
    return geom


def _hull_overlap(pts_a, pts_b):
    ha, hb = _hull(pts_a), _hull(pts_b)
    if ha.area <= 0 or hb.area <= 0:
        return 0.0
    inter = ha.intersection(hb).area
    return float(np.clip(inter / min(ha.area, hb.area), 0.0, 1.0))


def _min_point_gap(pts_a, pts_b):
    from scipy.spatial import cKDTree

    d, _ = cKDTree(pts_b).query(pts_a, k=1)
    return float(np.min(d))


def merge_by_rho_score(clusters, stems, w_rho):
    """Absorb every non-stem cluster into its best-scoring stem.

    For each non-stem cluster the affinity to every stem combines, each
    scaled to [0, 1] over that cluster's candidates: vertical interval
    overlap, plus ``w_rho`` times horizontal hull overlap, minus the
    normalized minimum point gap, minus the normalized centroid distance.
    Clusters are processed largest first and stems grow as they absorb,
    so every point ends up in some stem group; instances equal stems.
    """
    ids = [int(c) for c in clusters.cluster_ids()]
    if len(ids) == 0:
        raise ValueError("empty cluster set")
    stem_ids = [c for c in ids if stems.get(c)]
    if not stem_ids:
        largest = max(ids, key=lambda c: (clusters.point_count(c), -c))
        stem_ids = [largest]
    groups = {c: [c] for c in stem_ids}
    membership = {
        c: np.flatnonzero(clusters.labels == c) for c in ids
    }
    stem_points = {c: clusters.points[membership[c]] for c in stem_ids}

    pending = sorted(
        (c for c in ids if c not in groups),
        key=lambda c: (-len(membership[c]), c),
    )
    for cluster in pending:
        pts = clusters.points[membership[cluster]]
        z_lo, z_hi = pts[:, 2].min(), pts[:, 2].max()
        centroid = pts[:, :2].mean(axis=0)
        rows = []
        for stem in stem_ids:
            spts = stem_points[stem]
            v = _interval_overlap(z_lo, z_hi, spts[:, 2].min(), spts[:, 2].max())
            h = _hull_overlap(pts[:, :2], spts[:, :2])
            gap = _min_point_gap(pts, spts)
            cdist = float(np.hypot(*(centroid - spts[:, :2].mean(axis=0))))
            rows.append([v, h, gap, cdist])
        rows = np.asarray(rows)
        gap_max = rows[:, 2].max()
        cd_max = rows[:, 3].max()
        gap_n = rows[:, 2] / gap_max if gap_max > 0 else np.zeros(len(rows))
        cd_n = rows[:, 3] / cd_max if cd_max > 0 else np.zeros(len(rows))
        scores = rows[:, 0] + w_rho * rows[:, 1] - gap_n - cd_n
        winner = stem_ids[int(np.lexsort((stem_ids, -scores))[0])]
        groups[winner].append(cluster)
        stem_points[winner] = np.vstack([stem_points[winner], pts])

    labels = np.zeros(len(clusters.labels), dtype=np.int32)
    for instance, stem in enumerate(sorted(groups), start=1):
        for cluster in groups[stem]:
            labels[membership[cluster]] = instance
    return Segmentation(labels=labels)


def treeiso_segment(cloud, ground, params=None):
    """Isolate trees by two-stage cut pursuit plus stem-anchored merging.

    Heights are normalized first; points below ``GROUND_FLOOR`` are left
    unassigned. The pipeline is fully deterministic.
    """
    params = (params or TreeisoParams()).validate()
    n = cloud.point_count
    labels = np.zeros(n, dtype=np.int32)
    normalized = normalize_heights(cloud, ground)
    veg = np.flatnonzero(normalized.z >= GROUND_FLOOR)
    if len(veg) < 2:
        return Segmentation(labels=labels)
    pts = normalized.xyz[veg]
    k1 = min(params.k1, len(pts) - 1)
    graph = build_knn_graph(pts, k1)
    stage1, _ = cut_pursuit_l0(graph, params.lambda1)
    stage2 = stage2_cluster(stage1, params.k2, params.lambda2)
    stems = identify_stems(stage2, params.rho_zmax)
    merged = merge_by_rho_score(stage2, stems, params.w_rho)
    labels[veg] = merged.labels
    return Segmentation(labels=labels).compact()
