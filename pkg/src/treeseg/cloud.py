"""Point cloud data model, file I/O, and density/attribute preprocessing.

A :class:`PointCloud` is a columnar, immutable container: xyz coordinates,
up to three reflectance channels (with a sentinel for missing records),
a per-point tree instance id (0 = not part of any tree) and a semantic
class id. All operations in this module are pure functions that return
new clouds and never mutate their inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_positive

#: Sentinel marking a missing reflectance record.
MISSING_REFLECTANCE = -9999.0

#: Valid semantic class ids: other, tree, building, vehicle, pole, out.
SEMANTIC_CLASSES = (0, 1, 2, 3, 4, 5)

#: Number of reflectance channels carried by a cloud.
N_REFLECTANCE_CHANNELS = 3

_TEXT_FIELDS = (
    "x", "y", "z",
    "reflectance_1", "reflectance_2", "reflectance_3",
    "instance_id", "semantic_id",
)

_BINARY_MAGIC = b"CBPC1"
_DTYPE_F64 = 0
_DTYPE_I32 = 1


class ParseError(ValueError):
    """Raised when a point cloud file cannot be parsed.

    Carries the offending path and, when known, the 1-based line number.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += f"{path}: "
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(prefix + message)


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Columnar 3D point cloud with per-point attributes.

    Attributes:
        xyz: (n, 3) float64 coordinates in meters.
        reflectance: (n, 3) float64 per-channel reflectance;
            ``MISSING_REFLECTANCE`` marks absent records.
        instance_id: (n,) int32 tree instance ids, 0 = no tree.
        semantic_id: (n,) int32 semantic class ids in ``SEMANTIC_CLASSES``.
    """

    xyz: np.ndarray
    reflectance: np.ndarray = None
    instance_id: np.ndarray = None
    semantic_id: np.ndarray = None

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got shape {xyz.shape}")
        n = xyz.shape[0]
        refl = self.reflectance
        if refl is None:
            refl = np.full((n, N_REFLECTANCE_CHANNELS), MISSING_REFLECTANCE)
        refl = np.asarray(refl, dtype=np.float64)
        if refl.shape != (n, N_REFLECTANCE_CHANNELS):
            raise ValueError(
                f"reflectance must be (n, {N_REFLECTANCE_CHANNELS}), got {refl.shape}"
            )
        inst = self.instance_id
        inst = np.zeros(n, dtype=np.int32) if inst is None else np.asarray(inst, dtype=np.int32)
        sem = self.semantic_id
        sem = np.zeros(n, dtype=np.int32) if sem is None else np.asarray(sem, dtype=np.int32)
        for name, arr in (("instance_id", inst), ("semantic_id", sem)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must be (n,), got shape {arr.shape}")
        if n and inst.min() < 0:
            raise ValueError("instance_id must be non-negative")
        if n and not np.isin(sem, SEMANTIC_CLASSES).all():
            bad = sem[~np.isin(sem, SEMANTIC_CLASSES)][0]
            raise ValueError(f"semantic_id {bad} outside {SEMANTIC_CLASSES}")
        object.__setattr__(self, "xyz", _readonly(xyz))
        object.__setattr__(self, "reflectance", _readonly(refl))
        object.__setattr__(self, "instance_id", _readonly(inst))
        object.__setattr__(self, "semantic_id", _readonly(sem))

    @property
    def point_count(self):
        return self.xyz.shape[0]

    def __len__(self):
        return self.point_count

    @property
    def x(self):
        return self.xyz[:, 0]

    @property
    def y(self):
        return self.xyz[:, 1]

    @property
    def z(self):
        return self.xyz[:, 2]

    def instances(self):
        """Return {instance_id: point count} for all nonzero instances."""
        ids, counts = np.unique(self.instance_id, return_counts=True)
        keep = ids > 0
        return dict(zip(ids[keep].tolist(), counts[keep].tolist()))

    def instance_indices(self, instance):
        """Point ordinals belonging to one instance id."""
        return np.flatnonzero(self.instance_id == instance)

    def subset(self, indices):
        """New cloud containing only the given point ordinals (order kept)."""
        indices = np.asarray(indices)
        return PointCloud(
            xyz=self.xyz[indices],
            reflectance=self.reflectance[indices],
            instance_id=self.instance_id[indices],
            semantic_id=self.semantic_id[indices],
        )

    def with_xyz(self, xyz):
        return replace(self, xyz=np.asarray(xyz, dtype=np.float64))

    def with_instance_ids(self, instance_id):
        return replace(self, instance_id=np.asarray(instance_id, dtype=np.int32))


@dataclass(frozen=True)
class PlotGeometry:
    """Cylindrical plot footprint: center, radius, and derived area.

    ``area_ha`` is derived from the radius on construction; constructing
    with an explicit area that disagrees by more than 1e-9 relative is an
    error.
    """

    center_xy: tuple
    radius: float
    area_ha: float = field(default=None)

    def __post_init__(self):
        check_positive("radius", self.radius)
        cx, cy = self.center_xy
        object.__setattr__(self, "center_xy", (float(cx), float(cy)))
        object.__setattr__(self, "radius", float(self.radius))
        derived = math.pi * self.radius**2 / 10_000.0
        if self.area_ha is None:
            object.__setattr__(self, "area_ha", derived)
        elif not math.isclose(self.area_ha, derived, rel_tol=1e-9):
            raise ValueError(
                f"area_ha {self.area_ha} inconsistent with radius {self.radius}"
            )

    @property
    def area_m2(self):
        return self.area_ha * 10_000.0


class SpatialIndex:
    """k-nearest and radius queries over point positions.

    Results agree exactly with a linear scan; distance ties are broken by
    the lowest point ordinal. Queries are safe to issue concurrently once
    the index is built.
    """

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError("points must be a 2D array")
        self._points = points
        self._tree = cKDTree(points)

    @property
    def n_points(self):
        return self._points.shape[0]

    def query_knn(self, query, k):
        """Ordinals of the k nearest points to ``query`` (ties: lowest ordinal).

        Returns (indices, distances), both of length k, sorted by
        (distance, ordinal).
        """
        n = self.n_points
        if not 1 <= k <= n:
            raise ValueError(f"k must be in [1, {n}], got {k}")
        query = np.asarray(query, dtype=np.float64)
        # Over-fetch until all points tied with the k-th distance are present,
        # then rank by (distance, ordinal) so ties resolve to lower ordinals.
        k_ext = min(n, k + 8)
        while True:
            dist, idx = self._tree.query(query, k=k_ext)
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
            if k_ext == n or dist[k - 1] < dist[-1]:
                break
            k_ext = min(n, k_ext * 2)
        order = np.lexsort((idx, dist))
        return idx[order][:k], dist[order][:k]

    def query_radius(self, query, radius):
        """Ordinals of all points within ``radius`` of ``query``, ascending."""
        idx = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), radius)
        return np.sort(np.asarray(idx, dtype=np.intp))

    def knn_distances(self, k):
        """Mean distance from every indexed point to its k nearest others."""
        if k >= self.n_points:
            raise ValueError(f"k must be < point count ({self.n_points}), got {k}")
        dist, _ = self._tree.query(self._points, k=k + 1)
        return dist[:, 1:].mean(axis=1)


# ---------------------------------------------------------------------------
# File I/O


def _format_value(value, is_float):
    if is_float:
        if value == MISSING_REFLECTANCE:
            return "NA"
        return repr(float(value))
    return str(int(value))


def save_point_cloud(cloud, path, format="columnar_text"):
    """Write a cloud to disk. Round trips bit-exactly through load."""
    if format == "columnar_text":
        _save_text(cloud, path)
    elif format == "columnar_binary":
        _save_binary(cloud, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def load_point_cloud(path, format="columnar_text"):
    """Read a cloud from disk.

    Args:
        path: file to read.
        format: ``columnar_text`` or ``columnar_binary``.

    Raises:
        ParseError: malformed header, wrong row arity, unparseable or
            non-finite coordinate values.
    """
    if format == "columnar_text":
        return _load_text(path)
    if format == "columnar_binary":
        return _load_binary(path)
    raise ValueError(f"unknown format {format!r}")


def _save_text(cloud, path):
    cols = {
        "x": (cloud.x, True),
        "y": (cloud.y, True),
        "z": (cloud.z, True),
        "reflectance_1": (cloud.reflectance[:, 0], True),
        "reflectance_2": (cloud.reflectance[:, 1], True),
        "reflectance_3": (cloud.reflectance[:, 2], True),
        "instance_id": (cloud.instance_id, False),
        "semantic_id": (cloud.semantic_id, False),
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(cols) + "\n")
        for i in range(cloud.point_count):
            fh.write(
                " ".join(_format_value(arr[i], f) for arr, f in cols.values()) + "\n"
            )


def _load_text(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.strip():
            raise ParseError("empty or missing header", path=path, line=1)
        names = header.split()
        unknown = [n for n in names if n not in _TEXT_FIELDS]
        if unknown:
            raise ParseError(f"unknown field(s) {unknown}", path=path, line=1)
        if len(set(names)) != len(names):
            raise ParseError("duplicate field names in header", path=path, line=1)
        missing = [n for n in ("x", "y", "z") if n not in names]
        if missing:
            raise ParseError(f"required field(s) {missing} absent", path=path, line=1)
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != len(names):
                raise ParseError(
                    f"expected {len(names)} values, got {len(parts)}",
                    path=path,
                    line=lineno,
                )
            rows.append((lineno, parts))

    n = len(rows)
    data = {}
    for col, name in enumerate(names):
        is_coord = name in ("x", "y", "z")
        is_refl = name.startswith("reflectance")
        if is_coord or is_refl:
            out = np.empty(n)
        else:
            out = np.empty(n, dtype=np.int32)
        for row, (lineno, parts) in enumerate(rows):
            tok = parts[col]
            try:
                if tok == "NA":
                    if not is_refl:
                        raise ValueError("NA only allowed for reflectance")
                    out[row] = MISSING_REFLECTANCE
                elif is_coord or is_refl:
                    out[row] = float(tok)
                else:
                    out[row] = int(tok)
            except ValueError as exc:
                raise ParseError(
                    f"bad value {tok!r} for field {name}: {exc}",
                    path=path,
                    line=lineno,
                ) from None
            if is_coord and not np.isfinite(out[row]):
                raise ParseError(
                    f"non-finite coordinate {tok!r}", path=path, line=lineno
                )
        data[name] = out

    refl = np.full((n, N_REFLECTANCE_CHANNELS), MISSING_REFLECTANCE)
    for c in range(N_REFLECTANCE_CHANNELS):
        key = f"reflectance_{c + 1}"
        if key in data:
            refl[:, c] = data[key]
    xyz = np.column_stack([data["x"], data["y"], data["z"]])
    try:
        return PointCloud(
            xyz=xyz,
            reflectance=refl,
            instance_id=data.get("instance_id"),
            semantic_id=data.get("semantic_id"),
        )
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


def _save_binary(cloud, path):
    fields = [
        ("x", _DTYPE_F64, cloud.x),
        ("y", _DTYPE_F64, cloud.y),
        ("z", _DTYPE_F64, cloud.z),
        ("reflectance_1", _DTYPE_F64, cloud.reflectance[:, 0]),
        ("reflectance_2", _DTYPE_F64, cloud.reflectance[:, 1]),
        ("reflectance_3", _DTYPE_F64, cloud.reflectance[:, 2]),
        ("instance_id", _DTYPE_I32, cloud.instance_id),
        ("semantic_id", _DTYPE_I32, cloud.semantic_id),
    ]
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<I", len(fields)))
        for name, code, _ in fields:
            raw = name.encode("ascii")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", code))
        fh.write(struct.pack("<Q", cloud.point_count))
        for _, code, arr in fields:
            dtype = "<f8" if code == _DTYPE_F64 else "<i4"
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _load_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_BINARY_MAGIC)] != _BINARY_MAGIC:
        raise ParseError("bad magic bytes", path=path)
    off = len(_BINARY_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise ParseError("truncated header", path=path)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (n_fields,) = take("<I")
    fields = []
    for _ in range(n_fields):
        (name_len,) = take("<H")
        name = blob[off : off + name_len].decode("ascii")
        off += name_len
        (code,) = take("<B")
        if code not in (_DTYPE_F64, _DTYPE_I32):
            raise ParseError(f"unknown dtype code {code}", path=path)
        fields.append((name, code))
    (n_points,) = take("<Q")
    data = {}
    for name, code in fields:
        dtype = np.dtype("<f8") if code == _DTYPE_F64 else np.dtype("<i4")
        nbytes = n_points * dtype.itemsize
        if off + nbytes > len(blob):
            raise ParseError(f"truncated data for field {name}", path=path)
        data[name] = np.frombuffer(blob, dtype=dtype, count=n_points, offset=off).copy()
        off += nbytes
    for req in ("x", "y", "z"):
        if req not in data:
            raise ParseError(f"required field {req} absent", path=path)
        if n_points and not np.isfinite(data[req]).all():
            raise ParseError(f"non-finite values in field {req}", path=path)
    refl = np.full((n_points, N_REFLECTANCE_CHANNELS), MISSING_REFLECTANCE)
    for c in range(N_REFLECTANCE_CHANNELS):
        key = f"reflectance_{c + 1}"
        if key in data:
            refl[:, c] = data[key]
    try:
        return PointCloud(
            xyz=np.column_stack([data["x"], data["y"], data["z"]]),
            reflectance=refl,
            instance_id=data.get("instance_id"),
            semantic_id=data.get("semantic_id"),
        )
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


def load_las(path):
    """Best-effort LAS ingestion (requires the optional ``laspy`` extra).

    Maps the ``tree_index`` extra attribute to ``instance_id`` and picks up
    ``reflectance_1..3`` extra dimensions when present.
    """
    try:
        import laspy
    except ImportError as exc:
        raise ImportError(
            "LAS support needs the optional dependency laspy "
            "(pip install treeseg[las])"
        ) from exc
    las = laspy.read(path)
    n = len(las.points)
    xyz = np.column_stack([np.asarray(las.x), np.asarray(las.y), np.asarray(las.z)])
    dims = set(las.point_format.dimension_names)
    for extra in getattr(las, "extra_dimension_names", []) or []:
        dims.add(extra)
    refl = np.full((n, N_REFLECTANCE_CHANNELS), MISSING_REFLECTANCE)
    for c in range(N_REFLECTANCE_CHANNELS):
        key = f"reflectance_{c + 1}"
        if key in dims:
            refl[:, c] = np.asarray(las[key], dtype=np.float64)
    instance = None
    if "tree_index" in dims:
        instance = np.asarray(las["tree_index"], dtype=np.int32)
    semantic = None
    if "semantic_id" in dims:
        semantic = np.asarray(las["semantic_id"], dtype=np.int32)
    return PointCloud(xyz=xyz, reflectance=refl, instance_id=instance, semantic_id=semantic)


# ---------------------------------------------------------------------------
# Preprocessing operations


def remove_statistical_outliers(cloud, k=20, std_ratio=3.0):
    """Drop points whose mean k-nearest-neighbor distance is anomalous.

    A point is removed iff its mean distance to its k nearest neighbors
    exceeds ``mean + std_ratio * std`` of that statistic over the whole
    cloud (population standard deviation, statistics computed once on the
    input). Relative point order is preserved.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    check_positive("std_ratio", std_ratio)
    if cloud.point_count <= k:
        raise ValueError(
            f"point count ({cloud.point_count}) must exceed k ({k})"
        )
    mean_dist = SpatialIndex(cloud.xyz).knn_distances(k)
    threshold = mean_dist.mean() + std_ratio * mean_dist.std()
    return cloud.subset(np.flatnonzero(mean_dist <= threshold))


def downsample_to_density(cloud, plot, target_density, seed):
    """Randomly sparsify a cloud to ``target_density`` points per m².

    If the current density is at or below the target the cloud is returned
    unchanged. Otherwise exactly ``round(target * area_m2)`` points are kept,
    sampled uniformly without replacement. Selection is by per-point random
    priority, so for a fixed seed the selection at a lower target is a
    subset of the selection at any higher target.
    """
    check_positive("target_density", target_density)
    n = cloud.point_count
    n_keep = round(target_density * plot.area_m2)
    if n_keep >= n:
        return cloud
    priority = np.random.default_rng(seed).random(n)
    keep = np.sort(np.argsort(priority, kind="stable")[:n_keep])
    return cloud.subset(keep)


def normalize_reflectance_iqr(values):
    """Robustly normalize a reflectance channel into [0, 1].

    Non-missing values are centered on the median, scaled by the
    interquartile range (quantiles via linear interpolation between order
    statistics), then min-max scaled to [0, 1]. Missing entries
    (``MISSING_REFLECTANCE``) pass through untouched. A constant channel
    (IQR of 0, or max equal to min after scaling) maps to all zeros.

    Raises:
        ValueError: all values missing.
    """
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    valid = values != MISSING_REFLECTANCE
    if not valid.any():
        raise ValueError("all reflectance values are missing")
    vals = values[valid]
    q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
    iqr = q75 - q25
    if iqr == 0:
        out[valid] = 0.0
        return out
    scaled = (vals - med) / iqr
    lo, hi = scaled.min(), scaled.max()
    out[valid] = 0.0 if hi == lo else (scaled - lo) / (hi - lo)
    return out


def nearest_neighbor_transfer(source, target):
    """Copy each target point's label from its nearest source point.

    Distance ties resolve to the lowest source ordinal. Returns an (n,)
    int32 array of instance ids for the target cloud.

    Raises:
        ValueError: empty source.
    """
    if source.point_count == 0:
        raise ValueError("source cloud is empty")
    index = SpatialIndex(source.xyz)
    if source.point_count == 1:
        return np.full(target.point_count, source.instance_id[0], dtype=np.int32)
    dist, idx = index._tree.query(target.xyz, k=2)
    nearest = idx[:, 0].copy()
    # Exact distance ties must resolve to the lowest source ordinal.
    for row in np.flatnonzero(dist[:, 0] == dist[:, 1]):
        tied, _ = index.query_knn(target.xyz[row], 1)
        nearest[row] = tied[0]
    return source.instance_id[nearest].astype(np.int32)
