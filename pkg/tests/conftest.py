"""Shared synthetic fixtures for algorithm tests."""

import numpy as np
import pytest

from treeseg import PointCloud


def cone_tree_points(rng, center, height, crown_radius, density, crown_base_frac=0.35):
    """Sample a conical crown: apex at ``height``, base ring at the crown base.

    Points fall uniformly in the crown footprint, with z drawn between the
    crown base and the cone surface at that radius.
    """
    n = max(8, round(density * np.pi * crown_radius**2))
    angle = rng.random(n) * 2 * np.pi
    radius = np.sqrt(rng.random(n)) * crown_radius
    base = height * crown_base_frac
    surface = base + (height - base) * (1 - radius / crown_radius)
    z = base + rng.random(n) * np.maximum(surface - base, 1e-6)
    x = center[0] + radius * np.cos(angle)
    y = center[1] + radius * np.sin(angle)
    # A guaranteed apex point keeps the treetop well defined.
    x = np.append(x, center[0])
    y = np.append(y, center[1])
    z = np.append(z, height)
    return np.column_stack([x, y, z])


def ground_points(rng, extent, density, z=0.0):
    n = round(density * extent * extent)
    xy = rng.random((n, 2)) * extent
    gx, gy = np.meshgrid(np.arange(0.5, extent), np.arange(0.5, extent))
    xy = np.vstack([xy, np.column_stack([gx.ravel(), gy.ravel()])])
    return np.column_stack([xy, np.full(len(xy), z)])


def cone_plot(
    centers,
    heights,
    crown_radii,
    extent=20.0,
    density=25.0,
    seed=0,
    ground_z=0.0,
    occlusion=0.85,
):
    """Ground plane plus labeled conical trees; labels are exact by construction.

    ``occlusion`` is the fraction of ground returns removed beneath each
    crown footprint, mimicking canopy shadowing of the ground.
    """
    rng = np.random.default_rng(seed)
    ground = ground_points(rng, extent, density, z=ground_z)
    if centers and occlusion > 0:
        shadow = np.zeros(len(ground), dtype=bool)
        for center, radius in zip(centers, crown_radii):
            dist = np.hypot(ground[:, 0] - center[0], ground[:, 1] - center[1])
            shadow |= dist <= radius
        drop = shadow & (rng.random(len(ground)) < occlusion)
        ground = ground[~drop]
    parts = [ground]
    labels = [np.zeros(len(ground), dtype=np.int32)]
    for i, (center, height, radius) in enumerate(zip(centers, heights, crown_radii), 1):
        pts = cone_tree_points(rng, center, height, radius, density)
        pts[:, 2] += ground_z
        parts.append(pts)
        labels.append(np.full(len(pts), i, dtype=np.int32))
    xyz = np.vstack(parts)
    instance = np.concatenate(labels)
    semantic = (instance > 0).astype(np.int32)
    return PointCloud(xyz=xyz, instance_id=instance, semantic_id=semantic)


@pytest.fixture
def one_cone():
    return cone_plot([(10.0, 10.0)], [12.0], [3.0], extent=20.0, density=30.0, seed=1)


@pytest.fixture
def two_cones():
    return cone_plot(
        [(6.0, 6.0), (16.0, 14.0)], [12.0, 9.0], [2.5, 2.0],
        extent=22.0, density=30.0, seed=2,
    )
