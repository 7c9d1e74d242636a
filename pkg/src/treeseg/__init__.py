"""Individual tree segmentation toolkit and benchmark harness."""

from .cloud import (
    MISSING_REFLECTANCE,
    ParseError,
    PlotGeometry,
    PointCloud,
    SpatialIndex,
    downsample_to_density,
    load_las,
    load_point_cloud,
    nearest_neighbor_transfer,
    normalize_reflectance_iqr,
    remove_statistical_outliers,
    save_point_cloud,
)
from .evaluation import (
    MatchResult,
    MetricsReport,
    Segmentation,
    TreeRecord,
    assign_crown_categories,
    average_precision,
    build_tree_records,
    compute_iou,
    compute_metrics,
    filter_small_gt,
    match_instances,
    postfilter_segments,
    tree_height,
    tree_location,
)
from .terrain import (
    ExtentError,
    GroundModel,
    denormalize_heights,
    estimate_ground,
    normalize_heights,
)

__version__ = "0.1.0"
