"""Point-cloud super-resolution and adaptive volumetric streaming.

Core pieces: a two-layer-octree kNN engine, dilated midpoint interpolation,
lookup-table refinement of interpolated points, an MPC controller for
continuous fetch-density adaptation, and a chunked TCP streaming stack with
a trace-driven simulator.
"""

from .cloud import CloudError, PointCloud, farthest_point_sample, random_downsample
from .interpolate import (
    InterpolationOutput,
    UpsamplePlan,
    colorize,
    dilated_midpoint_interpolate,
    plan_upsample,
)
from .lut import (
    LutTable,
    RefinementFunction,
    build_lut,
    encode_neighborhood,
    flat_index,
    laplacian_refiner,
    load_lut,
    lookup_refine,
    lut_size_bytes,
    refine_frame,
    save_lut,
)
from .metrics import QualityReport, chamfer_distance, evaluate, geometry_psnr
from .octree import (
    NeighborList,
    TwoLayerOctree,
    brute_force_knn,
    build_octree,
    dilated_neighborhood,
    knn_query,
    merge_and_prune,
)
from .pipeline import SrConfig, upsample_cloud, upsample_to_count
from .ply import PlyError, load_ply, save_ply

__version__ = "0.1.0"

__all__ = [
    "CloudError",
    "InterpolationOutput",
    "LutTable",
    "NeighborList",
    "PlyError",
    "PointCloud",
    "QualityReport",
    "RefinementFunction",
    "SrConfig",
    "TwoLayerOctree",
    "UpsamplePlan",
    "build_lut",
    "build_octree",
    "brute_force_knn",
    "chamfer_distance",
    "colorize",
    "dilated_midpoint_interpolate",
    "dilated_neighborhood",
    "encode_neighborhood",
    "evaluate",
    "farthest_point_sample",
    "flat_index",
    "geometry_psnr",
    "knn_query",
    "laplacian_refiner",
    "load_lut",
    "load_ply",
    "lookup_refine",
    "lut_size_bytes",
    "merge_and_prune",
    "plan_upsample",
    "random_downsample",
    "refine_frame",
    "save_lut",
    "save_ply",
    "upsample_cloud",
    "upsample_to_count",
]
