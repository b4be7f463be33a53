"""End-to-end super-resolution of a single frame.

Chains planning, dilated midpoint interpolation, colorization, and LUT
refinement; this is the unit of work the streaming client runs per frame
and the CLI exposes as ``upsample``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .interpolate import colorize, dilated_midpoint_interpolate, plan_upsample
from .lut import LutTable, refine_frame
from .octree import TwoLayerOctree


@dataclass
class SrConfig:
    k: int = 4
    d: int = 2
    seed: int = 0
    refine: bool = True

    @property
    def max_ratio(self) -> float:
        return 1.0 + self.d * self.k


def upsample_cloud(cloud: PointCloud, ratio: float, config: SrConfig,
                   table: LutTable | None = None,
                   tree: TwoLayerOctree | None = None,
                   neighbor_mode: str = "octree") -> PointCloud:
    """Upsample one frame to round(ratio * N) points.

    Runs interpolation, colorization (when the input is colored), and LUT
    refinement when a table is supplied and config.refine is set.
    """
    plan = plan_upsample(len(cloud), ratio, config.k, config.d, config.seed)
    out = dilated_midpoint_interpolate(cloud, plan, config.k, config.d,
                                       tree=tree, neighbor_mode=neighbor_mode)
    if cloud.has_colors:
        colorize(out, cloud)
    if table is not None and config.refine:
        return refine_frame(table, out)
    return out.cloud


def upsample_to_count(cloud: PointCloud, target_count: int, config: SrConfig,
                      table: LutTable | None = None,
                      tree: TwoLayerOctree | None = None) -> PointCloud:
    """Upsample so the output holds exactly target_count points (within the
    capacity 1 + d*k). The streaming client uses this to restore a frame's
    full manifest density after a fractional fetch."""
    n = len(cloud)
    if target_count < n:
        raise ValueError(f"target_count {target_count} below input size {n}")
    ratio = target_count / n
    result = upsample_cloud(cloud, ratio, config, table=table, tree=tree)
    return result
