"""Point cloud data model and density sampling.

A cloud is a thin wrapper around an (N, 3) float32 position array with an
optional (N, 3) uint8 color array. Clouds are treated as immutable after
construction, so they can be shared freely between threads; the operations
in this package return new clouds instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CloudError(ValueError):
    """Raised for invalid point cloud inputs (bad shapes, NaN positions, ...)."""


@dataclass
class PointCloud:
    """Positions (and optionally per-point RGB colors) of one volumetric frame.

    positions: (N, 3) float32, finite
    colors:    (N, 3) uint8 or None; either every point has a color or none does
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    _bbox: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float32)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise CloudError(f"positions must be (N, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise CloudError("positions contain NaN or Inf")
        self.positions = pos
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8)
            if col.shape != pos.shape:
                raise CloudError(
                    f"colors must match positions shape {pos.shape}, got {col.shape}"
                )
            self.colors = col

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def bbox(self) -> np.ndarray:
        """Axis-aligned bounding box as a (2, 3) array [min; max] (cached)."""
        if self._bbox is None:
            if len(self) == 0:
                self._bbox = np.zeros((2, 3), dtype=np.float32)
            else:
                self._bbox = np.stack(
                    [self.positions.min(axis=0), self.positions.max(axis=0)]
                )
        return self._bbox

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm((hi - lo).astype(np.float64)))

    def select(self, indices: np.ndarray) -> "PointCloud":
        """New cloud from a subset (or reordering) of points."""
        idx = np.asarray(indices)
        colors = self.colors[idx] if self.colors is not None else None
        return PointCloud(self.positions[idx], colors)


def _round_count(x: float) -> int:
    # round-half-even, like the builtin; documented so callers can predict counts
    return int(round(x))


def random_downsample(cloud: PointCloud, ratio: float, seed: int) -> PointCloud:
    """Keep exactly round(ratio * N) points, chosen uniformly without replacement.

    Deterministic for a given seed; the surviving points keep their relative
    input order. Each point's marginal selection probability equals ``ratio``.
    """
    if not (0.0 < ratio <= 1.0):
        raise CloudError(f"downsample ratio must be in (0, 1], got {ratio}")
    n = len(cloud)
    keep = _round_count(ratio * n)
    if keep >= n:
        return cloud.select(np.arange(n))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=keep, replace=False)
    chosen.sort()
    return cloud.select(chosen)


def farthest_point_sample(cloud: PointCloud, target_count: int) -> PointCloud:
    """Greedy farthest point sampling starting from point index 0.

    Each step adds the point maximizing the distance to the already selected
    set (ties resolved to the lowest index). Quality-preserving but O(N * M);
    random_downsample is the fast path for streaming.
    """
    n = len(cloud)
    if not (1 <= target_count <= n):
        raise CloudError(f"target_count must be in [1, {n}], got {target_count}")
    pos = cloud.positions.astype(np.float64)
    selected = np.empty(target_count, dtype=np.int64)
    selected[0] = 0
    dist = np.sum((pos - pos[0]) ** 2, axis=1)
    for i in range(1, target_count):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        np.minimum(dist, np.sum((pos - pos[nxt]) ** 2, axis=1), out=dist)
    return cloud.select(selected)
