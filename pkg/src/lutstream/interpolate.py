"""Dilated midpoint interpolation to a continuous target ratio.

New points are exact midpoints of a source point and a partner drawn from
the source's dilated neighborhood (the d*k nearest points). Widening the
candidate set with d > 1 lets dense regions spawn points toward sparse
ones, evening out the output distribution. Neighbor lists for the new
points are recovered by merging the parents' lists instead of fresh tree
queries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .octree import (
    NeighborList,
    TwoLayerOctree,
    brute_knn_batch,
    build_octree,
    knn_batch,
    merge_and_prune_batch,
    _as_neighbor_list,
)


class InterpolationError(ValueError):
    pass


@dataclass
class UpsamplePlan:
    """Per-source allocation of the new points for one frame."""

    ratio: float
    new_point_count: int
    counts: np.ndarray  # (N,) generation count per source point
    seed: int

    def __post_init__(self):
        if np.any(self.counts < 0) or int(self.counts.sum()) != self.new_point_count:
            raise InterpolationError("per-source counts must be >= 0 and sum to total")


@dataclass
class InterpolationOutput:
    """Upsampled frame plus the bookkeeping the refinement stage reuses."""

    cloud: PointCloud               # originals first, new points appended
    parent_pairs: np.ndarray        # (M, 2) source/partner indices per new point
    neighbor_indices: np.ndarray    # (M, k) from merge_and_prune
    neighbor_sqdist: np.ndarray     # (M, k)
    neighbor_complete: np.ndarray   # (M,) bool
    shortfall: int = 0              # new points dropped after pair dedup exhausted

    @property
    def original_count(self) -> int:
        return len(self.cloud) - self.parent_pairs.shape[0]

    @property
    def new_count(self) -> int:
        return self.parent_pairs.shape[0]

    def neighbor_list(self, j: int) -> NeighborList:
        nl = _as_neighbor_list(
            self.neighbor_indices[j],
            self.neighbor_sqdist[j],
            self.cloud.positions[self.original_count + j],
            complete=bool(self.neighbor_complete[j]),
        )
        return nl


def plan_upsample(n_points: int, ratio: float, k: int, d: int,
                  seed: int) -> UpsamplePlan:
    """Distribute round((ratio-1)*N) new points as evenly as possible.

    The remainder after the floor split is assigned to a seeded random
    subset of sources, so repeated frames don't always favor low indices.
    """
    if ratio < 1.0:
        raise InterpolationError(f"ratio must be >= 1, got {ratio}")
    if ratio - 1.0 > d * k:
        raise InterpolationError(
            f"ratio {ratio} exceeds per-point capacity 1 + d*k = {1 + d * k}"
        )
    new_total = int(round((ratio - 1.0) * n_points))
    counts = np.full(n_points, new_total // n_points, dtype=np.int64)
    remainder = new_total - int(counts.sum())
    if remainder:
        rng = np.random.default_rng(seed)
        counts[rng.choice(n_points, size=remainder, replace=False)] += 1
    return UpsamplePlan(ratio=ratio, new_point_count=new_total, counts=counts,
                        seed=seed)


def _select_pairs(dilated_idx: np.ndarray, ring_idx: np.ndarray,
                  plan: UpsamplePlan, fetch_wider=None):
    """Pick distinct partners per source, deduplicating unordered pairs
    across the whole frame.

    Collisions retry later slots of the source's (seeded) candidate
    permutation. At high ratios the frame-wide uniqueness constraint can
    exhaust the dilated sets outright (every candidate pair already
    claimed), so deficits spill into wider neighbor rings: first ring_idx
    (prefetched alongside the dilated sets), then progressively farther
    rings via ``fetch_wider(rows, kk)``. Only when the whole cloud runs dry
    is the output reduced and flagged.

    Returns (pairs (M, 2) ordered by (source, draw), shortfall).
    """
    n, dk = dilated_idx.shape
    counts = plan.counts
    rng = np.random.default_rng(plan.seed)

    accepted_src: list[np.ndarray] = []
    accepted_partner: list[np.ndarray] = []
    accepted_slot: list[np.ndarray] = []
    taken_keys = np.empty(0, dtype=np.uint64)
    got = np.zeros(n, dtype=np.int64)

    def pair_key(a, b):
        lo = np.minimum(a, b).astype(np.uint64)
        hi = np.maximum(a, b).astype(np.uint64)
        return lo * np.uint64(n) + hi

    def consume(candidates: np.ndarray, active_rows: np.ndarray, slot_base: int):
        """Draw through per-row shuffled candidate columns, round by round."""
        nonlocal taken_keys
        width = candidates.shape[1]
        perm = np.argsort(rng.random((active_rows.size, width)), axis=1)
        ptr = np.zeros(active_rows.size, dtype=np.int64)
        for _ in range(width):
            live = np.flatnonzero((got[active_rows] < counts[active_rows])
                                  & (ptr < width))
            if live.size == 0:
                break
            rows = active_rows[live]
            slots = ptr[live]
            partners = candidates[live, perm[live, slots]]
            keys = pair_key(rows, partners)
            fresh = ~np.isin(keys, taken_keys)
            uniq_keys, first_pos = np.unique(keys[fresh], return_index=True)
            ok = np.zeros(rows.size, dtype=bool)
            ok[np.flatnonzero(fresh)[first_pos]] = True
            accepted_src.append(rows[ok])
            accepted_partner.append(partners[ok])
            accepted_slot.append(slot_base + slots[ok])
            got[rows[ok]] += 1
            ptr[live] += 1
            taken_keys = np.union1d(taken_keys, uniq_keys)

    consume(dilated_idx, np.arange(n, dtype=np.int64), 0)

    have = dk
    if ring_idx.shape[1]:
        deficient = np.flatnonzero(got < counts)
        if deficient.size:
            consume(ring_idx[deficient], deficient, have)
        have += ring_idx.shape[1]

    while fetch_wider is not None and have < n - 1:
        deficient = np.flatnonzero(got < counts)
        if deficient.size == 0:
            break
        kk = min(max(2 * have, have + dk), n - 1)
        ring = fetch_wider(deficient, kk)[:, have:]
        if ring.shape[1] == 0:
            break
        consume(ring, deficient, have)
        have = kk

    shortfall = int((counts - got).clip(min=0).sum())
    src = np.concatenate(accepted_src)
    partner = np.concatenate(accepted_partner)
    slot = np.concatenate(accepted_slot)
    order = np.lexsort((slot, src))
    return np.stack([src[order], partner[order]], axis=1), shortfall


def dilated_midpoint_interpolate(cloud: PointCloud, plan: UpsamplePlan,
                                 k: int, d: int,
                                 tree: TwoLayerOctree | None = None,
                                 neighbor_mode: str = "octree",
                                 ) -> InterpolationOutput:
    """Generate the planned new points as midpoints of (source, partner).

    neighbor_mode "octree" (default) uses the two-layer octree for source
    neighborhoods and merge-and-prune reuse for the new points' lists;
    "brute" recomputes everything exhaustively and exists as the speed
    baseline for benchmarks.
    """
    n = len(cloud)
    if plan.counts.shape[0] != n:
        raise InterpolationError("plan does not match cloud size")
    if neighbor_mode not in ("octree", "brute"):
        raise InterpolationError(f"unknown neighbor_mode {neighbor_mode!r}")
    dk = d * k
    if np.any(plan.counts > dk):
        raise InterpolationError("plan exceeds dilated neighborhood capacity")

    if plan.new_point_count == 0:
        return InterpolationOutput(
            cloud=PointCloud(cloud.positions.copy()),
            parent_pairs=np.empty((0, 2), dtype=np.int64),
            neighbor_indices=np.empty((0, k), dtype=np.int64),
            neighbor_sqdist=np.empty((0, k), dtype=np.float32),
            neighbor_complete=np.empty(0, dtype=bool),
        )

    # near capacity the frame-wide pair dedup will spill beyond the dilated
    # sets; prefetching one wider ring up front is much cheaper than a
    # second query pass for most sources
    k_fetch = int(min(n - 1, max(dk, 2 * plan.counts.max())))
    all_rows = np.arange(n, dtype=np.int64)
    if neighbor_mode == "octree":
        if tree is None:
            tree = build_octree(cloud)
        fetched, _ = knn_batch(tree, cloud, cloud.positions, k_fetch, all_rows)

        def fetch_wider(rows, kk):
            return knn_batch(tree, cloud, cloud.positions[rows], kk, rows)[0]
    else:
        fetched, _ = brute_knn_batch(cloud, cloud.positions, k_fetch, all_rows)

        def fetch_wider(rows, kk):
            return brute_knn_batch(cloud, cloud.positions[rows], kk, rows)[0]

    dilated_idx = fetched[:, :dk]
    pairs, shortfall = _select_pairs(dilated_idx, fetched[:, dk:], plan,
                                     fetch_wider)
    if shortfall:
        warnings.warn(
            f"pair capacity exhausted: {shortfall} of {plan.new_point_count} "
            "new points dropped",
            stacklevel=2,
        )
    p_pos = cloud.positions[pairs[:, 0]]
    q_pos = cloud.positions[pairs[:, 1]]
    midpoints = (p_pos + q_pos) / np.float32(2.0)

    if neighbor_mode == "octree":
        cand = np.concatenate(
            [dilated_idx[pairs[:, 0]], dilated_idx[pairs[:, 1]], pairs], axis=1
        )
        nb_idx, nb_d2, nb_complete = merge_and_prune_batch(cand, midpoints, cloud, k)
    else:
        nb_idx, nb_d2 = brute_knn_batch(cloud, midpoints, k)
        nb_complete = np.ones(midpoints.shape[0], dtype=bool)

    positions = np.concatenate([cloud.positions, midpoints], axis=0)
    return InterpolationOutput(
        cloud=PointCloud(positions),
        parent_pairs=pairs,
        neighbor_indices=nb_idx,
        neighbor_sqdist=nb_d2,
        neighbor_complete=nb_complete,
        shortfall=shortfall,
    )


def colorize(output: InterpolationOutput, original: PointCloud) -> None:
    """Fill colors on the upsampled cloud: originals keep theirs, each new
    point takes the color of the nearer parent (exact ties go to the
    generation source). Uses only the stored parent geometry; no queries.
    """
    if not original.has_colors:
        warnings.warn("original cloud has no colors; colorize is a no-op",
                      stacklevel=2)
        return
    n = output.original_count
    if len(original) != n:
        raise InterpolationError("original cloud does not match output")
    pairs = output.parent_pairs
    mid = output.cloud.positions[n:]
    d2_p = np.square(mid - original.positions[pairs[:, 0]]).sum(axis=1)
    d2_q = np.square(mid - original.positions[pairs[:, 1]]).sum(axis=1)
    take_q = d2_q < d2_p  # ties (==) stay with the source parent p
    chosen = np.where(take_q, pairs[:, 1], pairs[:, 0])
    colors = np.concatenate([original.colors, original.colors[chosen]], axis=0)
    output.cloud.colors = colors
