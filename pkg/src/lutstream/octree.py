"""Two-layer octree and exact k-nearest-neighbor machinery.

The tree splits the cloud's bounding box into 8 octants, each again into 8,
giving a fixed 64-leaf partition. Queries prune leaves whose bounding box
cannot contain a closer point than the current k-th candidate. Ties in
distance are always broken by ascending point index so that results are
bit-reproducible and comparable against the brute-force oracle.

Batch entry points (knn_batch, dilated_all, merge_and_prune_batch) are the
fast path used by the interpolation pipeline; the scalar operations wrap
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud

_ROW_BLOCK = 512    # query rows per distance slab, bounds transient memory
_CAND_BLOCK = 8192  # candidate columns per streamed merge step


class KnnError(ValueError):
    pass


@dataclass
class NeighborList:
    """Ordered neighbors of one query point (center itself excluded).

    distances are Euclidean, non-decreasing; ``complete`` is False when a
    merge produced fewer than the requested k distinct candidates.
    """

    center_position: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    center_index: int | None = None
    complete: bool = True

    def __post_init__(self):
        if len(self.indices) != len(self.distances):
            raise KnnError("indices and distances length mismatch")
        if len(self.distances) > 1 and np.any(np.diff(self.distances) < 0):
            raise KnnError("distances must be non-decreasing")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class TwoLayerOctree:
    """8x8 spatial partition of one cloud; immutable once built."""

    bbox: np.ndarray                 # (2, 3) padded root bounds
    cell_bounds: np.ndarray          # (64, 2, 3) leaf cell bounds, tiling bbox
    point_order: np.ndarray          # point indices grouped by leaf, ascending inside
    leaf_offsets: np.ndarray         # (65,) CSR offsets into point_order
    point_leaf: np.ndarray           # (N,) leaf id per point
    _leaf_lists: list = field(default=None, repr=False, compare=False)

    def leaf_points(self, leaf: int) -> np.ndarray:
        if self._leaf_lists is None:
            self._leaf_lists = [
                self.point_order[self.leaf_offsets[j]:self.leaf_offsets[j + 1]]
                for j in range(64)
            ]
        return self._leaf_lists[leaf]

    def occupancy(self) -> np.ndarray:
        return np.diff(self.leaf_offsets)


def _padded_bbox(positions: np.ndarray) -> np.ndarray:
    lo = positions.min(axis=0).astype(np.float64)
    hi = positions.max(axis=0).astype(np.float64)
    extent = hi - lo
    pad = 1e-9 * max(float(extent.max()), 1.0)
    degenerate = extent <= 0
    lo[degenerate] -= pad
    hi[degenerate] += pad
    return np.stack([lo, hi]).astype(np.float32)


def _leaf_ids(positions: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """Leaf id = 3 octant bits of layer 1, then 3 of layer 2 (6 bits, 0..63)."""
    lo, hi = bbox[0].astype(np.float64), bbox[1].astype(np.float64)
    mid1 = (lo + hi) / 2.0
    pos = positions.astype(np.float64)
    oct1 = (pos >= mid1).astype(np.int64)  # (N, 3) in {0,1}
    # layer-2 midpoint of the containing octant, per axis
    half = (hi - lo) / 4.0
    mid2 = mid1 + (2 * oct1 - 1) * half
    oct2 = (pos >= mid2).astype(np.int64)
    bits1 = oct1[:, 0] * 4 + oct1[:, 1] * 2 + oct1[:, 2]
    bits2 = oct2[:, 0] * 4 + oct2[:, 1] * 2 + oct2[:, 2]
    return bits1 * 8 + bits2


def _fine_morton(positions: np.ndarray, bbox: np.ndarray, levels: int = 3) -> np.ndarray:
    """Morton refinement below the leaf level, used only to order query
    batches so consecutive rows stay spatially tight (smaller leaf unions).
    """
    lo, hi = bbox[0].astype(np.float64), bbox[1].astype(np.float64)
    span = np.maximum(hi - lo, 1e-30)
    cells = 1 << (2 + levels)
    grid = np.clip(((positions - lo) / span * cells).astype(np.int64), 0, cells - 1)
    code = np.zeros(positions.shape[0], dtype=np.int64)
    for level in range(1 + levels):
        shift = levels + 1 - level  # leaf bits first, finer bits after
        for axis in range(3):
            code = (code << 1) | ((grid[:, axis] >> shift) & 1)
    return code


def _cell_bounds(bbox: np.ndarray) -> np.ndarray:
    lo, hi = bbox[0].astype(np.float64), bbox[1].astype(np.float64)
    bounds = np.empty((64, 2, 3), dtype=np.float64)
    for leaf in range(64):
        b1, b2 = leaf >> 3, leaf & 7
        cell_lo = lo.copy()
        cell_hi = hi.copy()
        for axis, shift in ((0, 2), (1, 1), (2, 0)):
            quarter = (hi[axis] - lo[axis]) / 4.0
            o1 = (b1 >> shift) & 1
            o2 = (b2 >> shift) & 1
            cell_lo[axis] = lo[axis] + (o1 * 2 + o2) * quarter
            cell_hi[axis] = cell_lo[axis] + quarter
        bounds[leaf, 0] = cell_lo
        bounds[leaf, 1] = cell_hi
    return bounds.astype(np.float32)


def build_octree(cloud: PointCloud) -> TwoLayerOctree:
    """O(N) bucketing of the cloud into the fixed 64-leaf partition."""
    if len(cloud) == 0:
        raise KnnError("cannot build an octree over an empty cloud")
    bbox = _padded_bbox(cloud.positions)
    leaf = _leaf_ids(cloud.positions, bbox)
    order = np.argsort(leaf, kind="stable")
    counts = np.bincount(leaf, minlength=64)
    offsets = np.zeros(65, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return TwoLayerOctree(
        bbox=bbox,
        cell_bounds=_cell_bounds(bbox),
        point_order=order.astype(np.int64),
        leaf_offsets=offsets,
        point_leaf=leaf,
    )


def _sqdist_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """(m, n) float32 squared distances via |q|^2 + |p|^2 - 2 q.p.

    The GEMM form is what keeps 100K-point frames tractable; it can round
    differently than the subtract-square form, but every consumer (octree,
    brute force, merge re-ranking) shares this kernel, so ordering
    comparisons stay consistent. Clamped at zero against cancellation.
    """
    d = q @ p.T
    d *= -2.0
    d += np.square(q).sum(axis=1)[:, None]
    d += np.square(p).sum(axis=1)[None, :]
    return np.maximum(d, 0.0, out=d)


def _bbox_sqdist(q: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """(m, L) squared lower-bound distance from queries to leaf cells."""
    lo = bounds[:, 0]  # (L, 3)
    hi = bounds[:, 1]
    out = np.zeros((q.shape[0], bounds.shape[0]), dtype=np.float32)
    for axis in range(3):
        below = lo[None, :, axis] - q[:, axis, None]
        above = q[:, axis, None] - hi[None, :, axis]
        gap = np.maximum(np.maximum(below, above), 0.0)
        out += np.square(gap)
    return out


def _order_by_dist_then_index(d2: np.ndarray, idx: np.ndarray):
    """Sort each row's (d2, idx) pairs by distance, ties by ascending index.

    Rows must already be ordered by ascending idx; a stable distance sort
    then yields the tie-break for free.
    """
    order = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(d2, order, axis=1), np.take_along_axis(idx, order, axis=1)


def _topk_rows(d2: np.ndarray, idx: np.ndarray, k: int):
    """Exact top-k per row of (d2, idx) pairs, ordered by (distance, index).

    idx holds per-row candidate point indices. +inf distances mark padding
    or excluded entries and only surface when a row lacks real candidates.
    """
    m, c = d2.shape
    if c <= max(4 * k, 64):
        o1 = np.argsort(idx, axis=1, kind="stable")
        d2s = np.take_along_axis(d2, o1, axis=1)
        idxs = np.take_along_axis(idx, o1, axis=1)
        d2o, idxo = _order_by_dist_then_index(d2s, idxs)
        return idxo[:, :k].astype(np.int64), d2o[:, :k]

    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    sel_d2 = np.take_along_axis(d2, part, axis=1)
    sel_idx = np.take_along_axis(idx, part, axis=1)
    kth = sel_d2.max(axis=1)
    # boundary ties: fix rows where candidates equal to the k-th distance
    # were cut arbitrarily instead of by ascending index
    n_eq_total = np.count_nonzero(d2 == kth[:, None], axis=1)
    n_eq_sel = np.count_nonzero(sel_d2 == kth[:, None], axis=1)
    for r in np.flatnonzero(n_eq_total != n_eq_sel):
        row = d2[r]
        strict = np.flatnonzero(row < kth[r])
        ties = np.flatnonzero(row == kth[r])
        ties = ties[np.argsort(idx[r, ties], kind="stable")][: k - len(strict)]
        chosen = np.concatenate([strict, ties])
        sel_idx[r] = idx[r, chosen]
        sel_d2[r] = row[chosen]
    # order each row's winners; pre-sort by index so the stable sort ties out
    o1 = np.argsort(sel_idx, axis=1, kind="stable")
    sel_idx = np.take_along_axis(sel_idx, o1, axis=1)
    sel_d2 = np.take_along_axis(sel_d2, o1, axis=1)
    sel_d2, sel_idx = _order_by_dist_then_index(sel_d2, sel_idx)
    return sel_idx.astype(np.int64), sel_d2


def _mask_excluded(d2: np.ndarray, cand: np.ndarray, exclude: np.ndarray | None):
    if exclude is None:
        return
    col = np.searchsorted(cand, exclude)
    valid = (col < len(cand)) & (cand[np.minimum(col, len(cand) - 1)] == exclude)
    rows = np.flatnonzero(valid)
    d2[rows, col[rows]] = np.inf


def _block_sqdist(q, q_sq, cand_pos, cand_sq):
    """GEMM-form squared distances, unclamped (clamped only on output)."""
    d2 = q @ cand_pos.T
    d2 *= -2.0
    d2 += q_sq
    d2 += cand_sq[None, :]
    return d2


def _knn_over_candidates(positions, queries, cand, k, exclude,
                         init_bound: np.ndarray | None = None):
    """Exact top-k for query rows against a fixed candidate index set.

    Small candidate sets are handled in one shot. Large ones (the brute
    path) are streamed in blocks, keeping a running best-k per row and
    merging a block into a row only when it holds a candidate within the
    row's current k-th distance (<=, so boundary ties still get index
    tie-breaking). init_bound seeds that threshold when the caller already
    knows one.
    """
    m = queries.shape[0]
    out_idx = np.empty((m, k), dtype=np.int64)
    out_d2 = np.empty((m, k), dtype=np.float32)
    cand_pos = positions[cand]
    cand_sq = np.square(cand_pos).sum(axis=1)
    single_shot = len(cand) <= 3 * _CAND_BLOCK
    for s in range(0, m, _ROW_BLOCK):
        e = min(s + _ROW_BLOCK, m)
        q = queries[s:e]
        q_sq = np.square(q).sum(axis=1)[:, None]
        ex = None if exclude is None else exclude[s:e]
        if single_shot:
            d2 = _block_sqdist(q, q_sq, cand_pos, cand_sq)
            _mask_excluded(d2, cand, ex)
            gi, gd = _topk_rows(d2, np.broadcast_to(cand, d2.shape), k)
            out_idx[s:e] = gi
            out_d2[s:e] = np.maximum(gd, 0.0)
            continue
        best_d2 = np.full((e - s, k), np.inf, dtype=np.float32)
        best_idx = np.full((e - s, k), -1, dtype=np.int64)
        thr = (np.full(e - s, np.inf, dtype=np.float32) if init_bound is None
               else init_bound[s:e].astype(np.float32))
        for cs in range(0, len(cand), _CAND_BLOCK):
            ce = min(cs + _CAND_BLOCK, len(cand))
            d2 = _block_sqdist(q, q_sq, cand_pos[cs:ce], cand_sq[cs:ce])
            _mask_excluded(d2, cand[cs:ce], ex)
            sub = np.flatnonzero(d2.min(axis=1) <= thr)
            if sub.size == 0:
                continue
            merged_d2 = np.concatenate([best_d2[sub], d2[sub]], axis=1)
            merged_idx = np.concatenate(
                [best_idx[sub], np.broadcast_to(cand[cs:ce], (sub.size, ce - cs))],
                axis=1,
            )
            best_idx[sub], best_d2[sub] = _topk_rows(merged_d2, merged_idx, k)
            thr[sub] = np.minimum(thr[sub], best_d2[sub, k - 1])
        out_idx[s:e] = best_idx
        out_d2[s:e] = np.maximum(best_d2, 0.0)
    return out_idx, out_d2


def brute_knn_batch(cloud: PointCloud, queries: np.ndarray, k: int,
                    exclude: np.ndarray | None = None):
    """Exhaustive exact kNN for many queries; the oracle and speed baseline."""
    n = len(cloud)
    _check_k(k, n, exclude is not None)
    cand = np.arange(n, dtype=np.int64)
    q = np.ascontiguousarray(queries, dtype=np.float32)
    return _knn_over_candidates(cloud.positions, q, cand, k, exclude)


def _check_k(k: int, n: int, excluding: bool):
    cap = n - 1 if excluding else n
    if not (1 <= k <= cap):
        raise KnnError(f"k must be in [1, {cap}], got {k}")


def knn_batch(tree: TwoLayerOctree, cloud: PointCloud, queries: np.ndarray,
              k: int, exclude: np.ndarray | None = None):
    """Exact kNN for many queries via leaf pruning.

    Processes queries grouped by their containing leaf: a first pass over
    nearby leaves yields a per-query radius bound, then only leaves whose
    cell lower-bound distance is within that bound are scanned.
    """
    n = len(cloud)
    _check_k(k, n, exclude is not None)
    q = np.ascontiguousarray(queries, dtype=np.float32)
    m = q.shape[0]
    out_idx = np.empty((m, k), dtype=np.int64)
    out_d2 = np.empty((m, k), dtype=np.float32)

    q_leaf = _leaf_ids(q, tree.bbox)
    # order by (leaf, fine morton) so row sub-blocks stay spatially compact
    fine = _fine_morton(q, tree.bbox)
    order = np.argsort(q_leaf * (1 << 12) + fine, kind="stable")
    positions = cloud.positions
    occupancy = tree.occupancy()

    start = 0
    while start < m:
        leaf = q_leaf[order[start]]
        end = start
        while end < m and q_leaf[order[end]] == leaf:
            end += 1
        group = order[start:end]
        start = end

        # small sub-blocks keep the needed-leaf union local and the distance
        # slabs cache-friendly
        for s in range(0, group.size, _ROW_BLOCK):
            rows = group[s:s + _ROW_BLOCK]
            qg = q[rows]
            eg = None if exclude is None else exclude[rows]
            lb = _bbox_sqdist(qg, tree.cell_bounds)  # (g, 64)

            # seed candidate leaves: nearest cells (by this block's min
            # bound) until they hold enough points for a k-th-distance bound
            seed_order = np.argsort(lb.min(axis=0), kind="stable")
            need = k + (2 if eg is not None else 1)
            seed_leaves, total = [], 0
            for lf in seed_order:
                if occupancy[lf] == 0:
                    continue
                seed_leaves.append(lf)
                total += occupancy[lf]
                if total >= need:
                    break
            cand0 = np.sort(
                np.concatenate([tree.leaf_points(lf) for lf in seed_leaves])
            )
            d2_0 = _sqdist_rows(qg, positions[cand0])
            _mask_excluded(d2_0, cand0, eg)
            bound = np.partition(d2_0, k - 1, axis=1)[:, k - 1]

            # prune: only leaves some query in the block still needs
            needed = np.any(lb <= bound[:, None], axis=0)
            leaves = np.flatnonzero(needed)
            cand = np.sort(np.concatenate([tree.leaf_points(lf) for lf in leaves]))
            gi, gd = _knn_over_candidates(positions, qg, cand, k, eg,
                                          init_bound=bound)
            out_idx[rows] = gi
            out_d2[rows] = gd
    return out_idx, out_d2


def _as_neighbor_list(idx, d2, center_pos, center_index=None, complete=True):
    return NeighborList(
        center_position=np.asarray(center_pos, dtype=np.float32),
        indices=idx,
        distances=np.sqrt(d2.astype(np.float64)).astype(np.float32),
        center_index=center_index,
        complete=complete,
    )


def knn_query(tree: TwoLayerOctree, cloud: PointCloud, query, k: int,
              exclude_index: int | None = None) -> NeighborList:
    """Exact k nearest neighbors of one position (ties by lower index).

    Pass exclude_index when the query is a cloud point that must not match
    itself.
    """
    q = np.asarray(query, dtype=np.float32).reshape(1, 3)
    ex = None if exclude_index is None else np.array([exclude_index])
    idx, d2 = knn_batch(tree, cloud, q, k, ex)
    return _as_neighbor_list(idx[0], d2[0], q[0], None)


def brute_force_knn(cloud: PointCloud, query, k: int,
                    exclude_index: int | None = None) -> NeighborList:
    """Exhaustive-scan counterpart of knn_query with the identical contract."""
    q = np.asarray(query, dtype=np.float32).reshape(1, 3)
    ex = None if exclude_index is None else np.array([exclude_index])
    idx, d2 = brute_knn_batch(cloud, q, k, ex)
    return _as_neighbor_list(idx[0], d2[0], q[0], None)


def dilated_neighborhood(tree: TwoLayerOctree, cloud: PointCloud, p_i: int,
                         k: int, d: int) -> NeighborList:
    """The d*k nearest neighbors of cloud point p_i, excluding p_i itself."""
    if d < 1 or k < 1:
        raise KnnError("k and d must be >= 1")
    dk = d * k
    if dk > len(cloud) - 1:
        raise KnnError(f"d*k = {dk} exceeds available neighbors ({len(cloud) - 1})")
    pos = cloud.positions[p_i]
    nl = knn_query(tree, cloud, pos, dk, exclude_index=p_i)
    nl.center_index = p_i
    return nl


def dilated_all(tree: TwoLayerOctree, cloud: PointCloud, k: int, d: int):
    """Dilated neighborhoods of every cloud point at once; (N, d*k) arrays."""
    dk = d * k
    if dk > len(cloud) - 1:
        raise KnnError(f"d*k = {dk} exceeds available neighbors ({len(cloud) - 1})")
    exclude = np.arange(len(cloud), dtype=np.int64)
    return knn_batch(tree, cloud, cloud.positions, dk, exclude)


def merge_and_prune_batch(cand_idx: np.ndarray, centers: np.ndarray,
                          cloud: PointCloud, k: int):
    """Re-rank candidate neighbor indices around new center positions.

    cand_idx (m, C) may contain duplicates; duplicates are dropped, the k
    nearest by recomputed distance (ties by index) are kept. Returns
    (indices (m, k), sq-distances (m, k), complete (m,) bool). Rows with
    fewer than k distinct candidates are padded with -1 / +inf and flagged.
    """
    pos = cloud.positions
    gathered = pos[cand_idx]  # (m, C, 3)
    d2 = np.square(gathered - centers[:, None, :].astype(np.float32)).sum(axis=2)
    o1 = np.argsort(cand_idx, axis=1, kind="stable")
    idx_sorted = np.take_along_axis(cand_idx, o1, axis=1)
    d2_sorted = np.take_along_axis(d2, o1, axis=1)
    dup = np.zeros_like(idx_sorted, dtype=bool)
    dup[:, 1:] = idx_sorted[:, 1:] == idx_sorted[:, :-1]
    d2_sorted[dup] = np.inf
    distinct = idx_sorted.shape[1] - dup.sum(axis=1)
    d2_final, idx_final = _order_by_dist_then_index(d2_sorted, idx_sorted)
    top_idx = idx_final[:, :k].astype(np.int64)
    top_d2 = d2_final[:, :k]
    complete = distinct >= k
    if not np.all(complete):
        pad = np.arange(k)[None, :] >= distinct[:, None]
        top_idx[pad] = -1
        top_d2[pad] = np.inf
    return top_idx, top_d2, complete


def merge_and_prune(nl_p: NeighborList, nl_q: NeighborList, p: int, q: int,
                    p_prime, cloud: PointCloud, k: int) -> NeighborList:
    """Approximate kNN of the midpoint p' of points p and q by merging the
    parents' neighbor lists (plus p and q themselves) and re-ranking by
    distance to p'. Never touches the octree.
    """
    center = np.asarray(p_prime, dtype=np.float32)
    cand = np.unique(np.concatenate([
        np.asarray(nl_p.indices, dtype=np.int64),
        np.asarray(nl_q.indices, dtype=np.int64),
        np.array([p, q], dtype=np.int64),
    ]))
    d2 = np.square(cloud.positions[cand] - center).sum(axis=1)
    d2_row, idx_row = _order_by_dist_then_index(d2[None, :], cand[None, :])
    take = min(k, len(cand))
    return _as_neighbor_list(
        idx_row[0, :take].astype(np.int64), d2_row[0, :take], center,
        complete=len(cand) >= k,
    )
