"""Lookup-table refinement of interpolated points.

A receptive field of n points (the interpolated point first, then its n-1
nearest originals) is normalized to the unit cube around its centroid,
quantized per axis into b bins, and the resulting per-axis digit strings
index three axis tables of precomputed offsets. Offsets are stored as
binary16, denormalized by the field radius at lookup time.

Tables are populated from a pluggable refinement function; the default is
a Laplacian pull toward the neighborhood mean. Externally produced tables
can be imported through the same on-disk container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cloud import PointCloud
from .interpolate import InterpolationOutput
from .octree import NeighborList

# Maps (..., n) normalized single-axis coordinates (interpolated point in
# slot 0) to (...,) normalized offsets with |offset| <= 1.
RefinementFunction = Callable[[np.ndarray], np.ndarray]

_MAGIC = b"VLUT"
_VERSION = 1
_BUILD_CHUNK = 1 << 20


class LutError(ValueError):
    pass


@dataclass
class EncodedNeighborhood:
    """Normalization + quantization of one receptive field."""

    center: np.ndarray        # interpolated point (slot 0), scene units
    radius: float             # max distance of any RF point to the origin
    normalized: np.ndarray    # (n, 3) in [-1, 1]
    quantized: np.ndarray     # (n, 3) int bins in [0, b-1]


@dataclass
class LutTable:
    rf_size: int
    bins: int
    axis_tables: tuple[np.ndarray, np.ndarray, np.ndarray]  # each (bins**rf_size,) f16
    provenance: str = "unknown"

    def __post_init__(self):
        expected = self.bins ** self.rf_size
        for t in self.axis_tables:
            if t.shape != (expected,) or t.dtype != np.float16:
                raise LutError(
                    f"axis table must be ({expected},) float16, got {t.shape} {t.dtype}"
                )

    @property
    def payload_bytes(self) -> int:
        return lut_size_bytes(self.rf_size, self.bins)


def lut_size_bytes(n: int, b: int) -> int:
    """Total payload: b^n entries per axis, 3 axes, 2 bytes per offset."""
    if n < 1 or b < 2:
        raise LutError(f"need n >= 1 and b >= 2, got n={n} b={b}")
    return b ** n * 3 * 2


def quantize(normalized: np.ndarray, b: int) -> np.ndarray:
    """Map [-1, 1] coordinates to integer bins [0, b-1]."""
    q = np.floor((np.asarray(normalized, dtype=np.float64) + 1.0) / 2.0 * (b - 1))
    return np.clip(q, 0, b - 1).astype(np.int64)


def bin_representative(q: np.ndarray, b: int) -> np.ndarray:
    """Midpoint of a bin's preimage, clamped to the normalized range."""
    rep = 2.0 * (np.asarray(q, dtype=np.float64) + 0.5) / (b - 1) - 1.0
    return np.clip(rep, -1.0, 1.0)


def flat_index(q: np.ndarray, b: int) -> np.ndarray:
    """Mixed-radix index of per-point digit vectors; slot 0 most significant.

    Accepts (n,) or (..., n); bijective onto [0, b^n).
    """
    qa = np.asarray(q, dtype=np.int64)
    if np.any(qa < 0) or np.any(qa >= b):
        raise LutError(f"digit out of range [0, {b - 1}]")
    n = qa.shape[-1]
    weights = b ** np.arange(n - 1, -1, -1, dtype=np.int64)
    return (qa * weights).sum(axis=-1)


def _encode_batch(rf_points: np.ndarray, b: int):
    """Vectorized encoding of (M, n, 3) receptive fields.

    Returns (normalized (M, n, 3), radius (M,), quantized (M, n, 3)).
    """
    pts = np.asarray(rf_points, dtype=np.float64)
    origin = pts.mean(axis=1, keepdims=True)          # RF centroid
    rel = pts - origin
    radius = np.sqrt(np.square(rel).sum(axis=2)).max(axis=1)
    safe = np.where(radius > 0.0, radius, 1.0)
    normalized = rel / safe[:, None, None]
    return normalized, radius, quantize(normalized, b)


def encode_neighborhood(interp_point, neighbors, n: int, b: int,
                        cloud: PointCloud | None = None) -> EncodedNeighborhood:
    """Encode one receptive field: the interpolated point plus its n-1
    nearest neighbors. ``neighbors`` is a NeighborList (pass the cloud to
    resolve indices) or an (m, 3) array of neighbor positions.
    """
    if b < 2:
        raise LutError(f"need b >= 2, got {b}")
    center = np.asarray(interp_point, dtype=np.float64).reshape(3)
    nb_pos = _neighbor_positions(neighbors, cloud)
    if nb_pos.shape[0] < n - 1:
        raise LutError(f"need {n - 1} neighbors, got {nb_pos.shape[0]}")
    rf = np.concatenate([center[None, :], nb_pos[: n - 1]], axis=0)
    normalized, radius, quantized = _encode_batch(rf[None], b)
    return EncodedNeighborhood(
        center=center,
        radius=float(radius[0]),
        normalized=normalized[0],
        quantized=quantized[0],
    )


def _neighbor_positions(neighbors, cloud: PointCloud | None) -> np.ndarray:
    if isinstance(neighbors, NeighborList):
        if cloud is None:
            raise LutError("resolving a NeighborList requires the cloud")
        return cloud.positions[neighbors.indices].astype(np.float64)
    arr = np.asarray(neighbors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise LutError(f"neighbor positions must be (m, 3), got {arr.shape}")
    return arr


def laplacian_refiner(lam: float) -> RefinementFunction:
    """Pull the interpolated point toward the mean of its neighbors.

    offset = lam * (mean(coords[1:]) - coords[0]), clamped to [-1, 1] so the
    refinement contract holds for every lam in [0, 1].
    """
    if not (0.0 <= lam <= 1.0):
        raise LutError(f"lambda must be in [0, 1], got {lam}")

    def refine(coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        offset = lam * (c[..., 1:].mean(axis=-1) - c[..., 0])
        return np.clip(offset, -1.0, 1.0)

    refine.provenance = f"laplacian(lambda={lam:g})"
    return refine


def build_lut(refiner: RefinementFunction, n: int, b: int,
              provenance: str | None = None) -> LutTable:
    """Evaluate the refiner at every bin-midpoint combination.

    The function is axis-symmetric, so one table serves all three axes (the
    on-disk format still stores three, allowing imported asymmetric tables).
    """
    total = b ** n
    table = np.empty(total, dtype=np.float16)
    weights = b ** np.arange(n - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, _BUILD_CHUNK):
        stop = min(start + _BUILD_CHUNK, total)
        flat = np.arange(start, stop, dtype=np.int64)
        digits = (flat[:, None] // weights[None, :]) % b
        values = refiner(bin_representative(digits, b))
        if not np.all(np.isfinite(values)):
            raise LutError("refiner produced non-finite offsets")
        if np.any(np.abs(values) > 1.0):
            raise LutError("refiner offsets exceed magnitude 1 in normalized space")
        table[start:stop] = values.astype(np.float16)
    if provenance is None:
        provenance = getattr(refiner, "provenance", "custom")
    return LutTable(rf_size=n, bins=b, axis_tables=(table, table, table),
                    provenance=provenance)


def _lookup_offsets(table: LutTable, rf_points: np.ndarray):
    """(M, 3) denormalized offsets for (M, n, 3) receptive fields."""
    _, radius, quantized = _encode_batch(rf_points, table.bins)
    out = np.empty((rf_points.shape[0], 3), dtype=np.float64)
    for axis in range(3):
        idx = flat_index(quantized[:, :, axis], table.bins)
        out[:, axis] = table.axis_tables[axis][idx].astype(np.float64)
    return out * radius[:, None]


def lookup_refine(table: LutTable, interp_point, neighbors,
                  cloud: PointCloud | None = None) -> np.ndarray:
    """Refined position of one interpolated point: encode, fetch one offset
    per axis, scale by the field radius, add. A degenerate (radius 0)
    neighborhood returns the input unchanged.
    """
    center = np.asarray(interp_point, dtype=np.float64).reshape(3)
    nb_pos = _neighbor_positions(neighbors, cloud)
    n = table.rf_size
    if nb_pos.shape[0] < n - 1:
        raise LutError(f"need {n - 1} neighbors, got {nb_pos.shape[0]}")
    rf = np.concatenate([center[None, :], nb_pos[: n - 1]], axis=0)
    offset = _lookup_offsets(table, rf[None])[0]
    return center + offset


def refine_frame(table: LutTable, output: InterpolationOutput) -> PointCloud:
    """Apply lookup_refine to every interpolated point of a frame.

    Original points pass through bit-identical; colors are preserved. New
    points whose merged neighbor list is too short are left where they are.
    """
    n = table.rf_size
    n_orig = output.original_count
    if output.new_count == 0:
        return output.cloud
    if output.neighbor_indices.shape[1] < n - 1:
        raise LutError(
            f"frame neighbor lists hold {output.neighbor_indices.shape[1]} entries; "
            f"table rf_size {n} needs {n - 1}"
        )
    positions = output.cloud.positions.copy()
    mids = positions[n_orig:]
    usable = output.neighbor_complete
    rows = np.flatnonzero(usable)
    if rows.size:
        nb = positions[output.neighbor_indices[rows][:, : n - 1]]
        rf = np.concatenate([mids[rows][:, None, :], nb], axis=1)
        offsets = _lookup_offsets(table, rf)
        positions[n_orig + rows] = (mids[rows].astype(np.float64)
                                    + offsets).astype(np.float32)
    colors = output.cloud.colors.copy() if output.cloud.has_colors else None
    return PointCloud(positions, colors)


def save_lut(table: LutTable, path) -> None:
    """Write the self-describing container (see load_lut for layout)."""
    prov = table.provenance.encode("utf-8")
    head = struct.pack("<4sHHII", _MAGIC, _VERSION, table.rf_size, table.bins, 3)
    head += struct.pack("<I", len(prov)) + prov
    head += b"\0" * (-len(head) % 8)
    with open(path, "wb") as f:
        f.write(head)
        for axis in range(3):
            f.write(table.axis_tables[axis].astype("<f2").tobytes())


def load_lut(path) -> LutTable:
    """Read a table container: magic "VLUT", version u16, rf_size u16,
    bins u32, axis count u32, provenance (u32 length + UTF-8), zero padding
    to 8-byte alignment, then 3 axis tables of b^n little-endian binary16
    values in flat-index order.
    """
    with open(path, "rb") as f:
        fixed = f.read(16)
        if len(fixed) < 16:
            raise LutError(f"truncated header: got {len(fixed)} bytes")
        magic, version, n, b, axes = struct.unpack("<4sHHII", fixed)
        if magic != _MAGIC:
            raise LutError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise LutError(f"unsupported version {version}")
        if axes != 3:
            raise LutError(f"expected 3 axis tables, header says {axes}")
        raw = f.read(4)
        if len(raw) < 4:
            raise LutError("truncated header: provenance length missing")
        (prov_len,) = struct.unpack("<I", raw)
        prov = f.read(prov_len)
        if len(prov) < prov_len:
            raise LutError("truncated header: provenance cut short")
        pad = -(16 + 4 + prov_len) % 8
        f.read(pad)
        per_axis = b ** n * 2
        tables = []
        for axis in range(3):
            payload = f.read(per_axis)
            if len(payload) != per_axis:
                raise LutError(
                    f"size mismatch: axis {axis} expected {per_axis} bytes, "
                    f"got {len(payload)}"
                )
            tables.append(np.frombuffer(payload, dtype="<f2").copy())
        if f.read(1):
            raise LutError("size mismatch: trailing bytes after payload")
    table = LutTable(rf_size=n, bins=b, axis_tables=tuple(tables),
                     provenance=prov.decode("utf-8"))
    for t in table.axis_tables:
        if not np.all(np.isfinite(t.astype(np.float64))):
            raise LutError("table contains non-finite offsets")
    return table
