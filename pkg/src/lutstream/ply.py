"""PLY reader/writer for the vertex-only subset used by this package.

Supported: ``ascii 1.0`` and ``binary_little_endian 1.0`` files with an
``element vertex`` carrying ``property float x|y|z`` and, optionally, the
trio ``property uchar red|green|blue``. Anything else in the vertex element
is rejected rather than skipped, so malformed data cannot be silently
misinterpreted. Parse errors report the byte offset where they occurred.
"""

from __future__ import annotations

import io

import numpy as np

from .cloud import PointCloud


class PlyError(ValueError):
    """Malformed or unsupported PLY content; carries the offending byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


_POSITION_PROPS = [("float", "x"), ("float", "y"), ("float", "z")]
_COLOR_PROPS = [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
_FLOAT_ALIASES = {"float", "float32"}
_UCHAR_ALIASES = {"uchar", "uint8"}


def load_ply(path) -> PointCloud:
    """Read a PLY file, preserving point order from the file."""
    with open(path, "rb") as f:
        fmt, count, has_colors, header_end = _parse_header(f)
        if fmt == "binary_little_endian":
            return _read_binary(f, count, has_colors, header_end)
        return _read_ascii(f, count, has_colors, header_end)


def _parse_header(f) -> tuple[str, int, bool, int]:
    offset = 0

    def read_line() -> tuple[str, int]:
        nonlocal offset
        start = offset
        raw = f.readline()
        if not raw:
            raise PlyError("unexpected end of file inside header", start)
        offset += len(raw)
        return raw.decode("ascii", errors="replace").strip(), start

    line, at = read_line()
    if line != "ply":
        raise PlyError("not a PLY file (missing 'ply' magic)", at)

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line, at = read_line()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        fields = line.split()
        if fields[0] == "format":
            if len(fields) != 3 or fields[2] != "1.0":
                raise PlyError(f"unsupported format line {line!r}", at)
            if fields[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported PLY format {fields[1]!r}", at)
            fmt = fields[1]
        elif fields[0] == "element":
            if len(fields) != 3:
                raise PlyError(f"malformed element line {line!r}", at)
            if fields[1] == "vertex":
                try:
                    count = int(fields[2])
                except ValueError:
                    raise PlyError(f"bad vertex count {fields[2]!r}", at) from None
                if count < 0:
                    raise PlyError(f"negative vertex count {count}", at)
                in_vertex = True
            else:
                if count is None:
                    raise PlyError(f"expected 'element vertex' first, got {line!r}", at)
                in_vertex = False  # trailing elements are ignored on read
        elif fields[0] == "property":
            if not in_vertex:
                continue
            if len(fields) != 3:
                raise PlyError(f"unsupported property {line!r}", at)
            props.append((fields[1], fields[2]))
        elif fields[0] == "end_header":
            break
        else:
            raise PlyError(f"unrecognized header line {line!r}", at)

    if fmt is None:
        raise PlyError("header missing format line", offset)
    if count is None:
        raise PlyError("header missing 'element vertex'", offset)

    norm = [
        ("float" if t in _FLOAT_ALIASES else "uchar" if t in _UCHAR_ALIASES else t, n)
        for t, n in props
    ]
    if norm == _POSITION_PROPS:
        has_colors = False
    elif norm == _POSITION_PROPS + _COLOR_PROPS:
        has_colors = True
    else:
        raise PlyError(
            f"unsupported vertex properties {props}; need float x,y,z "
            "(+ optional uchar red,green,blue)",
            offset,
        )
    return fmt, count, has_colors, offset


def _record_dtype(has_colors: bool) -> np.dtype:
    fields = [("xyz", "<f4", (3,))]
    if has_colors:
        fields.append(("rgb", "u1", (3,)))
    return np.dtype(fields)


def _read_binary(f, count, has_colors, header_end) -> PointCloud:
    dtype = _record_dtype(has_colors)
    expected = count * dtype.itemsize
    payload = f.read(expected)
    if len(payload) < expected:
        raise PlyError(
            f"truncated payload: expected {expected} bytes for {count} vertices, "
            f"got {len(payload)}",
            header_end + len(payload),
        )
    records = np.frombuffer(payload, dtype=dtype, count=count)
    positions = records["xyz"].copy()
    if not np.all(np.isfinite(positions)):
        bad = int(np.flatnonzero(~np.isfinite(positions).all(axis=1))[0])
        raise PlyError(
            f"non-finite position in vertex {bad}", header_end + bad * dtype.itemsize
        )
    colors = records["rgb"].copy() if has_colors else None
    return PointCloud(positions, colors)


def _read_ascii(f, count, has_colors, header_end) -> PointCloud:
    n_fields = 6 if has_colors else 3
    positions = np.empty((count, 3), dtype=np.float32)
    colors = np.empty((count, 3), dtype=np.uint8) if has_colors else None
    offset = header_end
    for i in range(count):
        raw = f.readline()
        if not raw:
            raise PlyError(f"truncated payload: vertex {i} of {count} missing", offset)
        fields = raw.split()
        if len(fields) != n_fields:
            raise PlyError(
                f"vertex {i}: expected {n_fields} values, got {len(fields)}", offset
            )
        try:
            positions[i] = [np.float32(v) for v in fields[:3]]
            if has_colors:
                rgb = [int(v) for v in fields[3:]]
                if any(not 0 <= c <= 255 for c in rgb):
                    raise ValueError(rgb)
                colors[i] = rgb
        except ValueError:
            raise PlyError(f"vertex {i}: unparseable values {raw!r}", offset) from None
        if not np.all(np.isfinite(positions[i])):
            raise PlyError(f"vertex {i}: non-finite position", offset)
        offset += len(raw)
    return PointCloud(positions, colors)


def save_ply(cloud: PointCloud, path, format: str = "binary") -> None:
    """Write a cloud as PLY; ``format`` is "ascii" or "binary".

    Binary output reloads with bit-exact positions. ASCII uses %.9g, which
    also round-trips float32 exactly.
    """
    if format not in ("ascii", "binary"):
        raise ValueError(f"format must be 'ascii' or 'binary', got {format!r}")
    fmt_line = "ascii 1.0" if format == "ascii" else "binary_little_endian 1.0"
    header = io.StringIO()
    header.write("ply\n")
    header.write(f"format {fmt_line}\n")
    header.write(f"element vertex {len(cloud)}\n")
    header.write("property float x\nproperty float y\nproperty float z\n")
    if cloud.has_colors:
        header.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
    header.write("end_header\n")

    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        if format == "binary":
            records = np.empty(len(cloud), dtype=_record_dtype(cloud.has_colors))
            records["xyz"] = cloud.positions
            if cloud.has_colors:
                records["rgb"] = cloud.colors
            f.write(records.tobytes())
        else:
            for i in range(len(cloud)):
                x, y, z = cloud.positions[i]
                line = f"{x:.9g} {y:.9g} {z:.9g}"
                if cloud.has_colors:
                    r, g, b = cloud.colors[i]
                    line += f" {r} {g} {b}"
                f.write((line + "\n").encode("ascii"))
