"""File formats: PLY point clouds, tree tables, ESRI ASCII rasters and JSON reports."""

from __future__ import annotations

__all__ = [
    "PlyError",
    "read_ply",
    "ply_vertex_properties",
    "write_ply",
    "write_tree_csv",
    "read_tree_csv",
    "write_esri_ascii",
    "read_esri_ascii",
    "read_field_dbh_csv",
    "write_json",
]

import csv
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .core import STANDARD_ATTRIBUTES, LabeledPointCloud, SemanticClass

PathLike = Union[str, Path]

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}
_NUMPY_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint",
                 "f4": "float", "f8": "double"}
_RESERVED = {"x", "y", "z", "semantic", "instance"}

TREE_CSV_HEADER = [
    "tree_id",
    "x",
    "y",
    "height_m",
    "crown_diameter_m",
    "crown_volume_all_m3",
    "crown_volume_live_m3",
    "dbh_cm",
    "location_fallback",
]


class PlyError(ValueError):
    """Malformed or truncated PLY input. ``offset`` is the byte offset at which the problem was detected."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class _Element:
    def __init__(self, name: str, count: int):
        self.name = name
        self.count = count
        self.properties: List[Tuple[str, str]] = []


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PlyError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("missing end_header", len(data))
    newline = data.find(b"\n", end)
    body_start = len(data) if newline < 0 else newline + 1
    fmt = None
    comments: List[str] = []
    elements: List[_Element] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if not tokens or tokens[0] == "ply":
            pass
        elif tokens[0] == "format":
            if len(tokens) < 3 or tokens[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"unsupported format line {line!r}", offset)
            fmt = tokens[1]
        elif tokens[0] in ("comment", "obj_info"):
            comments.append(line[len(tokens[0]):].strip())
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyError(f"malformed element line {line!r}", offset)
            elements.append(_Element(tokens[1], int(tokens[2])))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property declared before any element", offset)
            if len(tokens) >= 2 and tokens[1] == "list":
                raise PlyError("list properties are not supported", offset)
            if len(tokens) != 3 or tokens[1] not in _PLY_TYPES:
                raise PlyError(f"malformed property line {line!r}", offset)
            elements[-1].properties.append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise PlyError(f"unexpected header line {line!r}", offset)
        offset += len(raw) + 1
    if fmt is None:
        raise PlyError("missing format line", 0)
    return fmt, comments, elements, body_start


def _read_binary(data: bytes, pos: int, element: _Element, endian: str) -> Tuple[np.ndarray, int]:
    dtype = np.dtype([(name, endian + code) for name, code in element.properties])
    needed = element.count * dtype.itemsize
    available = len(data) - pos
    if available < needed:
        record = available // dtype.itemsize if dtype.itemsize else 0
        raise PlyError(
            f"truncated payload: element {element.name!r} record {record} of {element.count} is missing",
            pos + record * dtype.itemsize,
        )
    array = np.frombuffer(data, dtype=dtype, count=element.count, offset=pos)
    return array, pos + needed


def _read_ascii(data: bytes, pos: int, element: _Element) -> Tuple[np.ndarray, int]:
    dtype = np.dtype([(name, code) for name, code in element.properties])
    array = np.zeros(element.count, dtype=dtype)
    for record in range(element.count):
        while pos < len(data) and data[pos:pos + 1] in (b"\n", b"\r", b" ", b"\t"):
            pos += 1
        if pos >= len(data):
            raise PlyError(
                f"truncated payload: element {element.name!r} record {record} of {element.count} is missing", pos
            )
        newline = data.find(b"\n", pos)
        newline = len(data) if newline < 0 else newline
        tokens = data[pos:newline].split()
        if len(tokens) != len(element.properties):
            raise PlyError(
                f"record {record} of element {element.name!r} has {len(tokens)} values, "
                f"expected {len(element.properties)}",
                pos,
            )
        try:
            array[record] = tuple(
                float(tok) if code.startswith("f") else int(tok) for tok, (_, code) in zip(tokens, element.properties)
            )
        except ValueError as exc:
            raise PlyError(f"record {record}: {exc}", pos) from None
        pos = newline + 1
    return array, pos


def _crs_offset(comments: Iterable[str]) -> Tuple[float, float, float]:
    for comment in comments:
        tokens = comment.split()
        if len(tokens) == 4 and tokens[0] == "crs_offset":
            return tuple(float(t) for t in tokens[1:])  # type: ignore[return-value]
    return (0.0, 0.0, 0.0)


def ply_vertex_properties(path: PathLike) -> List[str]:
    """Names of the ``vertex`` properties declared in a PLY header."""
    with open(path, "rb") as handle:
        head = b""
        while b"end_header" not in head:
            chunk = handle.read(4096)
            if not chunk:
                break
            head += chunk
    _, _, elements, _ = _parse_header(head)
    for element in elements:
        if element.name == "vertex":
            return [name for name, _ in element.properties]
    raise PlyError("no vertex element", 0)


def read_ply(path: PathLike, extra: Optional[Dict[str, np.ndarray]] = None) -> LabeledPointCloud:
    """Read a labeled cloud from an ASCII or binary PLY file.

    The ``vertex`` element must carry ``x``, ``y`` and ``z``. ``semantic`` and ``instance`` are optional; missing
    labels become ``Unlabeled`` and ``-1`` respectively, and semantic codes outside the known range map to
    ``Unlabeled``. Properties other than coordinates and labels become per-point attributes. If ``extra`` is a
    dict, reserved properties that are neither coordinates nor labels (such as ``block_id``) are also put there.
    """
    data = Path(path).read_bytes()
    fmt, comments, elements, pos = _parse_header(data)
    vertices = None
    for element in elements:
        if fmt == "ascii":
            array, pos = _read_ascii(data, pos, element)
        else:
            array, pos = _read_binary(data, pos, element, "<" if fmt == "binary_little_endian" else ">")
        if element.name == "vertex":
            vertices = array
    if vertices is None:
        raise PlyError("no vertex element", 0)
    names = vertices.dtype.names or ()
    missing = [axis for axis in "xyz" if axis not in names]
    if missing:
        raise PlyError(f"vertex element lacks coordinate properties {missing}", 0)
    xyz = np.column_stack([vertices[axis].astype(np.float64) for axis in "xyz"]) if len(vertices) else np.zeros((0, 3))
    semantic = None
    if "semantic" in names:
        codes = vertices["semantic"].astype(np.int64)
        codes[(codes < 0) | (codes > max(SemanticClass))] = SemanticClass.UNLABELED
        semantic = codes.astype(np.uint8)
    instance = vertices["instance"].astype(np.int32) if "instance" in names else None
    attributes = {}
    for name in names:
        if name in _RESERVED:
            continue
        if name == "block_id" and extra is not None:
            extra[name] = vertices[name].astype(np.int64)
            continue
        values = vertices[name]
        attributes[name] = values.astype(STANDARD_ATTRIBUTES.get(name, "f8"))
    return LabeledPointCloud(xyz, semantic, instance, attributes, _crs_offset(comments))


def write_ply(
    cloud: LabeledPointCloud,
    path: PathLike,
    binary: bool = True,
    extra: Optional[Dict[str, np.ndarray]] = None,
    comments: Iterable[str] = (),
) -> None:
    """Write a cloud to PLY. Coordinates are stored as float64 so that reading back is bit-exact."""
    columns: List[Tuple[str, str, np.ndarray]] = [
        ("x", "f8", cloud.xyz[:, 0]),
        ("y", "f8", cloud.xyz[:, 1]),
        ("z", "f8", cloud.xyz[:, 2]),
    ]
    for name in cloud.attribute_names():
        code = STANDARD_ATTRIBUTES.get(name, "f8").lstrip("<")
        columns.append((name, code, cloud.attributes[name]))
    columns.append(("semantic", "u1", cloud.semantic))
    columns.append(("instance", "i4", cloud.instance))
    for name, values in (extra or {}).items():
        columns.append((name, "i4", np.asarray(values)))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    offset = cloud.crs_offset
    header.append(f"comment crs_offset {offset[0]!r} {offset[1]!r} {offset[2]!r}")
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {len(cloud)}")
    header += [f"property {_NUMPY_TO_PLY[code]} {name}" for name, code, _ in columns]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(name, "<" + code) for name, code, _ in columns])
        table = np.empty(len(cloud), dtype=dtype)
        for name, _, values in columns:
            table[name] = values
        body = table.tobytes()
    else:
        lines = []
        for row in range(len(cloud)):
            parts = []
            for _, code, values in columns:
                v = values[row]
                parts.append(repr(float(v)) if code.startswith("f") else str(int(v)))
            lines.append(" ".join(parts))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    Path(path).write_bytes(head + body)


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value))


def write_tree_csv(records, path: PathLike) -> None:
    """Write tree records to the tree table CSV. Absent attributes are written as empty cells."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TREE_CSV_HEADER)
        for r in records:
            writer.writerow(
                [
                    int(r.tree_id),
                    _fmt(r.location[0]),
                    _fmt(r.location[1]),
                    _fmt(r.height),
                    _fmt(r.crown_diameter),
                    _fmt(r.crown_volume_all),
                    _fmt(r.crown_volume_live),
                    _fmt(r.dbh),
                    int(bool(r.location_fallback)),
                ]
            )


def read_tree_csv(path: PathLike) -> List[Dict[str, Optional[float]]]:
    rows = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != TREE_CSV_HEADER:
            raise ValueError(f"unexpected tree table header {reader.fieldnames}")
        for row in reader:
            rows.append({key: (float(value) if value != "" else None) for key, value in row.items()})
    return rows


def read_field_dbh_csv(path: PathLike) -> Dict[int, float]:
    """Field-measured DBH table with header ``tree_id,dbh_cm``."""
    out = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"tree_id", "dbh_cm"} <= set(reader.fieldnames):
            raise ValueError("field DBH CSV must have columns tree_id,dbh_cm")
        for row in reader:
            if row["dbh_cm"].strip():
                out[int(row["tree_id"])] = float(row["dbh_cm"])
    return out


NODATA = -9999


def write_esri_ascii(heights: np.ndarray, covered: np.ndarray, origin: Tuple[float, float], cell: float,
                     path: PathLike) -> None:
    """Write a raster whose row 0 is the southernmost row. Uncovered cells become NODATA."""
    nrows, ncols = heights.shape
    lines = [
        f"ncols {ncols}",
        f"nrows {nrows}",
        f"xllcorner {origin[0]!r}",
        f"yllcorner {origin[1]!r}",
        f"cellsize {cell!r}",
        f"NODATA_value {NODATA}",
    ]
    for row in range(nrows - 1, -1, -1):
        lines.append(
            " ".join(repr(float(v)) if ok else str(NODATA) for v, ok in zip(heights[row], covered[row]))
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_esri_ascii(path: PathLike):
    """Inverse of :func:`write_esri_ascii`: returns ``(heights, covered, origin, cell)``."""
    lines = Path(path).read_text().splitlines()
    header = {}
    for line in lines[:6]:
        key, value = line.split()
        header[key.lower()] = value
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    nodata = float(header["nodata_value"])
    grid = np.array([[float(v) for v in line.split()] for line in lines[6:6 + nrows]])[::-1]
    if grid.shape != (nrows, ncols):
        raise ValueError("raster body does not match header dimensions")
    covered = grid != nodata
    return grid, covered, (float(header["xllcorner"]), float(header["yllcorner"])), float(header["cellsize"])


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _sanitize(value):
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, dict):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(float(value)):
        return None
    return value


def write_json(document, path: PathLike) -> None:
    """Deterministic JSON (sorted keys, non-finite floats as null)."""
    text = json.dumps(_sanitize(document), default=_json_default, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")
