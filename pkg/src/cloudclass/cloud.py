"""Point clouds, core-point subsampling and bit-exact text I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

from .errors import CloudParseError, SchemaError

logger = logging.getLogger(__name__)

ROLES = ("PC1", "PC2", "CTX", "CORE")

# Canonical column order used when writing files.
COLUMNS = (
    "x", "y", "z", "intensity", "return_number", "number_of_returns",
    "classification", "r", "g", "b",
)
INT_COLUMNS = frozenset({"return_number", "number_of_returns", "classification", "predicted_class"})

UNLABELLED = 0


@dataclass(frozen=True)
class Point:
    """One lidar echo. Optional attributes are ``None`` when absent."""

    x: float
    y: float
    z: float
    intensity: Optional[float] = None
    return_number: Optional[int] = None
    number_of_returns: Optional[int] = None
    class_id: Optional[int] = None
    r: Optional[float] = None
    g: Optional[float] = None
    b: Optional[float] = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise SchemaError("point coordinates must be finite")
        rn, nr = self.return_number, self.number_of_returns
        if rn is not None and rn < 1:
            raise SchemaError("return_number must be >= 1")
        if nr is not None and nr < 1:
            raise SchemaError("number_of_returns must be >= 1")
        if rn is not None and nr is not None and rn > nr:
            raise SchemaError("return_number exceeds number_of_returns")


def echo_ratio(p: Point) -> float:
    """Return number divided by number of returns."""
    return p.return_number / p.number_of_returns


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class PointCloud:
    """Immutable column-oriented point cloud.

    Coordinates live in an ``(n, 3)`` float64 array; each optional lidar
    attribute is either an ``(n,)`` array or ``None``. Arrays are flagged
    read-only, so instances can be shared between worker threads.
    """

    __slots__ = ("_xyz", "_attrs", "_extra", "_role")

    def __init__(
        self,
        xyz,
        *,
        intensity=None,
        return_number=None,
        number_of_returns=None,
        classification=None,
        rgb=None,
        extra: Optional[Dict[str, np.ndarray]] = None,
        role: str = "PC1",
    ):
        if role not in ROLES:
            raise ValueError(f"unknown cloud role {role!r}")
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(xyz)):
            raise SchemaError("point coordinates must be finite")
        n = len(xyz)
        attrs = {}
        for name, arr, dtype in (
            ("intensity", intensity, np.float64),
            ("return_number", return_number, np.int64),
            ("number_of_returns", number_of_returns, np.int64),
            ("classification", classification, np.int64),
        ):
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=dtype).reshape(-1)
            if len(arr) != n:
                raise SchemaError(f"{name} has {len(arr)} values for {n} points")
            attrs[name] = _frozen(arr)
        if rgb is not None:
            rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
            if len(rgb) != n:
                raise SchemaError(f"rgb has {len(rgb)} rows for {n} points")
            attrs["rgb"] = _frozen(rgb)
        rn, nr = attrs.get("return_number"), attrs.get("number_of_returns")
        if rn is not None and np.any(rn < 1):
            raise SchemaError("return_number must be >= 1")
        if nr is not None and np.any(nr < 1):
            raise SchemaError("number_of_returns must be >= 1")
        if rn is not None and nr is not None and np.any(rn > nr):
            bad = int(np.flatnonzero(rn > nr)[0])
            raise SchemaError(f"point {bad}: return_number exceeds number_of_returns")
        self._xyz = _frozen(xyz)
        self._attrs = attrs
        self._extra = {k: _frozen(np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items()}
        self._role = role

    # -- read-only views -------------------------------------------------

    @property
    def xyz(self) -> np.ndarray:
        return self._xyz

    @property
    def role(self) -> str:
        return self._role

    @property
    def intensity(self) -> Optional[np.ndarray]:
        return self._attrs.get("intensity")

    @property
    def return_number(self) -> Optional[np.ndarray]:
        return self._attrs.get("return_number")

    @property
    def number_of_returns(self) -> Optional[np.ndarray]:
        return self._attrs.get("number_of_returns")

    @property
    def classification(self) -> Optional[np.ndarray]:
        return self._attrs.get("classification")

    @property
    def rgb(self) -> Optional[np.ndarray]:
        return self._attrs.get("rgb")

    @property
    def extra(self) -> Dict[str, np.ndarray]:
        return dict(self._extra)

    @property
    def echo_ratio(self) -> Optional[np.ndarray]:
        rn, nr = self.return_number, self.number_of_returns
        if rn is None or nr is None:
            return None
        return rn / nr

    def __len__(self) -> int:
        return len(self._xyz)

    def __setattr__(self, name, value):
        if hasattr(self, "_role"):
            raise AttributeError("PointCloud is immutable")
        object.__setattr__(self, name, value)

    def point(self, i: int) -> Point:
        def opt(name, cast):
            a = self._attrs.get(name)
            return None if a is None else cast(a[i])

        rgb = self.rgb
        x, y, z = (float(v) for v in self._xyz[i])
        return Point(
            x, y, z,
            intensity=opt("intensity", float),
            return_number=opt("return_number", int),
            number_of_returns=opt("number_of_returns", int),
            class_id=opt("classification", int),
            r=None if rgb is None else float(rgb[i, 0]),
            g=None if rgb is None else float(rgb[i, 1]),
            b=None if rgb is None else float(rgb[i, 2]),
        )

    def __iter__(self) -> Iterator[Point]:
        for i in range(len(self)):
            yield self.point(i)

    def columns(self) -> Dict[str, np.ndarray]:
        """Attribute columns keyed by their file header name, in canonical order."""
        cols = {"x": self._xyz[:, 0], "y": self._xyz[:, 1], "z": self._xyz[:, 2]}
        for name in ("intensity", "return_number", "number_of_returns", "classification"):
            if name in self._attrs:
                cols[name] = self._attrs[name]
        if "rgb" in self._attrs:
            for j, name in enumerate("rgb"):
                cols[name] = self._attrs["rgb"][:, j]
        cols.update(self._extra)
        return cols

    def subset(self, index, role: Optional[str] = None) -> "PointCloud":
        """New cloud holding the points at ``index`` (order preserved)."""
        index = np.asarray(index)
        return PointCloud(
            self._xyz[index],
            intensity=_take(self.intensity, index),
            return_number=_take(self.return_number, index),
            number_of_returns=_take(self.number_of_returns, index),
            classification=_take(self.classification, index),
            rgb=_take(self.rgb, index),
            extra={k: v[index] for k, v in self._extra.items()},
            role=role or self._role,
        )

    def with_columns(self, role: Optional[str] = None, **extra) -> "PointCloud":
        """Copy of the cloud with additional (or replaced) extra columns."""
        merged = dict(self._extra)
        merged.update(extra)
        return PointCloud(
            self._xyz,
            intensity=self.intensity,
            return_number=self.return_number,
            number_of_returns=self.number_of_returns,
            classification=self.classification,
            rgb=self.rgb,
            extra=merged,
            role=role or self._role,
        )

    def translated(self, offset) -> "PointCloud":
        return PointCloud(
            self._xyz + np.asarray(offset, dtype=np.float64),
            intensity=self.intensity,
            return_number=self.return_number,
            number_of_returns=self.number_of_returns,
            classification=self.classification,
            rgb=self.rgb,
            extra=self._extra,
            role=self._role,
        )

    def equals(self, other: "PointCloud") -> bool:
        """Field-for-field equality (bitwise on floats, NaN-aware)."""
        a, b = self.columns(), other.columns()
        if list(a) != list(b):
            return False
        return all(np.array_equal(a[k], b[k], equal_nan=True) for k in a)


def _take(arr, index):
    return None if arr is None else arr[index]


def filter_by_class(cloud: PointCloud, class_id: int) -> PointCloud:
    """Points whose classification equals ``class_id``; may be empty."""
    if cloud.classification is None:
        raise SchemaError("cloud has no classification attribute")
    return cloud.subset(np.flatnonzero(cloud.classification == class_id))


def subsample_grid(cloud: PointCloud, spacing: float) -> np.ndarray:
    """Indices of a regular 3D-grid subsample of ``cloud``.

    The grid has cubic cells of edge ``spacing`` anchored at the cloud's
    minimum corner; in every occupied cell the point nearest the cell centre
    is kept (ties: lowest index). Indices are returned in ascending order.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    xyz = cloud.xyz
    if len(xyz) == 0:
        return np.empty(0, dtype=np.int64)
    origin = xyz.min(axis=0)
    cell = np.floor((xyz - origin) / spacing).astype(np.int64)
    centre = origin + (cell + 0.5) * spacing
    d = xyz - centre
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    _, cell_id = np.unique(cell, axis=0, return_inverse=True)
    cell_id = cell_id.reshape(-1)
    idx = np.arange(len(xyz))
    order = np.lexsort((idx, d2, cell_id))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_id[order[1:]] != cell_id[order[:-1]]
    return np.sort(order[first])


# -- file I/O -------------------------------------------------------------


def _fmt_value(v, is_int: bool) -> str:
    if is_int:
        return str(int(v))
    return repr(float(v))


def _parse_value(tok: str, is_int: bool):
    if is_int:
        try:
            return int(tok)
        except ValueError:
            f = float(tok)
            if not f.is_integer():
                raise ValueError(f"expected an integer, got {tok!r}")
            return int(f)
    return float(tok)


def _build_cloud(names, columns, role, path) -> PointCloud:
    for req in ("x", "y", "z"):
        if req not in names:
            raise SchemaError(f"{path}: missing mandatory column {req!r}")
    n = len(columns[names[0]]) if names else 0
    arr = {k: np.asarray(columns[k]) for k in names}
    rn, nr = arr.get("return_number"), arr.get("number_of_returns")
    if rn is not None and nr is not None and np.any(rn > nr):
        bad = int(np.flatnonzero(rn > nr)[0])
        raise SchemaError(f"{path}: point {bad}: return_number exceeds number_of_returns")
    rgb_names = [c for c in "rgb" if c in arr]
    if rgb_names and len(rgb_names) != 3:
        raise SchemaError(f"{path}: r, g and b must be given together")
    known = set(COLUMNS)
    return PointCloud(
        np.column_stack([arr["x"], arr["y"], arr["z"]]) if n else np.empty((0, 3)),
        intensity=arr.get("intensity"),
        return_number=rn,
        number_of_returns=nr,
        classification=arr.get("classification"),
        rgb=np.column_stack([arr["r"], arr["g"], arr["b"]]) if rgb_names else None,
        extra={k: v for k, v in arr.items() if k not in known},
        role=role,
    )


def _read_rows(path, lines, start_line, names, sep):
    is_int = [n in INT_COLUMNS for n in names]
    cols = {n: [] for n in names}
    for lineno, line in enumerate(lines, start=start_line):
        text = line.strip()
        if not text:
            continue
        toks = text.split(sep) if sep else text.split()
        if len(toks) != len(names):
            raise CloudParseError(path, lineno, f"expected {len(names)} values, got {len(toks)}")
        for name, tok, as_int in zip(names, toks, is_int):
            try:
                v = _parse_value(tok.strip(), as_int)
            except ValueError as exc:
                raise CloudParseError(path, lineno, f"column {name!r}: {exc}") from None
            if not as_int and name in ("x", "y", "z") and not math.isfinite(v):
                raise CloudParseError(path, lineno, f"non-finite coordinate in column {name!r}")
            cols[name].append(v)
        rn_i = names.index("return_number") if "return_number" in names else -1
        nr_i = names.index("number_of_returns") if "number_of_returns" in names else -1
        if rn_i >= 0 and nr_i >= 0:
            rn, nr = cols["return_number"][-1], cols["number_of_returns"][-1]
            if rn < 1 or nr < 1 or rn > nr:
                raise SchemaError(
                    f"{path}:{lineno}: invalid echo numbering (return {rn} of {nr})"
                )
    return {
        n: np.array(v, dtype=np.int64 if n in INT_COLUMNS else np.float64)
        for n, v in cols.items()
    }


def _check_header(path, names):
    if len(set(names)) != len(names):
        raise SchemaError(f"{path}: duplicate column in header")
    for n in names:
        if not n:
            raise SchemaError(f"{path}: empty column name in header")


def load_cloud(path, fmt: Optional[str] = None, role: str = "PC1") -> PointCloud:
    """Read a delimited-text (``.txt``/``.csv``) or ASCII PLY cloud.

    Columns are matched by header name; absent optional columns leave the
    corresponding attribute unset. Unknown columns are kept as extras.
    """
    path = Path(path)
    fmt = fmt or ("ascii-ply" if path.suffix.lower() == ".ply" else "delimited-text")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if fmt == "delimited-text":
        if not lines:
            raise SchemaError(f"{path}: empty file (header required)")
        names = [t.strip() for t in lines[0].split(",")]
        _check_header(path, names)
        cols = _read_rows(path, lines[1:], 2, names, ",")
        return _build_cloud(names, cols, role, path)
    if fmt == "ascii-ply":
        return _load_ply(path, lines, role)
    raise ValueError(f"unsupported cloud format {fmt!r}")


def _load_ply(path, lines, role):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "missing 'ply' magic")
    names, count, end = [], None, None
    for i, line in enumerate(lines[1:], start=2):
        toks = line.split()
        if not toks:
            continue
        if toks[0] == "format" and toks[1] != "ascii":
            raise CloudParseError(path, i, "only ascii PLY is supported")
        elif toks[0] == "element":
            if toks[1] != "vertex":
                raise CloudParseError(path, i, f"unsupported element {toks[1]!r}")
            count = int(toks[2])
        elif toks[0] == "property":
            names.append(toks[-1])
        elif toks[0] == "end_header":
            end = i
            break
    if end is None or count is None:
        raise CloudParseError(path, len(lines), "incomplete PLY header")
    _check_header(path, names)
    body = lines[end:end + count]
    if len([b for b in body if b.strip()]) != count:
        raise CloudParseError(path, end + len(body), f"expected {count} vertices")
    cols = _read_rows(path, body, end + 1, names, None)
    return _build_cloud(names, cols, role, path)


def save_cloud(cloud: PointCloud, path, fmt: Optional[str] = None) -> None:
    """Write a cloud so that :func:`load_cloud` reproduces it exactly."""
    path = Path(path)
    fmt = fmt or ("ascii-ply" if path.suffix.lower() == ".ply" else "delimited-text")
    cols = cloud.columns()
    names = list(cols)
    is_int = [n in INT_COLUMNS for n in names]
    arrays = [cols[n] for n in names]
    sep = "," if fmt == "delimited-text" else " "
    rows = (
        sep.join([_fmt_value(a[i], f) for a, f in zip(arrays, is_int)])
        for i in range(len(cloud))
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if fmt == "delimited-text":
            fh.write(",".join(names) + "\n")
        elif fmt == "ascii-ply":
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(cloud)}\n")
            for n, f in zip(names, is_int):
                fh.write(f"property {'int' if f else 'double'} {n}\n")
            fh.write("end_header\n")
        else:
            raise ValueError(f"unsupported cloud format {fmt!r}")
        for row in rows:
            fh.write(row + "\n")
