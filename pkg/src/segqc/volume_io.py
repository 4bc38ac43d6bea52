"""Volumes on disk (MetaImage .mhd/.raw), per-slice CSV reports and JSON files.

Volumes are held in memory as ``(nz, ny, nx)`` arrays with x fastest. MetaImage
headers list ``DimSize``/``ElementSpacing``/``Offset`` in x y z order, so the
reader and writer reverse those triples.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MET_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_FLOAT": np.dtype("<f4"),
}
_KIND_TO_MET = {
    "uint8": "MET_UCHAR",
    "int16": "MET_SHORT",
    "uint16": "MET_USHORT",
    "float32": "MET_FLOAT",
}
ELEMENT_KINDS = tuple(_KIND_TO_MET)


class VolumeFormatError(ValueError):
    """A MetaImage header or payload that cannot be decoded."""


class RecordFormatError(ValueError):
    """A malformed slice-record CSV."""


def _triple(values, name) -> tuple[float, float, float]:
    t = tuple(float(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"{name} needs 3 components, got {len(t)}")
    return t


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with physical spacing (mm).

    ``data`` is stored read-only with shape ``(nz, ny, nx)``. Booleans are
    stored as uint8 and float64 as float32, so every volume has one of the
    four supported element kinds.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        elif arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        if arr.dtype.name not in ELEMENT_KINDS:
            raise ValueError(f"unsupported element kind {arr.dtype.name}")
        arr = np.ascontiguousarray(arr)
        if arr is self.data or np.shares_memory(arr, self.data):
            arr = arr.copy()
        arr.setflags(write=False)
        spacing = _triple(self.spacing, "spacing")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def element_kind(self) -> str:
        return self.data.dtype.name

    def with_data(self, data, spacing=None, origin=None) -> "Volume":
        return Volume(
            data,
            self.spacing if spacing is None else spacing,
            self.origin if origin is None else origin,
        )

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0, 1)).all())

    def is_probability(self) -> bool:
        return bool(((self.data >= 0) & (self.data <= 1)).all())

    def same_as(self, other: "Volume") -> bool:
        """Bit-identical data, kind, spacing and origin."""
        return (
            self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


def _fmt(v: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(v))


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_header(text: str) -> dict[str, str]:
    header = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise VolumeFormatError(f"malformed header line: {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _require(header, key):
    try:
        return header[key]
    except KeyError:
        raise VolumeFormatError(f"missing header key {key}") from None


def read_volume(path) -> Volume:
    """Read a MetaImage volume (.mhd header + raw file, or ``LOCAL`` payload)."""
    path = Path(path)
    blob = path.read_bytes()
    header_end = None
    # LOCAL payloads follow the ElementDataFile line directly
    marker = b"ElementDataFile"
    idx = blob.find(marker)
    if idx < 0:
        raise VolumeFormatError("missing header key ElementDataFile")
    eol = blob.find(b"\n", idx)
    header_end = len(blob) if eol < 0 else eol + 1
    header = parse_header(blob[:header_end].decode("ascii"))

    ndims = int(_require(header, "NDims"))
    if ndims != 3:
        raise VolumeFormatError(f"only 3D volumes are supported, NDims = {ndims}")
    dim_xyz = [int(v) for v in _require(header, "DimSize").split()]
    spacing_xyz = [float(v) for v in _require(header, "ElementSpacing").split()]
    offset_xyz = [float(v) for v in header.get("Offset", "0 0 0").split()]
    if len(dim_xyz) != 3 or len(spacing_xyz) != 3 or len(offset_xyz) != 3:
        raise VolumeFormatError("DimSize, ElementSpacing and Offset need 3 values")
    met = _require(header, "ElementType")
    if met not in MET_TYPES:
        raise VolumeFormatError(f"unsupported ElementType {met}")
    if header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False")) != "False":
        raise VolumeFormatError("big-endian payloads are not supported")
    if header.get("CompressedData", "False") != "False":
        raise VolumeFormatError("compressed payloads are not supported")

    data_file = _require(header, "ElementDataFile")
    if data_file == "LOCAL":
        raw = blob[header_end:]
    else:
        raw_path = path.parent / data_file
        if not raw_path.exists():
            raise VolumeFormatError(f"raw file {raw_path} not found")
        raw = raw_path.read_bytes()

    dtype = MET_TYPES[met]
    nx, ny, nz = dim_xyz
    expected = nx * ny * nz * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"raw payload has {len(raw)} bytes, DimSize {dim_xyz} with {met} needs {expected}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    return Volume(data, tuple(reversed(spacing_xyz)), tuple(reversed(offset_xyz)))


def format_header(v: Volume, data_file: str) -> str:
    nz, ny, nx = v.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "Offset = " + " ".join(_fmt(o) for o in reversed(v.origin)),
        "ElementSpacing = " + " ".join(_fmt(s) for s in reversed(v.spacing)),
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {_KIND_TO_MET[v.element_kind]}",
        f"ElementDataFile = {data_file}",
    ]
    return "\n".join(lines) + "\n"


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as ``path`` (.mhd header) plus a sibling .raw payload."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    payload = v.data.astype(v.data.dtype.newbyteorder("<"), copy=False).tobytes()
    atomic_write_bytes(raw_path, payload)
    atomic_write_text(path, format_header(v, raw_path.name))


# ---------------------------------------------------------------- records

RECORD_COLUMNS = (
    "case_id",
    "slice_index",
    "n_fg",
    "type1",
    "type2",
    "type3",
    "dsc",
    "hd_mm",
    "msd_mm",
    "hd95_mm",
)
MEASURES = ("type1", "type2", "type3")
TARGETS = ("dsc", "hd_mm")


@dataclass
class SliceRecord:
    """One axial slice of one case: uncertainty measures and, with GT, metrics.

    ``None`` marks an undefined or absent value.
    """

    case_id: str
    slice_index: int
    n_fg: int | None = None
    type1: float | None = None
    type2: float | None = None
    type3: float | None = None
    dsc: float | None = None
    hd_mm: float | None = None
    msd_mm: float | None = None
    hd95_mm: float | None = None

    def get(self, name: str):
        if name == "hd":
            name = "hd_mm"
        return getattr(self, name)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        raise TypeError("booleans are not valid record values")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return _fmt(value)


def format_slice_records(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([r.case_id] + [_cell(getattr(r, c)) for c in RECORD_COLUMNS[1:]])
    return buf.getvalue()


def write_slice_records(records, path) -> None:
    atomic_write_text(path, format_slice_records(records))


def _parse_float(text, column, lineno):
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise RecordFormatError(f"line {lineno}: {column}={text!r} is not a number") from None
    if math.isnan(value):
        return None
    return value


def _parse_int(text, column, lineno):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise RecordFormatError(f"line {lineno}: {column}={text!r} is not an integer") from None


def parse_slice_records(text: str) -> list[SliceRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise RecordFormatError("empty file, expected a header row")
    if tuple(rows[0]) != RECORD_COLUMNS:
        raise RecordFormatError(f"unexpected header {rows[0]}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(RECORD_COLUMNS):
            raise RecordFormatError(
                f"line {lineno}: expected {len(RECORD_COLUMNS)} fields, got {len(row)}"
            )
        slice_index = _parse_int(row[1], "slice_index", lineno)
        if slice_index is None:
            raise RecordFormatError(f"line {lineno}: slice_index is required")
        out.append(
            SliceRecord(
                case_id=row[0],
                slice_index=slice_index,
                n_fg=_parse_int(row[2], "n_fg", lineno),
                **{c: _parse_float(row[i], c, lineno) for i, c in enumerate(RECORD_COLUMNS) if i >= 3},
            )
        )
    return out


def read_slice_records(path) -> list[SliceRecord]:
    return parse_slice_records(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------------- json

def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
