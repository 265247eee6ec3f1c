"""Volume file I/O.

Two interchangeable on-disk forms:

* NRRD subset: 3-D, little-endian, `raw` or `gzip` encoding, axis-aligned
  (diagonal) space directions. Data is written as `double` so that
  load(save(v)) reproduces `v` bit for bit.
* Raw sidecar: `<name>.raw` (little-endian float64, x-fastest) plus
  `<name>.meta` with `key = value` lines for dims/spacing/origin/dtype.

Writes are atomic: a temp file in the target directory is renamed over the
destination only after a successful write.
"""
from __future__ import annotations

import gzip
import os

import numpy as np

from ._ioutil import atomic_write_bytes
from .errors import CorruptFileError, FormatError
from .volume import Grid, Volume

_NRRD_DTYPES = {
    "uchar": "<u1", "unsigned char": "<u1", "uint8": "<u1", "uint8_t": "<u1",
    "short": "<i2", "signed short": "<i2", "int16": "<i2", "int16_t": "<i2",
    "ushort": "<u2", "unsigned short": "<u2", "uint16": "<u2", "uint16_t": "<u2",
    "int": "<i4", "signed int": "<i4", "int32": "<i4", "int32_t": "<i4",
    "uint": "<u4", "unsigned int": "<u4", "uint32": "<u4", "uint32_t": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_vector(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise FormatError(f"malformed vector {text!r}")
    return tuple(float(p) for p in text[1:-1].split(","))


def _parse_space_directions(value: str) -> tuple[float, float, float]:
    parts = value.replace(") (", ")|(").replace(")(", ")|(").split("|")
    vecs = [p for p in (s.strip() for s in parts) if p and p != "none"]
    if len(vecs) != 3:
        raise FormatError(f"need 3 space direction vectors, got {value!r}")
    spacing = []
    for axis, vec in enumerate(vecs):
        comps = _parse_vector(vec)
        if len(comps) != 3:
            raise FormatError(f"space direction {vec!r} is not 3-D")
        for j, c in enumerate(comps):
            if j != axis and c != 0.0:
                raise FormatError("only axis-aligned space directions are supported")
        if comps[axis] <= 0:
            raise FormatError("axis-flipping space directions are not supported")
        spacing.append(comps[axis])
    return tuple(spacing)


def read_nrrd(path: str) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    eoh = blob.find(b"\n\n")
    if eoh < 0:
        raise CorruptFileError(f"{path}: no end-of-header blank line")
    try:
        header_text = blob[:eoh].decode("ascii")
    except UnicodeDecodeError as e:
        raise CorruptFileError(f"{path}: non-ascii header") from e
    payload = blob[eoh + 2:]
    lines = header_text.split("\n")
    if not lines or not lines[0].startswith("NRRD000"):
        raise FormatError(f"{path}: missing NRRD magic")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            continue  # key/value metadata, not a field
        if ":" not in line:
            raise CorruptFileError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.strip()

    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise CorruptFileError(f"{path}: missing header field {required!r}")
    if fields["dimension"] != "3":
        raise FormatError(f"{path}: only 3-D volumes supported")
    type_name = fields["type"].lower()
    if type_name not in _NRRD_DTYPES:
        raise FormatError(f"{path}: unsupported type {fields['type']!r}")
    dtype = np.dtype(_NRRD_DTYPES[type_name])
    if dtype.itemsize > 1:
        endian = fields.get("endian", "little").lower()
        if endian != "little":
            raise FormatError(f"{path}: unsupported endian {endian!r}")
    sizes = tuple(int(s) for s in fields["sizes"].split())
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise CorruptFileError(f"{path}: bad sizes {fields['sizes']!r}")

    if "space directions" in fields:
        spacing = _parse_space_directions(fields["space directions"])
    elif "spacings" in fields:
        spacing = tuple(float(s) for s in fields["spacings"].split())
        if len(spacing) != 3:
            raise CorruptFileError(f"{path}: bad spacings")
    else:
        spacing = (1.0, 1.0, 1.0)
    origin = (0.0, 0.0, 0.0)
    if "space origin" in fields:
        origin = _parse_vector(fields["space origin"])
        if len(origin) != 3:
            raise CorruptFileError(f"{path}: bad space origin")

    encoding = fields["encoding"].lower()
    if encoding in ("gzip", "gz"):
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError) as e:
            raise CorruptFileError(f"{path}: bad gzip stream") from e
    elif encoding != "raw":
        raise FormatError(f"{path}: unsupported encoding {encoding!r}")

    n = sizes[0] * sizes[1] * sizes[2]
    expected = n * dtype.itemsize
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    flat = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return Volume.from_flat(flat, Grid(sizes, spacing, origin))


def write_nrrd(v: Volume, path: str, encoding: str = "gzip") -> None:
    if encoding not in ("raw", "gzip"):
        raise FormatError(f"unsupported encoding {encoding!r}")
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    header = "\n".join([
        "NRRD0004",
        "type: double",
        "dimension: 3",
        "space dimension: 3",
        f"sizes: {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        "space directions: "
        f"({_fmt(sx)},0,0) (0,{_fmt(sy)},0) (0,0,{_fmt(sz)})",
        f"space origin: ({_fmt(ox)},{_fmt(oy)},{_fmt(oz)})",
        "endian: little",
        f"encoding: {encoding}",
        "",
        "",
    ]).encode("ascii")
    raw = v.to_flat().astype("<f8").tobytes()
    if encoding == "gzip":
        raw = gzip.compress(raw, mtime=0)
    atomic_write_bytes(path, header + raw)


def read_raw_sidecar(meta_path: str) -> Volume:
    fields: dict[str, str] = {}
    with open(meta_path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CorruptFileError(f"{meta_path}: malformed line {line!r}")
            key, value = line.split("=", 1)
            fields[key.strip().lower()] = value.strip()
    for required in ("dims", "spacing"):
        if required not in fields:
            raise CorruptFileError(f"{meta_path}: missing {required!r}")
    dims = tuple(int(s) for s in fields["dims"].split())
    spacing = tuple(float(s) for s in fields["spacing"].split())
    origin = (0.0, 0.0, 0.0)
    if "origin" in fields:
        origin = tuple(float(s) for s in fields["origin"].split())
    dtype_name = fields.get("dtype", "float64").lower()
    if dtype_name not in _NRRD_DTYPES:
        raise FormatError(f"{meta_path}: unsupported dtype {dtype_name!r}")
    dtype = np.dtype(_NRRD_DTYPES[dtype_name])
    raw_path = fields.get("data", os.path.splitext(meta_path)[0] + ".raw")
    if not os.path.isabs(raw_path):
        raw_path = os.path.join(os.path.dirname(meta_path), raw_path)
    with open(raw_path, "rb") as fh:
        payload = fh.read()
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise CorruptFileError(
            f"{raw_path}: payload holds {len(payload)} bytes, "
            f"meta declares {n * dtype.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return Volume.from_flat(flat, Grid(dims, spacing, origin))


def write_raw_sidecar(v: Volume, meta_path: str) -> None:
    base = os.path.splitext(meta_path)[0]
    raw_path = base + ".raw"
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    meta = "\n".join([
        f"dims = {v.dims[0]} {v.dims[1]} {v.dims[2]}",
        f"spacing = {_fmt(sx)} {_fmt(sy)} {_fmt(sz)}",
        f"origin = {_fmt(ox)} {_fmt(oy)} {_fmt(oz)}",
        "dtype = float64",
        f"data = {os.path.basename(raw_path)}",
        "",
    ]).encode("ascii")
    atomic_write_bytes(raw_path, v.to_flat().astype("<f8").tobytes())
    atomic_write_bytes(meta_path, meta)


def load_volume(path: str) -> Volume:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".meta":
        return read_raw_sidecar(path)
    if ext == ".raw":
        return read_raw_sidecar(os.path.splitext(path)[0] + ".meta")
    return read_nrrd(path)


def save_volume(v: Volume, path: str, encoding: str = "gzip") -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext in (".meta", ".raw"):
        write_raw_sidecar(v, os.path.splitext(path)[0] + ".meta")
    else:
        write_nrrd(v, path, encoding=encoding)
