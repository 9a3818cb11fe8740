"""Minimal raw volume format: a text header of ``key: value`` lines plus a binary payload.

Example header::

    EPIVOL 1
    kind: image
    pe_axis: 1
    dim: 2
    size: 64 64
    spacing: 1.0 1.0
    origin: 0.0 0.0
    type: float32
    endian: little
    data_offset: 0000000137

The payload stores the samples with axis 1 varying fastest. Fields use
``kind: field`` and list the face counts in ``size``, which exceed the cell
counts by one along ``pe_axis``; ``spacing`` and ``origin`` always describe
the cell grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec
from .image_model import ImageVolume

MAGIC = "EPIVOL 1"
DTYPES = {"float32": "<f4", "float64": "<f8"}
_OFFSET_WIDTH = 10


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeFile:
    kind: str
    grid: GridSpec
    data: np.ndarray
    dtype: str = "float32"
    pe_axis: int = 1


def _fmt_floats(values):
    return " ".join(repr(float(v)) for v in values)


def _header(kind, grid, shape, dtype, offset, pe_axis):
    lines = [MAGIC, f"kind: {kind}", f"pe_axis: {pe_axis}", f"dim: {grid.dim}", "size: " + " ".join(str(s) for s in shape),
             f"spacing: {_fmt_floats(grid.h)}", f"origin: {_fmt_floats(grid.origin)}",
             f"type: {dtype}", "endian: little", f"data_offset: {offset:0{_OFFSET_WIDTH}d}"]
    return ("\n".join(lines) + "\n").encode("ascii")


def field_shape(grid: GridSpec, pe_axis: int = 1):
    """Face counts of a field whose faces are normal to axis ``pe_axis`` (1-based)."""
    shape = list(grid.m)
    shape[pe_axis - 1] += 1
    return tuple(shape)


def write_volume(path, grid: GridSpec, data, kind: str = "image", dtype: str = "float32",
                 pe_axis: int = 1) -> None:
    """Write cell data (``kind='image'``) or a face field (``kind='field'``).

    ``grid`` is always the cell grid; a field carries one extra sample
    along ``pe_axis``.
    """
    if dtype not in DTYPES:
        raise ValueError(f"unsupported element type {dtype!r}")
    if not 1 <= pe_axis <= grid.dim:
        raise ValueError(f"pe_axis must lie in 1..{grid.dim}")
    data = np.asarray(data)
    if kind == "image":
        grid.check_cells(data, "image data")
    elif kind == "field":
        if data.shape != field_shape(grid, pe_axis):
            raise ValueError(f"field shape {data.shape} does not match {field_shape(grid, pe_axis)}")
    else:
        raise ValueError(f"unknown volume kind {kind!r}")
    probe = _header(kind, grid, data.shape, dtype, 0, pe_axis)
    header = _header(kind, grid, data.shape, dtype, len(probe), pe_axis)
    payload = np.asarray(data, dtype=DTYPES[dtype]).ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _parse_header(raw: bytes):
    end = raw.find(b"data_offset:")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise VolumeFormatError("not an EPIVOL file")
    stop = raw.find(b"\n", end)
    if stop < 0:
        raise VolumeFormatError("truncated header")
    fields = {}
    for line in raw[:stop].decode("ascii").splitlines()[1:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    return fields


def read_volume(path) -> VolumeFile:
    with open(path, "rb") as fh:
        raw = fh.read()
    f = _parse_header(raw[:4096])
    try:
        dim = int(f["dim"])
        size = tuple(int(v) for v in f["size"].split())
        h = tuple(float(v) for v in f["spacing"].split())
        origin = tuple(float(v) for v in f["origin"].split())
        kind, dtype, offset = f["kind"], f["type"], int(f["data_offset"])
        pe_axis = int(f.get("pe_axis", "1"))
    except (KeyError, ValueError) as err:
        raise VolumeFormatError(f"bad or missing header field: {err}") from None
    if f.get("endian", "little") != "little":
        raise VolumeFormatError("only little-endian payloads are supported")
    if dtype not in DTYPES:
        raise VolumeFormatError(f"unsupported element type {dtype!r}")
    if not (len(size) == len(h) == len(origin) == dim):
        raise VolumeFormatError("size, spacing and origin must have dim entries")
    if kind not in ("image", "field") or not 1 <= pe_axis <= dim:
        raise VolumeFormatError(f"bad kind {kind!r} or pe_axis {pe_axis}")
    m = list(size)
    if kind == "field":
        m[pe_axis - 1] -= 1
    grid = GridSpec(tuple(m), h, origin)
    count = int(np.prod(size))
    item = np.dtype(DTYPES[dtype]).itemsize
    if len(raw) != offset + count * item:
        raise VolumeFormatError(f"payload has {len(raw) - offset} bytes, expected {count * item}")
    data = np.frombuffer(raw, dtype=DTYPES[dtype], count=count, offset=offset).reshape(size, order="F")
    return VolumeFile(kind, grid, data.astype(float), dtype, pe_axis)


def write_image(path, img: ImageVolume, dtype: str = "float32") -> None:
    write_volume(path, img.grid, img.data, "image", dtype)


def read_image(path) -> ImageVolume:
    vf = read_volume(path)
    if vf.kind != "image":
        raise VolumeFormatError(f"{path} holds a {vf.kind}, expected an image")
    return ImageVolume(vf.grid, vf.data)
