"""Field files: the ``NAF1`` binary format and a plain CSV listing.

``NAF1`` layout (little endian): magic ``b"NAF1"``, ``uint32`` dimension
``d``, ``d`` ``uint64`` extents, then ``|n|`` ``float64`` values in
last-coordinate-fastest order.
"""

from __future__ import annotations

import csv
import io
import itertools
import struct
from pathlib import Path

import numpy as np

from .lattice import Field, MultiIndex

MAGIC = b"NAF1"


def to_naf_bytes(field: Field) -> bytes:
    header = MAGIC + struct.pack("<I", field.d) + struct.pack(f"<{field.d}Q", *field.shape.coords)
    return header + np.asarray(field.values, dtype="<f8").tobytes()


def from_naf_bytes(data: bytes) -> Field:
    if data[:4] != MAGIC:
        raise ValueError("not a NAF1 file")
    (d,) = struct.unpack_from("<I", data, 4)
    if not 1 <= d <= 8:
        raise ValueError(f"unsupported dimension {d}")
    coords = struct.unpack_from(f"<{d}Q", data, 8)
    offset = 8 + 8 * d
    shape = MultiIndex(tuple(int(c) for c in coords))
    if len(data) - offset != 8 * shape.size:
        raise ValueError("payload length does not match the header")
    values = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
    return Field(shape, values)


def write_naf(path, field: Field) -> None:
    Path(path).write_bytes(to_naf_bytes(field))


def read_naf(path) -> Field:
    return from_naf_bytes(Path(path).read_bytes())


def to_csv_text(field: Field) -> str:
    """Rows ``k_1, ..., k_d, value`` with 1-based coordinates."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*(f"k_{i + 1}" for i in range(field.d)), "value"])
    cells = itertools.product(*(range(1, n + 1) for n in field.shape.coords))
    for k, v in zip(cells, field.values):
        writer.writerow([*k, repr(float(v))])
    return buf.getvalue()


def from_csv_text(text: str) -> Field:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    d = len(rows[0]) - 1
    body = [r for r in rows[1:] if r]
    idx = np.array([[int(c) for c in r[:d]] for r in body], dtype=np.int64)
    vals = np.array([float(r[d]) for r in body])
    shape = MultiIndex(tuple(int(c) for c in idx.max(axis=0)))
    if len(body) != shape.size:
        raise ValueError("CSV does not list every cell exactly once")
    arr = np.full(shape.coords, np.nan)
    arr[tuple((idx - 1).T)] = vals
    if np.isnan(arr).any():
        raise ValueError("CSV does not list every cell exactly once")
    return Field.from_array(arr)


def write_field(path, field: Field) -> None:
    """Write by extension: ``.csv`` as text, anything else as NAF1."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(to_csv_text(field))
    else:
        write_naf(path, field)


def read_field(path) -> Field:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return from_csv_text(path.read_text())
    return read_naf(path)
