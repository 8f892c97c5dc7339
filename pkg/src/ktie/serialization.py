"""CSV and binary dumps of fields and boundary traces.

Binary layout: the 8-byte magic ``KTIEBIN1``, a little-endian uint32 header
length, a UTF-8 JSON header (grid descriptor, array shape, kind), then the
values as little-endian float64 in C order.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .grid import BoundaryTrace, Field, PhaseGrid

MAGIC = b"KTIEBIN1"


class FormatError(ValueError):
    pass


def field_to_csv(field: Field) -> str:
    """Columns t, x, y, theta, value (t omitted for static fields); gnuplot-friendly."""
    g = field.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    x = np.repeat(g.points[:, 0], g.n_v)
    y = np.repeat(g.points[:, 1], g.n_v)
    th = np.tile(g.quad.angles, g.n_nodes)
    if field.static:
        w.writerow(["x", "y", "theta", "value"])
        for row in zip(x, y, th, field.flat):
            w.writerow([f"{row[0]:.12g}", f"{row[1]:.12g}", f"{row[2]:.12g}", f"{row[3]:.12e}"])
    else:
        w.writerow(["t", "x", "y", "theta", "value"])
        flat = field.flat
        for k, t in enumerate(g.times):
            for row in zip(x, y, th, flat[k]):
                w.writerow([f"{t:.12g}", f"{row[0]:.12g}", f"{row[1]:.12g}", f"{row[2]:.12g}",
                            f"{row[3]:.12e}"])
    return buf.getvalue()


def trace_to_csv(trace: BoundaryTrace) -> str:
    """Columns t, alpha (boundary angle), theta, n_dot_v, value."""
    g = trace.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "alpha", "theta", "n_dot_v", "value"])
    alpha = g.ring_alpha[trace.ring_index]
    theta = g.quad.angles[trace.dir_index]
    nv = trace.measure_factor
    for k, t in enumerate(g.times):
        for a, th, m, v in zip(alpha, theta, nv, trace.values[k]):
            w.writerow([f"{t:.12g}", f"{a:.12g}", f"{th:.12g}", f"{m:.12g}", f"{v:.12e}"])
    return buf.getvalue()


def dump_binary(path, obj) -> None:
    if isinstance(obj, Field):
        kind = "static_field" if obj.static else "field"
    elif isinstance(obj, BoundaryTrace):
        kind = "trace"
    else:
        raise TypeError(f"cannot dump {type(obj).__name__}")
    arr = np.ascontiguousarray(obj.values, dtype="<f8")
    header = json.dumps({"kind": kind, "shape": list(arr.shape),
                         "grid": obj.grid.descriptor()}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_binary(path) -> tuple[dict, np.ndarray]:
    """Header and values of a dump, without rebuilding the grid."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path} is not a ktie binary dump")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    body = data[12 + n:]
    shape = tuple(header["shape"])
    if len(body) != 8 * int(np.prod(shape)):
        raise FormatError(f"{path}: payload size does not match the header shape {shape}")
    return header, np.frombuffer(body, dtype="<f8").reshape(shape).copy()


def load_binary(path, grid: PhaseGrid):
    header, values = read_binary(path)
    if header["grid"] != json.loads(json.dumps(grid.descriptor())):
        raise FormatError(f"{path} was written on a different grid")
    if header["kind"] == "trace":
        return BoundaryTrace(grid, values)
    return Field(grid, values)
