import numpy as np
import pytest

from ktie.grid import Field
from ktie.serialization import (MAGIC, FormatError, dump_binary, field_to_csv, load_binary,
                                read_binary, trace_to_csv)
from ktie.transport import measure


def test_field_binary_round_trip(grid, tmp_path):
    vals = np.random.default_rng(1).normal(size=(grid.n_t + 1, grid.n_nodes, grid.n_v))
    f = Field(grid, vals)
    p = tmp_path / "f.bin"
    dump_binary(p, f)
    assert p.read_bytes()[:8] == MAGIC
    back = load_binary(p, grid)
    np.testing.assert_array_equal(back.values, vals)
    header, raw = read_binary(p)
    assert header["kind"] == "field" and tuple(header["shape"]) == vals.shape


def test_trace_binary_round_trip(grid, tmp_path):
    f = Field(grid, np.ones((grid.n_t + 1, grid.n_nodes, grid.n_v)))
    tr = measure(f)
    p = tmp_path / "t.bin"
    dump_binary(p, tr)
    np.testing.assert_array_equal(load_binary(p, grid).values, tr.values)


def test_format_errors(grid, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(FormatError):
        read_binary(bad)
    p = tmp_path / "f.bin"
    dump_binary(p, Field(grid, np.zeros((grid.n_nodes, grid.n_v))))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError, match="payload"):
        read_binary(p)


def test_grid_mismatch(grid, cgrid, tmp_path):
    p = tmp_path / "f.bin"
    dump_binary(p, Field(grid, np.zeros((grid.n_nodes, grid.n_v))))
    with pytest.raises(FormatError, match="different grid"):
        load_binary(p, cgrid)
    with pytest.raises(TypeError):
        dump_binary(p, np.zeros(3))


def test_csv_layouts(grid):
    static = field_to_csv(Field(grid, np.zeros((grid.n_nodes, grid.n_v)))).splitlines()
    assert static[0] == "x,y,theta,value" and len(static) == 1 + grid.M
    tr = trace_to_csv(measure(Field(grid, np.ones((grid.n_t + 1, grid.n_nodes, grid.n_v))))).splitlines()
    assert tr[0] == "t,alpha,theta,n_dot_v,value"
