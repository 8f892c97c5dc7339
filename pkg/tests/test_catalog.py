import numpy as np
import pytest

from ktie import catalog
from ktie.carleman import LambdaClass
from ktie.catalog import CatalogError, parse_spec


def test_parse_spec():
    s = parse_spec("gaussian(amplitude=0.5, x0=-0.2)")
    assert s.name == "gaussian" and s.kwargs == {"amplitude": 0.5, "x0": -0.2}
    assert parse_spec("none").kwargs == {}
    assert str(parse_spec("constant(value=2.0)")) == "constant(value=2.0)"
    for bad in ("1abc", "gaussian(0.5)", "gaussian(x0=foo)", "gaussian(x0="):
        with pytest.raises(CatalogError):
            parse_spec(bad)


def test_validate_rejects_unknown_names_and_keys():
    with pytest.raises(CatalogError, match="unknown static entry"):
        catalog.validate("wobble", "static")
    with pytest.raises(CatalogError, match="does not take"):
        catalog.validate("constant(width=1)", "static")


def test_static_entries(grid):
    assert catalog.static_field("none", grid) is None
    np.testing.assert_array_equal(catalog.static_field("constant(value=2.0)", grid), 2.0)
    lp = catalog.static_field("lambda_profile(value=0.5)", grid)
    assert LambdaClass().contains(lp, grid)
    g = catalog.static_field("gaussian(amplitude=1.0, width=0.5, base=0.5)", grid)
    centre = np.argmin(np.hypot(*grid.points.T))
    assert g[centre, 0] == pytest.approx(1.5)
    b = catalog.static_field("bump(radius=0.5)", grid)
    far = np.hypot(*grid.points.T) >= 0.5
    assert np.all(b[far] == 0) and b[centre, 0] == pytest.approx(1.0)
    a = catalog.static_field("angular(base=0.5, amplitude=0.3)", grid)
    np.testing.assert_allclose(a[0], 0.5 + 0.3 * np.cos(grid.quad.angles) ** 2)


def test_csv_entry_round_trip(grid, tmp_path):
    from ktie.grid import Field
    from ktie.serialization import field_to_csv

    vals = np.random.default_rng(0).normal(size=(grid.n_nodes, grid.n_v))
    p = tmp_path / "sigma.csv"
    p.write_text(field_to_csv(Field(grid, vals)))
    np.testing.assert_allclose(catalog.static_field(f"csv(path={str(p)!r})", grid), vals, rtol=1e-11)
    with pytest.raises(CatalogError):
        catalog.static_field("csv(path='/nonexistent.csv')", grid)


def test_kernels_and_profiles(grid):
    assert catalog.kernel("none", grid) is None
    iso = catalog.kernel("isotropic(value=0.2)", grid)
    assert iso.shape == (1, grid.n_v, grid.n_v) and np.all(iso == 0.2)
    lk = catalog.kernel("lambda_kernel(value=0.3)", grid)
    P = LambdaClass().profile_mask(grid.quad.angles)
    assert np.all(lk[0][~P] == 0) and np.all(lk[0][np.ix_(P, P)] == 0.3)
    neg = catalog.kernel("negative_control", grid)
    assert neg.max() == 20.0
    u = catalog.profile("uniform(value=2.0)", grid)
    assert np.all(u == 2.0)
    c = catalog.profile("cosine(value=1.0, anisotropy=0.5)", grid)
    assert c.min() > 0
    with pytest.raises(CatalogError):
        catalog.profile("cosine(anisotropy=1.5)", grid)
