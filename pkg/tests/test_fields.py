import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eulervisc.fields import (BoundaryConditionError, ExponentRangeError, Field, Grid, GridMismatchError,
                              export_csv, read_snapshot, write_snapshot)

grids = st.sampled_from([Grid.uniform(16), Grid.uniform((8, 6), (1.0, 0.7)), Grid.uniform((4, 5, 6))])
seeds = st.integers(0, 2**32 - 1)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid.uniform(3)
    with pytest.raises(ValueError):
        Grid((8,), (-1.0,))
    with pytest.raises(ValueError):
        Grid.uniform((4, 4, 4, 4))
    g = Grid.uniform((8, 4), (2.0, 1.0))
    assert g.volume == pytest.approx(2.0) and g.integrate(np.ones(g.shape)) == pytest.approx(2.0)


def test_grad_constant_is_zero():
    g = Grid.uniform((8, 8))
    assert np.array_equal(g.grad(np.full(g.shape, 3.7)), np.zeros(g.shape + (3,)))
    gb = Grid.uniform((8, 8), topology="box")
    assert np.array_equal(gb.grad(np.full(gb.shape, 3.7), "neumann"), np.zeros(gb.shape + (3,)))


def test_gradient_second_order():
    errs = []
    for n in (16, 32, 64, 128):
        g = Grid.uniform(n)
        (x,) = g.coords()
        d = g.grad(np.sin(2 * np.pi * x))[..., 0]
        errs.append(np.max(np.abs(d - 2 * np.pi * np.cos(2 * np.pi * x))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 4) < 0.1)
    assert np.all(np.log2(ratios) >= 1.9)


def test_div_and_laplacian_second_order():
    errs_d, errs_l = [], []
    for n in (32, 64, 128):
        g = Grid.uniform((n, n))
        x, y = g.coords()
        u = np.zeros(g.shape + (3,))
        u[..., 0] = np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
        u[..., 1] = np.cos(4 * np.pi * y)
        exact_div = 2 * np.pi * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y) - 4 * np.pi * np.sin(4 * np.pi * y)
        errs_d.append(np.max(np.abs(g.div(u) - exact_div)))
        f = np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)
        errs_l.append(np.max(np.abs(g.laplacian(f) + 8 * np.pi ** 2 * f)))
    for e in (errs_d, errs_l):
        assert np.all(np.log2(np.array(e[:-1]) / np.array(e[1:])) >= 1.9)


@given(grids, seeds)
def test_adjointness_periodic(g, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(g.shape + (3,))
    phi = rng.standard_normal(g.shape)
    lhs = g.inner(g.div(u), phi) + g.inner(u, g.grad(phi))
    assert abs(lhs) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(phi)
    T = rng.standard_normal(g.shape + (3, 3))
    w = rng.standard_normal(g.shape + (3,))
    assert abs(g.inner(g.div(T), w) + g.inner(T, g.grad(w))) <= 1e-12 * np.linalg.norm(T) * np.linalg.norm(w)
    assert np.allclose(g.div(g.grad(phi)), g.laplacian(phi), atol=1e-12 * np.abs(g.laplacian(phi)).max())
    assert abs(g.integrate(g.div(u))) <= 1e-12 * np.linalg.norm(u)


@given(seeds)
def test_adjointness_box_impermeable(seed):
    rng = np.random.default_rng(seed)
    g = Grid.uniform((6, 7), topology="box")
    u = rng.standard_normal(g.shape + (3,))
    phi = rng.standard_normal(g.shape)
    lhs = g.inner(g.div(u, "impermeable"), phi) + g.inner(u, g.grad(phi, "neumann"))
    assert abs(lhs) <= 1e-12 * np.linalg.norm(u) * np.linalg.norm(phi)
    assert abs(g.integrate(g.div(u, "impermeable"))) <= 1e-12 * np.linalg.norm(u)


@given(grids, seeds)
def test_hessian_adjoint_is_transpose(g, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(g.shape + (3,))
    A = rng.standard_normal(g.shape + (3, 3, 3))
    lhs = g.inner(g.hessian(v), A)
    rhs = g.inner(v, g.hessian_adjoint(A))
    assert abs(lhs - rhs) <= 1e-11 * np.linalg.norm(v) * np.linalg.norm(A) * max(1, 1 / min(g.h) ** 2)


@given(grids, seeds, st.sampled_from([3.5, 4.0, 5.0]))
def test_hyperstress_energy_identity(g, seed, p):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(g.shape + (3,))
    hv = g.hessian(v)
    pw = np.sum(hv * hv, axis=(-1, -2, -3)) ** (p / 2)
    work = g.inner(g.hyperstress_apply(v, 0.3, p), v)
    assert work >= 0
    assert work == pytest.approx(0.3 * g.integrate(pw), rel=1e-11)


def test_hyperstress_examples():
    g = Grid.uniform((8, 8))
    v = np.ones(g.shape + (3,))
    assert np.array_equal(g.hyperstress_apply(v, 1.0, 4), np.zeros_like(v))
    rng = np.random.default_rng(0)
    w = rng.standard_normal(g.shape + (3,))
    assert np.array_equal(g.hyperstress_apply(w, 0.0, 4), np.zeros_like(w))
    with pytest.raises(ExponentRangeError):
        g.hyperstress_apply(w, 1.0, 2.5)
    g.hyperstress_apply(w, 1.0, 2.5, allow_unsafe=True)
    # linear field: the Hessian vanishes away from the box walls
    gb = Grid.uniform((12, 12), topology="box")
    x, y = gb.coords()
    lin = np.zeros(gb.shape + (3,))
    lin[..., 1] = 2 * x + 1
    assert np.allclose(gb.hessian(lin, "impermeable")[2:-2, 2:-2], 0, atol=1e-12)
    assert np.allclose(gb.hyperstress_apply(lin, 1.0, 4, "impermeable")[4:-4, 4:-4], 0, atol=1e-9)


def test_box_needs_boundary_tag():
    g = Grid.uniform((6, 6), topology="box")
    with pytest.raises(BoundaryConditionError):
        g.grad(np.zeros(g.shape))
    with pytest.raises(BoundaryConditionError):
        g.div(np.zeros(g.shape + (3,)), "sticky")


def test_quadrature(rng):
    g = Grid.uniform((8, 8))
    f = rng.standard_normal(g.shape)
    assert g.inner(f, f) > 0
    assert g.inner(np.zeros(g.shape), np.zeros(g.shape)) == 0
    with pytest.raises(GridMismatchError):
        g.integrate(np.zeros((4, 4)))
    with pytest.raises(GridMismatchError):
        Field(g, f).inner(Field(Grid.uniform((8, 4)), np.zeros((8, 4))))
    # deterministic summation order: permuted repeated evaluations agree bitwise
    assert g.integrate(f) == g.integrate(f.copy())


def test_field_wrapper(rng):
    g = Grid.uniform((8, 8))
    f = Field(g, rng.standard_normal(g.shape))
    assert f.grad().kind == "vector" and f.grad().div().kind == "scalar"
    assert np.array_equal(f.grad().div().values, f.laplacian().values)
    v = Field(g, rng.standard_normal(g.shape + (3,)), "vector")
    assert v.hessian().kind == "third"
    with pytest.raises(ValueError):
        Field(g, np.full(g.shape, np.nan))
    with pytest.raises(GridMismatchError):
        Field(g, np.zeros((8, 8, 3)), "scalar")


def test_snapshot_round_trip(tmp_path, rng):
    g = Grid.uniform((6, 5), (1.0, 2.0))
    fields = {"rho": ("scalar", rng.random(g.shape)), "F": ("tensor", rng.standard_normal(g.shape + (3, 3)))}
    path = tmp_path / "s.evs"
    write_snapshot(path, g, fields, 0.25, {"note": "x"})
    g2, t, out, header = read_snapshot(path)
    assert g2 == g and t == 0.25 and header["extra"]["note"] == "x"
    for k in fields:
        assert np.array_equal(out[k][1], fields[k][1])
    raw = path.read_bytes()
    assert raw.startswith(b"EVSNAP1\n")
    # payload is little-endian float64 in header order
    assert np.array_equal(np.frombuffer(raw[-8 * 30 * 9:], "<f8"), fields["F"][1].ravel())
    csv_text = export_csv(g, fields)
    lines = csv_text.strip().splitlines()
    assert len(lines) == g.ncell + 1
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_snapshot(tmp_path / "bad")
