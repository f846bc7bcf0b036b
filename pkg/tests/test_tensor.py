import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eulervisc.tensor import (DevTensor3, SingularMatrixError, SymTensor3, Tensor3, b_zj, cof, cof_prime, det,
                              dev, dev_pack, dev_unpack, inv, skw, sph, sym, sym_pack, sym_unpack, trace)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
mat3 = arrays(np.float64, (3, 3), elements=finite)
sym6 = arrays(np.float64, (6,), elements=finite)


def minor_cofactor(A):
    """Brute-force cofactors from numpy determinants of 2x2 minors."""
    out = np.empty((3, 3))
    for i, j in itertools.product(range(3), repeat=2):
        m = np.delete(np.delete(A, i, 0), j, 1)
        out[i, j] = (-1) ** (i + j) * np.linalg.det(m)
    return out


def fd_cof(F, G, h=1e-6):
    return (cof(F + h * G) - cof(F - h * G)) / (2 * h)


# --- worked examples ---------------------------------------------------------
def test_dev_identity_is_zero():
    assert np.array_equal(dev(np.eye(3)), np.zeros((3, 3)))


def test_sph_of_diag300_is_identity():
    assert np.allclose(sph(np.diag([3.0, 0, 0])), np.eye(3), atol=0, rtol=0)


def test_skw_of_symmetric_is_zero():
    A = np.array([[1.0, 2, 3], [2, 4, 5], [3, 5, 6]])
    assert np.array_equal(skw(A), np.zeros((3, 3)))


def test_cof_identity_and_diagonal():
    assert np.array_equal(cof(np.eye(3)), np.eye(3))
    assert det(np.diag([2.0, 3, 4])) == 24.0
    D = np.diag([2.0, 3, 4])
    assert np.allclose(cof(D), minor_cofactor(D), atol=1e-13)
    assert np.array_equal(cof(D), np.diag([12.0, 8, 6]))


def test_cof_prime_examples():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((3, 3))
    closed = np.trace(G) * np.eye(3) - G.T
    assert np.allclose(cof_prime(np.eye(3), G), closed, atol=1e-12)
    assert np.allclose(fd_cof(np.eye(3), G), closed, atol=1e-8)
    assert np.array_equal(cof_prime(rng.standard_normal((3, 3)), np.zeros((3, 3))), np.zeros((3, 3)))
    assert np.allclose(cof_prime(np.eye(3), np.eye(3)), 2 * np.eye(3), atol=1e-15)
    assert np.allclose(fd_cof(np.eye(3), np.eye(3)), 2 * np.eye(3), atol=1e-8)


def test_b_zj_examples():
    E = np.eye(3)
    gv = np.random.default_rng(1).standard_normal((3, 3))
    assert np.allclose(b_zj(gv, np.zeros((3, 3)), E), 0, atol=1e-15)
    S = gv + gv.T
    Ed = np.diag([1.0, 2, 3])
    assert np.allclose(b_zj(S, np.zeros((3, 3)), Ed), 0, atol=1e-15)
    gv = np.array([[0.0, 1, 0], [-1, 0, 0], [0, 0, 0]])
    # oracle: explicit matrix products with W = skw(grad v)
    W = 0.5 * (gv - gv.T)
    expect = -W @ Ed + Ed @ W
    got = b_zj(gv, np.zeros((3, 3)), Ed)
    assert np.array_equal(got, expect)
    assert np.array_equal(got, np.array([[0.0, -1, 0], [-1, 0, 0], [0, 0, 0]]))


def test_value_types():
    with pytest.raises(ValueError):
        Tensor3([[np.nan, 0, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        SymTensor3([1, 2, 3, np.inf, 0, 0])
    s = SymTensor3.from_matrix(np.arange(9.0).reshape(3, 3))
    assert np.array_equal(s.matrix, s.matrix.T)
    d = DevTensor3.from_matrix(np.arange(9.0).reshape(3, 3))
    assert np.trace(d.matrix) == 0.0
    ds = DevTensor3.from_matrix(np.arange(9.0).reshape(3, 3), symmetric=True)
    assert np.trace(ds.matrix) == 0.0 and np.array_equal(ds.matrix, ds.matrix.T)
    t = Tensor3(np.eye(3))
    assert isinstance(dev(t), Tensor3) and isinstance(sym(t), SymTensor3)
    assert (t @ t) == t


def test_inv_singular_raises():
    with pytest.raises(SingularMatrixError):
        inv(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(SingularMatrixError):
        inv(np.ones((3, 3)))


# --- properties ------------------------------------------------------------
@given(mat3)
def test_decompositions(A):
    scale = max(1.0, np.max(np.abs(A)))
    assert np.allclose(sym(A) + skw(A), A, atol=1e-14 * scale)
    assert np.allclose(dev(A) + sph(A), A, atol=1e-14 * scale)
    assert abs(trace(dev(A))) <= 1e-14 * scale
    S = sph(A)
    assert np.allclose(S, S[0, 0] * np.eye(3), atol=0)


@given(mat3)
def test_cof_matches_minors_and_inverse(A):
    scale = max(1.0, np.max(np.abs(A))) ** 2
    assert np.allclose(cof(A), minor_cofactor(A), atol=1e-12 * scale)
    d = det(A)
    if abs(d) > 1e-3 * max(1.0, np.max(np.abs(A))) ** 3:
        Ai = inv(A)
        assert np.allclose(A @ Ai, np.eye(3), atol=1e-9)
        assert np.allclose(cof(A), d * Ai.T, atol=1e-10 * scale)


@given(arrays(np.float64, (3,), elements=finite), sym6)
def test_b_zj_trace_free_for_skew(w, e):
    W = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    E = sym_unpack(e)
    out = b_zj(W, np.zeros((3, 3)), E)
    assert abs(np.trace(out)) <= 1e-12 * (1 + np.abs(w).max() * np.abs(e).max())
    assert np.allclose(out, out.T, atol=1e-12 * (1 + np.abs(w).max() * np.abs(e).max()))


@given(mat3, mat3)
def test_cof_prime_second_order_fd(F, G):
    # cof is quadratic, so central differences are exact up to round-off
    scale = (1 + np.abs(F).max()) * (1 + np.abs(G).max())
    assert np.allclose(cof_prime(F, G), fd_cof(F, G, h=1e-3), atol=1e-9 * scale)
    # linearity and self-adjointness
    H = F - G
    assert np.allclose(cof_prime(F, G + H), cof_prime(F, G) + cof_prime(F, H), atol=1e-12 * scale * 4)
    assert np.isclose(np.sum(H * cof_prime(F, G)), np.sum(G * cof_prime(F, H)), atol=1e-10 * scale * scale)


def test_isotropy_commutation_small_energy(rng):
    from eulervisc.materials import IsotropicQuadraticEnergy
    mat = IsotropicQuadraticEnergy(2.0, 0.7)
    E = sym_unpack(rng.standard_normal((10_000, 6)))
    S = mat.grad(E)
    comm = S @ E - E @ S
    assert np.max(np.abs(comm)) <= 1e-12 * np.max(np.abs(S)) * np.max(np.abs(E))


@given(arrays(np.float64, (8,), elements=finite), sym6)
def test_structured_storage_round_trip(c, s):
    D = dev_unpack(c)
    assert np.trace(D) == pytest.approx(0.0, abs=1e-13)
    assert np.array_equal(dev_pack(D), c)
    assert np.array_equal(sym_pack(sym_unpack(s)), s)
