import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eulervisc.audit import mass
from eulervisc.fields import BoundaryConditionError, Grid
from eulervisc.materials import IsotropicQuadraticEnergy
from eulervisc.stepper_small import (MaximumPrincipleError, SchemeParams, SolveStats, StateSmall, cutoff_K,
                                     cutoff_K_rho, cutoff_lipschitz, make_initial_small, residual_small,
                                     check_density, resolve_rho_max, step_small)
from eulervisc.tensor import b_zj, dev, sym, sym_pack, sym_unpack

MAT = IsotropicQuadraticEnergy(K_E=2.0, G_E=1.0)


def smooth_state(n=16, amp=1.0):
    g = Grid.uniform((n, n))
    x, y = g.coords()
    k = 2 * np.pi
    rho = 1 + 0.2 * amp * np.sin(k * x) * np.cos(k * y)
    v = np.zeros(g.shape + (3,))
    v[..., 0] = 0.1 * amp * np.sin(k * y)
    v[..., 1] = 0.1 * amp * np.sin(k * x)
    E = np.zeros(g.shape + (6,))
    E[..., 0] = 0.01 * amp * np.cos(k * x)
    E[..., 5] = 0.01 * amp * np.sin(k * y)
    return make_initial_small(g, rho, v, E)


def test_equilibrium_is_fixed_point():
    g = Grid.uniform((8, 8))
    s0 = make_initial_small(g, 1.3, np.zeros(3))
    s1, stats = step_small(s0, SchemeParams(tau=0.01), None, MAT)
    assert stats.iterations == 0
    assert np.array_equal(s1.pack(), s0.pack()) and s1.time == pytest.approx(0.01)


@pytest.mark.parametrize("G_M", [0.5, 2.0])
def test_uniform_maxwell_relaxation(G_M):
    # uniform traceless strain, no motion: E_k = E_{k-1} / (1 + 2 R G_E tau)
    g = Grid.uniform(4)
    E0 = sym_pack(dev(np.array([[0.02, 0.01, 0.0], [0.01, -0.03, 0.004], [0.0, 0.004, 0.01]])))
    s = make_initial_small(g, 1.0, np.zeros(3), E0)
    sp = SchemeParams(tau=0.05, G_M=G_M, tol_rel=1e-14, tol_abs=1e-16)
    factor = 1.0 / (1.0 + 2.0 * sp.R * MAT.G_E * sp.tau)
    for k in range(1, 6):
        s, _ = step_small(s, sp, None, MAT)
        assert np.allclose(s.E, E0 * factor ** k, rtol=0, atol=1e-14)
        assert np.allclose(s.velocity, 0, atol=1e-15)


def test_cutoff_examples():
    rho_max = 2.0
    assert np.array_equal(cutoff_K([-1.0, 0.0, 1.0, 2.0], rho_max), [0.0, 1.0, 1.0, 1.0])
    assert np.array_equal(cutoff_K([3.0, 7.0], rho_max), [0.0, 0.0])
    assert cutoff_K(2.5, rho_max) == pytest.approx(0.5)
    r = np.linspace(-1, 5, 200_001)
    kr = cutoff_K_rho(r, rho_max)
    assert np.all(kr >= 0)
    slope = np.max(np.abs(np.diff(kr) / np.diff(r)))
    L = cutoff_lipschitz(rho_max)
    assert slope <= L * (1 + 1e-6) and slope >= L * (1 - 1e-3)


@given(st.floats(0.1, 50))
def test_cutoff_lipschitz_bound(rho_max):
    r = np.linspace(rho_max - 0.5, rho_max + 1.5, 20_001)
    slope = np.max(np.abs(np.diff(cutoff_K_rho(r, rho_max)) / np.diff(r)))
    assert slope <= cutoff_lipschitz(rho_max) * (1 + 1e-6)


@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9), st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_corotational_term_is_energy_neutral(gv, e):
    L = np.array(gv).reshape(3, 3)
    E = sym(np.array(e + [0, 0, 0]).reshape(3, 3))
    rate = b_zj(L, np.zeros((3, 3)), E)
    assert abs(np.sum(rate * MAT.grad(E))) <= 1e-14 * (1 + np.sum(np.abs(rate)) * np.abs(E).max())


def test_transport_chain_pairing():
    # <(v.grad)E, dphi> equals <dphi : grad E, v> cell by cell
    s = smooth_state()
    g = s.grid
    E = sym_unpack(s.E)
    gE = g.grad(E)
    v = s.velocity
    dphi = MAT.grad(E)
    lhs = g.inner(np.einsum("...ijk,...k->...ij", gE, v), dphi)
    rhs = g.inner(np.einsum("...ij,...ijk->...k", dphi, gE), v)
    assert lhs == pytest.approx(rhs, rel=1e-13)


def test_mass_conservation_and_positivity():
    s = smooth_state(amp=3.0)
    sp = SchemeParams(tau=0.005, K_V=0.01, G_V=0.01, G_M=2.0)
    m0 = mass(s)
    for _ in range(10):
        s, stats = step_small(s, sp, None, MAT)
        assert stats.mass_defect <= 1e-13
        assert stats.rho_min > 0 and not stats.band_entered
    assert abs(mass(s) - m0) <= 1e-13 * m0


def test_converged_residual_is_small():
    s0 = smooth_state()
    sp = resolve_rho_max(SchemeParams(tau=0.005, K_V=0.01, G_V=0.01), s0.rho)
    s1, stats = step_small(s0, sp, None, MAT)
    r = residual_small(s1, s0, sp, None, MAT)
    assert np.linalg.norm(r) <= stats.target


def test_periodic_only():
    g = Grid.uniform((8, 8), topology="box")
    s = make_initial_small(g, 1.0, np.zeros(3))
    with pytest.raises(BoundaryConditionError):
        step_small(s, SchemeParams(), None, MAT)


def test_maximum_principle_check():
    g = Grid.uniform(4)
    sp = SchemeParams(rho_max=2.0)
    bad = StateSmall(g, np.array([1.0, 1.0, 3.5, 1.0]), np.zeros((4, 3)), np.zeros((4, 6)))
    with pytest.raises(MaximumPrincipleError):
        check_density(bad, sp, SolveStats())
    band = StateSmall(g, np.array([1.0, 1.0, 2.5, 1.0]), np.zeros((4, 3)), np.zeros((4, 6)))
    stats = SolveStats()
    check_density(band, sp, stats)
    assert stats.band_entered


def test_scheme_params_validation():
    with pytest.raises(ValueError, match="tau"):
        SchemeParams(tau=0.0)
    with pytest.raises(ValueError, match="p > 3"):
        SchemeParams(p_exp=3.0)
    with pytest.raises(ValueError, match="G_M"):
        SchemeParams(G_M=0.0)
    sp = SchemeParams(p_exp=2.0, delta=-1.0, allow_unsafe=True)
    assert set(sp.unsafe_flags()) == {"hyperviscosity exponent p > 3", "regularization delta >= 0"}
    assert SchemeParams(G_M=math.inf).R == 0.0 and SchemeParams(G_M=4.0).R == 0.25
    assert resolve_rho_max(SchemeParams(), np.array([0.5, 2.0])).rho_max == 8.0
    with pytest.raises(ValueError):
        make_initial_small(Grid.uniform(4), 0.0, np.zeros(3))

