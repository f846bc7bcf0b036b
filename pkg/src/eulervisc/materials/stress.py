"""Cauchy and Mandel stress maps of the finite-strain model.

For an energy ``phi(F, H, J)`` with derivatives ``S_F, S_H, S_J`` the Cauchy
stress is ``S_F F^T + T_H + (J S_J + phi) I`` and the Mandel stress is
``dev(F^T S_F + M_H)``.  ``T_H`` and ``M_H`` are the chain-rule contributions
of the calibrated tensor H; they are the exact adjoints of the velocity- and
distortion-rate couplings in the H evolution equation, which is what makes
the discrete energy balance close.
"""
from __future__ import annotations

import numpy as np

from ..tensor import DevTensor3, Tensor3, as_matrix, cof, cof_prime, dev, dev_pack, dev_unpack, det
from .energies import PolyconvexEnergy, calibrated_h
from .yosida import YosidaRegularizedEnergy

__all__ = [
    "h_stress", "h_mandel", "stress_T", "stress_M", "stress_pair", "actual_gradient",
    "cauchy_from_actual", "cauchy_from_referential", "mandel_from_referential", "ReferentialEnergy",
]


def _t(a):
    return np.swapaxes(a, -1, -2)


def h_stress(energy: PolyconvexEnergy, F, H, J, S_H):
    """Cauchy contribution ``T_H`` of the calibrated tensor (zero without H)."""
    if not energy.has_h:
        return np.zeros_like(as_matrix(F))
    cal = energy.calibration
    I = np.eye(3)
    if cal == "cof":
        return cof_prime(F, S_H) @ _t(F)
    if cal == "jalpha":
        return energy.alpha * np.einsum("...ij,...ij->...", S_H, H)[..., None, None] * I + S_H @ _t(H)
    if cal == "mooney_rivlin":
        jm = np.asarray(J, dtype=float)[..., None, None] ** (-7.0 / 6.0)
        return jm * (cof_prime(F, S_H) @ _t(F)) - (7.0 / 6.0) * np.einsum("...ij,...ij->...", S_H, H)[..., None, None] * I
    raise ValueError(cal)


def h_mandel(energy: PolyconvexEnergy, F, H, J, S_H):
    """Mandel contribution ``M_H`` (before the deviatoric projection)."""
    if not energy.has_h:
        return np.zeros_like(as_matrix(F))
    cal = energy.calibration
    if cal == "cof":
        return _t(F) @ cof_prime(F, S_H)
    if cal == "jalpha":
        return _t(H) @ S_H
    if cal == "mooney_rivlin":
        jm = np.asarray(J, dtype=float)[..., None, None] ** (-7.0 / 6.0)
        return jm * (_t(F) @ cof_prime(F, S_H))
    raise ValueError(cal)


def stress_pair(reg: YosidaRegularizedEnergy, F, J, H=None):
    """Cauchy and (full 3x3, trace-free) Mandel stress arrays plus the energy value."""
    base = reg.base
    f = as_matrix(F)
    j = np.asarray(J, dtype=float)
    if base.has_h and H is None:
        H = calibrated_h(f, j, base.calibration, base.alpha)
    x = base.pack(f, j, H)
    val, s = reg.evaluate(x)
    sF, sH, sJ = base.unpack(s)
    h = None if H is None else as_matrix(H)
    T = sF @ _t(f) + h_stress(base, f, h, j, sH) + (j * sJ + val)[..., None, None] * np.eye(3)
    M = dev(_t(f) @ sF + h_mandel(base, f, h, j, sH))
    return T, M, val


def stress_T(reg: YosidaRegularizedEnergy, F, J, H=None):
    """Regularized Cauchy stress; H defaults to its calibrated value."""
    T = stress_pair(reg, F, J, H)[0]
    return Tensor3(T) if isinstance(F, Tensor3) else T


def stress_M(reg: YosidaRegularizedEnergy, F, J, H=None):
    """Regularized Mandel stress, trace-free by storage."""
    M = stress_pair(reg, F, J, H)[1]
    if isinstance(F, Tensor3):
        return DevTensor3(dev_pack(M))
    return dev_unpack(dev_pack(M))


def actual_gradient(energy, F):
    """Derivative of ``phi(F) = phi_breve(F, H(F), det F)`` by the chain rule."""
    f = as_matrix(F)
    J = det(f)
    x = energy.pack(f, J)
    _, H, _ = energy.unpack(x)
    sF, sH, sJ = energy.unpack(energy.grad(x))
    g = sF + sJ[..., None, None] * cof(f)
    if energy.has_h:
        cal = energy.calibration
        cf = cof(f)
        if cal == "cof":
            g = g + cof_prime(f, sH)
        elif cal == "jalpha":
            a = energy.alpha
            g = g + J[..., None, None] ** a * sH + (a * J ** (a - 1.0) * np.einsum("...ij,...ij->...", sH, f))[..., None, None] * cf
        elif cal == "mooney_rivlin":
            jm = J[..., None, None] ** (-7.0 / 6.0)
            g = g + jm * cof_prime(f, sH) - (7.0 / 6.0) * (J ** (-13.0 / 6.0) * np.einsum("...ij,...ij->...", sH, cf))[..., None, None] * cf
    return g


def cauchy_from_actual(energy, F):
    """Unregularized ``phi'(F) F^T + phi(F) I``."""
    f = as_matrix(F)
    return actual_gradient(energy, f) @ _t(f) + energy.phi_of_F(f)[..., None, None] * np.eye(3)


class ReferentialEnergy:
    """Referential energy ``psi(F) = phi(F) det F`` built from an actual-frame law."""

    def __init__(self, energy: PolyconvexEnergy):
        self.energy = energy

    def value(self, F):
        f = as_matrix(F)
        return self.energy.phi_of_F(f) * det(f)

    def grad(self, F):
        f = as_matrix(F)
        return actual_gradient(self.energy, f) * det(f)[..., None, None] + self.energy.phi_of_F(f)[..., None, None] * cof(f)


def _check_det(F):
    d = det(F)
    if np.any(d <= 0):
        raise ValueError("referential stress needs det F > 0")
    return d


def cauchy_from_referential(psi, F):
    """``psi'(F) F^T / det F`` for any object with ``grad(F)``."""
    f = as_matrix(F)
    d = _check_det(f)
    out = psi.grad(f) @ _t(f) / d[..., None, None]
    return Tensor3(out) if isinstance(F, Tensor3) else out


def mandel_from_referential(psi, F):
    """``dev(F^T psi'(F) / det F)``."""
    f = as_matrix(F)
    d = _check_det(f)
    out = dev(_t(f) @ psi.grad(f) / d[..., None, None])
    return Tensor3(out) if isinstance(F, Tensor3) else out

