"""Isotropic quadratic stored energy of the small-strain model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import SymTensor3, as_matrix, ddot, dev, sph, sym_pack, trace

__all__ = ["IsotropicQuadraticEnergy", "phi_small", "dphi_small", "cauchy_small"]


@dataclass(frozen=True)
class IsotropicQuadraticEnergy:
    """``phi(E) = 3/2 K |sph E|^2 + G |dev E|^2``.

    Parameters
    ----------
    K_E : float
        Elastic bulk modulus.
    G_E : float
        Elastic shear modulus.
    """

    K_E: float
    G_E: float

    def __post_init__(self):
        if not (self.K_E > 0 and self.G_E > 0):
            raise ValueError("K_E and G_E must be positive")

    @property
    def alpha(self) -> float:
        """Strong-convexity constant: ``phi(E) >= alpha |E|^2``."""
        return min(1.5 * self.K_E, self.G_E)

    def value(self, E):
        e = as_matrix(E)
        d = dev(e)
        return 0.5 * self.K_E * trace(e) ** 2 + self.G_E * ddot(d, d)

    def grad(self, E):
        e = as_matrix(E)
        return 3.0 * self.K_E * sph(e) + 2.0 * self.G_E * dev(e)

    def cauchy(self, E):
        e = as_matrix(E)
        return self.grad(e) + self.value(e)[..., None, None] * np.eye(3)


def phi_small(E, mat: IsotropicQuadraticEnergy):
    return mat.value(E)


def dphi_small(E, mat: IsotropicQuadraticEnergy):
    out = mat.grad(E)
    return SymTensor3(sym_pack(out)) if isinstance(E, SymTensor3) else out


def cauchy_small(E, mat: IsotropicQuadraticEnergy):
    """Cauchy stress ``phi'(E) + phi(E) I``."""
    out = mat.cauchy(E)
    return SymTensor3(sym_pack(out)) if isinstance(E, SymTensor3) else out
