"""Convex stored energies of the finite-strain model.

Energies act on a packed variable vector ``x`` of shape ``(..., nvar)``:
``x[..., :9]`` is F (row-major), ``x[..., 9:18]`` is the calibrated tensor H
when the energy uses one, and ``x[..., -1]`` is the Jacobian variable J.
Keeping one flat layout lets the proximal solver treat every material the same.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import as_matrix, cof, det

__all__ = [
    "ConvexEnergy", "QuadraticEnergy", "PolyconvexEnergy", "NeoHookean", "MooneyRivlin",
    "BarotropicFluid", "ReferentialNeoHookean", "FJPower", "CALIBRATIONS", "calibrated_h",
]

CALIBRATIONS = ("none", "cof", "jalpha", "mooney_rivlin")

_FD_STEP = 1e-5


class ConvexEnergy:
    """Interface of a convex function on ``R^nvar`` with an open convex domain."""

    nvar: int = 1

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hess(self, x):
        """Hessian by central differences of :meth:`grad` (override when cheap)."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        out = np.empty(x.shape + (n,))
        for k in range(n):
            h = _FD_STEP * np.maximum(1.0, np.abs(x[..., k]))
            xp = x.copy()
            xm = x.copy()
            xp[..., k] += h
            xm[..., k] -= h
            out[..., :, k] = (self.grad(xp) - self.grad(xm)) / (2.0 * h[..., None])
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def feasible(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1], dtype=bool)


@dataclass(frozen=True)
class QuadraticEnergy(ConvexEnergy):
    """``|x|^2 / 2`` on ``R^n``; closed-form reference for the proximal machinery."""

    n: int = 1

    @property
    def nvar(self):
        return self.n

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    def grad(self, x):
        return np.array(x, dtype=float)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.n), x.shape + (self.n,)).copy()


def calibrated_h(F, J, calibration: str, alpha: float = 0.0):
    """Auxiliary tensor H consistent with (F, J) for a given calibration."""
    f = as_matrix(F)
    j = np.asarray(J, dtype=float)[..., None, None]
    if calibration == "cof":
        return cof(f)
    if calibration == "jalpha":
        return j ** alpha * f
    if calibration == "mooney_rivlin":
        return j ** (-7.0 / 6.0) * cof(f)
    raise ValueError(f"calibration {calibration!r} carries no H")


class PolyconvexEnergy(ConvexEnergy):
    """Energy ``phi(F, H, J) = f(F, H, J) + s(J)`` with ``s`` singular at J -> 0+.

    Subclasses implement :meth:`regular` returning ``f`` and its partial
    derivatives and :meth:`singular` returning ``s, s', s''``.  The split is
    what the simplified-cap regularization modifies.
    """

    calibration: str = "none"
    alpha: float = 0.0
    isotropic: bool = True

    @property
    def has_h(self) -> bool:
        return self.calibration != "none"

    @property
    def nvar(self) -> int:
        return 19 if self.has_h else 10

    # --- layout helpers -------------------------------------------------
    def pack(self, F, J, H=None):
        f = as_matrix(F)
        parts = [f.reshape(f.shape[:-2] + (9,))]
        if self.has_h:
            if H is None:
                H = calibrated_h(f, J, self.calibration, self.alpha)
            h = as_matrix(H)
            parts.append(h.reshape(h.shape[:-2] + (9,)))
        parts.append(np.asarray(J, dtype=float)[..., None] * np.ones(f.shape[:-2] + (1,)))
        return np.concatenate(parts, axis=-1)

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        F = x[..., :9].reshape(x.shape[:-1] + (3, 3))
        H = x[..., 9:18].reshape(x.shape[:-1] + (3, 3)) if self.has_h else None
        return F, H, x[..., -1]

    # --- material law ---------------------------------------------------
    def regular(self, F, H, J):
        """Return ``(f, f_F, f_H, f_J)``; ``f_H`` is None without H."""
        raise NotImplementedError

    def singular(self, J):
        """Return ``(s, s', s'')``."""
        z = np.zeros_like(np.asarray(J, dtype=float))
        return z, z, z

    def feasible(self, x):
        return np.asarray(x, dtype=float)[..., -1] > 0

    def _assemble(self, fF, fH, fJ):
        parts = [fF.reshape(fF.shape[:-2] + (9,))]
        if self.has_h:
            parts.append(fH.reshape(fH.shape[:-2] + (9,)))
        parts.append(fJ[..., None])
        return np.concatenate(parts, axis=-1)

    def value(self, x):
        F, H, J = self.unpack(x)
        with np.errstate(invalid="ignore", divide="ignore"):
            f = self.regular(F, H, J)[0]
            s = self.singular(J)[0]
        return np.where(J > 0, f + s, np.inf)

    def grad(self, x):
        F, H, J = self.unpack(x)
        _, fF, fH, fJ = self.regular(F, H, J)
        ds = self.singular(J)[1]
        return self._assemble(fF, fH, fJ + ds)

    def regular_grad(self, x):
        F, H, J = self.unpack(x)
        _, fF, fH, fJ = self.regular(F, H, J)
        return self._assemble(fF, fH, fJ)

    def phi_of_F(self, F):
        """Actual-frame energy ``phi(F) = phi_breve(F, H(F), det F)``."""
        f = as_matrix(F)
        return self.value(self.pack(f, det(f)))


@dataclass(frozen=True)
class NeoHookean(PolyconvexEnergy):
    """Compressible neo-Hookean energy in the actual frame.

    ``1/2 K (J - 1 + e/K)^2 + G |F|^2 / J^power + s(J)`` with the singular
    term ``s = -e ln J`` (``singular_variant='log'``) or ``s = e / J^kappa``
    (``'inverse-power'``).  ``power = 2/3`` is the isochoric exponent; the
    coupling ``|F|^2 / J^power`` is convex only for ``0 <= power <= 1``.
    """

    K_E: float = 1.0
    G_E: float = 1.0
    epsilon_reg: float | None = None
    singular_variant: str = "log"
    kappa: float = 2.0
    power: float = 2.0 / 3.0

    def __post_init__(self):
        if not (self.K_E > 0 and self.G_E > 0):
            raise ValueError("K_E and G_E must be positive")
        if self.epsilon_reg is None:
            object.__setattr__(self, "epsilon_reg", 1e-3 * self.K_E)
        if self.epsilon_reg < 0:
            raise ValueError("epsilon_reg must be non-negative")
        if self.singular_variant not in ("log", "inverse-power"):
            raise ValueError("singular_variant must be 'log' or 'inverse-power'")

    def _volumetric(self, J):
        K, e = self.K_E, self.epsilon_reg
        a = J - 1.0 + e / K
        return 0.5 * K * a * a, K * a, K

    def regular(self, F, H, J):
        G, pw = self.G_E, self.power
        v, dv, _ = self._volumetric(J)
        f2 = np.einsum("...ij,...ij->...", F, F)
        jp = J ** (-pw)
        f = v + G * f2 * jp
        fF = 2.0 * G * jp[..., None, None] * F
        fJ = dv - pw * G * f2 * jp / J
        return f, fF, None, fJ

    def singular(self, J):
        e = self.epsilon_reg
        if self.singular_variant == "log":
            return -e * np.log(J), -e / J, e / J ** 2
        k = self.kappa
        return e * J ** (-k), -k * e * J ** (-k - 1), k * (k + 1) * e * J ** (-k - 2)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        F, H, J = self.unpack(x)
        G, pw = self.G_E, self.power
        f2 = np.einsum("...ij,...ij->...", F, F)
        jp = J ** (-pw)
        n = self.nvar
        out = np.zeros(x.shape[:-1] + (n, n))
        idx = np.arange(9)
        out[..., idx, idx] = (2.0 * G * jp)[..., None]
        cross = (-2.0 * pw * G * jp / J)[..., None] * F.reshape(F.shape[:-2] + (9,))
        out[..., :9, -1] = cross
        out[..., -1, :9] = cross
        out[..., -1, -1] = self.K_E + pw * (pw + 1.0) * G * f2 * jp / J ** 2 + self.singular(J)[2]
        self._hess_h(out, x)
        return out

    def _hess_h(self, out, x):
        pass


@dataclass(frozen=True)
class MooneyRivlin(NeoHookean):
    """Neo-Hookean plus ``G_MR |H|^2`` with ``H = J^(-7/6) Cof F``."""

    G_MR: float = 0.0
    calibration: str = "mooney_rivlin"

    def __post_init__(self):
        super().__post_init__()
        if self.G_MR < 0:
            raise ValueError("G_MR must be non-negative")

    @property
    def uses_h(self) -> bool:
        return self.G_MR != 0.0

    def without_h(self) -> NeoHookean:
        """The neo-Hookean energy this reduces to when ``G_MR == 0``."""
        return NeoHookean(self.K_E, self.G_E, self.epsilon_reg, self.singular_variant, self.kappa, self.power)

    def regular(self, F, H, J):
        f, fF, _, fJ = super().regular(F, H, J)
        if self.G_MR == 0.0:
            return f, fF, np.zeros_like(H), fJ
        return f + self.G_MR * np.einsum("...ij,...ij->...", H, H), fF, 2.0 * self.G_MR * H, fJ

    def _hess_h(self, out, x):
        idx = np.arange(9, 18)
        out[..., idx, idx] = 2.0 * self.G_MR


@dataclass(frozen=True)
class BarotropicFluid(PolyconvexEnergy):
    """Isentropic fluid ``phi(J) = c J^-gamma`` giving pressure ``a rho^gamma``.

    With reference density ``rho_ref`` the density is ``rho_ref / J`` and
    ``c = a rho_ref^gamma / (gamma - 1)``, so that ``-(J phi)' = a rho^gamma``.
    """

    a: float = 1.0
    gamma: float = 1.4
    rho_ref: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.gamma > 1 and self.rho_ref > 0):
            raise ValueError("need a > 0, gamma > 1, rho_ref > 0")

    @property
    def c(self) -> float:
        return self.a * self.rho_ref ** self.gamma / (self.gamma - 1.0)

    def pressure(self, J):
        return self.a * (self.rho_ref / np.asarray(J, dtype=float)) ** self.gamma

    def regular(self, F, H, J):
        z = np.zeros_like(J)
        return z, np.zeros_like(F), None, z

    def singular(self, J):
        c, g = self.c, self.gamma
        return c * J ** (-g), -g * c * J ** (-g - 1), g * (g + 1) * c * J ** (-g - 2)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (x.shape[-1],))
        out[..., -1, -1] = self.singular(x[..., -1])[2]
        return out


@dataclass(frozen=True)
class ReferentialNeoHookean(PolyconvexEnergy):
    """Neo-Hookean law posed referentially, rewritten with ``H = J^(-5/6) F``.

    ``phi(H, J) = 1/2 K (J - 2 + 1/J) + G |H|^2``; convex and strongly convex in H.
    """

    K_E: float = 1.0
    G_E: float = 1.0
    calibration: str = "jalpha"
    alpha: float = -5.0 / 6.0

    def regular(self, F, H, J):
        f = self.G_E * np.einsum("...ij,...ij->...", H, H)
        return f, np.zeros_like(F), 2.0 * self.G_E * H, np.zeros_like(J)

    def singular(self, J):
        K = self.K_E
        return 0.5 * K * (J - 2.0 + 1.0 / J), 0.5 * K * (1.0 - 1.0 / J ** 2), K / J ** 3

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (x.shape[-1],))
        idx = np.arange(9, 18)
        out[..., idx, idx] = 2.0 * self.G_E
        out[..., -1, -1] = self.singular(x[..., -1])[2]
        return out


@dataclass(frozen=True)
class FJPower(PolyconvexEnergy):
    """``|F|^2 / J^p``: convex exactly for ``0 <= p <= 1``."""

    p: float = 2.0 / 3.0

    def regular(self, F, H, J):
        f2 = np.einsum("...ij,...ij->...", F, F)
        jp = J ** (-self.p)
        return f2 * jp, 2.0 * jp[..., None, None] * F, None, -self.p * f2 * jp / J

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        F, _, J = self.unpack(x)
        p = self.p
        f2 = np.einsum("...ij,...ij->...", F, F)
        jp = J ** (-p)
        out = np.zeros(x.shape + (10,))
        idx = np.arange(9)
        out[..., idx, idx] = (2.0 * jp)[..., None]
        cross = (-2.0 * p * jp / J)[..., None] * F.reshape(F.shape[:-2] + (9,))
        out[..., :9, 9] = cross
        out[..., 9, :9] = cross
        out[..., 9, 9] = p * (p + 1.0) * f2 * jp / J ** 2
        return out
