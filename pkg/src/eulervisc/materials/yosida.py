"""Moreau-Yosida envelope and the simplified singular-part cap.

The regularized energy is ``Y_eps phi(x) + sqrt(delta)/2 |x|^2`` where
``Y_eps phi(x) = min_y phi(y) + |y - x|^2 / (2 eps)``.  The minimizer (the
proximal point) is found by a damped Newton iteration vectorised over grid
cells.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from ..tensor import as_matrix
from .energies import ConvexEnergy, PolyconvexEnergy

__all__ = [
    "YosidaRegularizedEnergy", "ProxConvergenceError", "YosidaValue", "prox", "moreau_envelope",
    "yosida_eval",
]

MODES = ("full-prox", "simplified-cap")


class ProxConvergenceError(RuntimeError):
    """The inner proximal minimization did not converge."""


def prox(energy: ConvexEnergy, x, eps: float, gtol_factor: float = 1e-12, max_iter: int = 100):
    """Proximal point of ``energy`` at ``x`` (batched over leading axes).

    Damped Newton on ``q(y) = phi(y) + |y - x|^2 / (2 eps)`` with per-point
    backtracking that keeps ``y`` inside the energy's domain.  A point is
    converged when ``|grad q| <= gtol_factor (1 + |x| / eps)``; one extra
    full Newton step is then taken so the result sits at round-off.

    Returns
    -------
    y : ndarray
        Proximal points, same shape as ``x``.
    iterations : int
        Newton iterations used by the slowest point.
    """
    if not eps > 0:
        raise ValueError("Yosida parameter eps must be positive")
    x = np.asarray(x, dtype=float)
    batch = x.shape[:-1]
    n = x.shape[-1]
    xf = x.reshape(-1, n)
    y = xf.copy()
    bad = ~energy.feasible(y)
    if np.any(bad):
        # pull infeasible starting points into the domain along the last slot
        y[bad, -1] = np.maximum(np.abs(y[bad, -1]), 1e-2)
    gtol = gtol_factor * (1.0 + np.linalg.norm(xf, axis=-1) / eps)
    eye = np.eye(n) / eps

    def objective(yy, idx):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            v = energy.value(yy)
        d = yy - xf[idx]
        return v + np.sum(d * d, axis=-1) / (2.0 * eps)

    active = np.arange(len(y))
    polished = np.zeros(len(y), dtype=bool)
    it = 0
    while active.size:
        if it >= max_iter:
            raise ProxConvergenceError(
                f"proximal Newton did not converge in {max_iter} iterations at {active.size} points"
            )
        it += 1
        ya = y[active]
        g = energy.grad(ya) + (ya - xf[active]) / eps
        gn = np.linalg.norm(g, axis=-1)
        done = gn <= gtol[active]
        hmat = energy.hess(ya) + eye
        step = -np.linalg.solve(hmat, g[..., None])[..., 0]
        # points already within tolerance get one polishing step and leave
        finish = done & ~polished[active]
        retire = done & polished[active]
        lam = np.ones(len(active))
        q0 = objective(ya, active)
        trial = ya + step
        for _ in range(60):
            ok = energy.feasible(trial)
            qt = np.where(ok, objective(np.where(ok[:, None], trial, ya), active), np.inf)
            accept = ok & (qt <= q0 + 1e-14 * np.abs(q0) + 1e-300) | finish & ok
            if np.all(accept | retire):
                break
            shrink = ~accept & ~retire
            lam[shrink] *= 0.5
            trial[shrink] = ya[shrink] + lam[shrink, None] * step[shrink]
        moved = ~retire
        y[active[moved]] = trial[moved]
        polished[active[finish]] = True
        keep = ~retire
        tiny = np.linalg.norm(step, axis=-1) <= 1e-15 * (1.0 + np.linalg.norm(ya, axis=-1))
        keep &= ~(tiny & done)
        active = active[keep]
    return y.reshape(batch + (n,)), it


def moreau_envelope(energy: ConvexEnergy, x, eps: float, **kw):
    """Envelope value, gradient and proximal point at ``x``.

    The gradient is returned as ``grad phi(prox)``, which equals
    ``(x - prox) / eps`` at the exact proximal point but carries no
    cancellation error when ``eps`` is small.
    """
    y, _ = prox(energy, x, eps, **kw)
    s = energy.grad(y)
    val = energy.value(y) + 0.5 * eps * np.sum(s * s, axis=-1)
    return val, s, y


@dataclass(frozen=True)
class YosidaRegularizedEnergy:
    """Regularized polyconvex energy used by the finite-strain scheme.

    Parameters
    ----------
    base : PolyconvexEnergy
        Material law.
    eps : float
        Yosida parameter (``full-prox`` mode).
    delta : float
        Weight of the ``sqrt(delta)/2 |x|^2`` quadratic regularization.
    mode : {'full-prox', 'simplified-cap'}
        ``simplified-cap`` keeps the material law and replaces its singular
        part ``s(J)`` below ``j_floor`` by its tangent line.
    j_floor : float, optional
        Cap location for ``simplified-cap``; the stepper refreshes it every step.
    """

    base: PolyconvexEnergy
    eps: float = 1e-6
    delta: float = 0.0
    mode: str = "full-prox"
    j_floor: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "full-prox" and not self.eps > 0:
            raise ValueError("full-prox mode needs eps > 0")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @property
    def nvar(self) -> int:
        return self.base.nvar

    def with_floor(self, j_floor: float):
        return replace(self, j_floor=float(j_floor))

    def cap_active(self, x):
        x = np.asarray(x, dtype=float)
        if self.mode != "simplified-cap" or self.j_floor is None:
            return np.zeros(x.shape[:-1], dtype=bool)
        return x[..., -1] < self.j_floor

    def _capped_singular(self, J):
        s, ds, _ = self.base.singular(np.maximum(J, self.j_floor) if self.j_floor else J)
        if not self.j_floor:
            return s, ds
        below = J < self.j_floor
        return np.where(below, s + ds * (J - self.j_floor), s), ds

    def evaluate(self, x):
        """Value and gradient (packed layout) of the regularized energy."""
        x = np.asarray(x, dtype=float)
        if self.mode == "full-prox":
            val, s, _ = moreau_envelope(self.base, x, self.eps)
        else:
            F, H, J = self.base.unpack(x)
            if np.any(J <= 0):
                raise FloatingPointError("simplified-cap energy needs J > 0")
            f, fF, fH, fJ = self.base.regular(F, H, J)
            sc, dsc = self._capped_singular(J)
            val = f + sc
            s = self.base._assemble(fF, fH, fJ + dsc)
        if self.delta > 0:
            r = np.sqrt(self.delta)
            val = val + 0.5 * r * np.sum(x * x, axis=-1)
            s = s + r * x
        return val, s

    def value(self, x):
        return self.evaluate(x)[0]

    def grad(self, x):
        return self.evaluate(x)[1]


class YosidaValue(NamedTuple):
    value: np.ndarray
    dF: np.ndarray
    dJ: np.ndarray
    dH: np.ndarray | None


def yosida_eval(reg: YosidaRegularizedEnergy, F, J, H=None) -> YosidaValue:
    """Regularized energy and its partial derivatives at ``(F, [H,] J)``."""
    x = reg.base.pack(as_matrix(F), J, H)
    val, s = reg.evaluate(x)
    sF, sH, sJ = reg.base.unpack(s)
    return YosidaValue(val, sF, sJ, sH)
