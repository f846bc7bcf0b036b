"""Convexity identities and a sampling probe for stored energies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import as_matrix
from .energies import ConvexEnergy, FJPower, PolyconvexEnergy

__all__ = [
    "kinetic_hessian", "kinetic_hessian_det", "kinetic_hessian_psd", "fj_power_hessian_det",
    "fj_power_hessian_numeric", "central_hessian", "DomainBox", "ProbeReport", "convexity_probe",
    "kinetic_identity_check", "fj_power_identity_check",
]


def _check_rho(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("kinetic energy Hessian needs rho > 0")
    return rho


def kinetic_hessian(p_vec, rho):
    """4x4 Hessian of ``|p|^2 / (2 rho)`` in the variables ``(p, rho)``."""
    rho = _check_rho(rho)
    p = np.asarray(p_vec, dtype=float)
    out = np.zeros(p.shape[:-1] + (4, 4))
    idx = np.arange(3)
    out[..., idx, idx] = (1.0 / rho)[..., None]
    off = -p / (rho ** 2)[..., None]
    out[..., :3, 3] = off
    out[..., 3, :3] = off
    out[..., 3, 3] = np.sum(p * p, axis=-1) / rho ** 3
    return out


def kinetic_hessian_det(p_vec, rho):
    return np.linalg.det(kinetic_hessian(p_vec, rho))


def kinetic_hessian_psd(p_vec, rho, tol: float = 1e-12):
    """True where the smallest eigenvalue is ``>= -tol / rho``."""
    rho = _check_rho(rho)
    lam = np.linalg.eigvalsh(kinetic_hessian(p_vec, rho))[..., 0]
    return lam >= -tol / rho


def fj_power_hessian_det(F, J, pw):
    """Closed-form determinant of the Hessian of ``|F|^2 / J^pw`` in ``(F, J)``.

    ``2^9 pw (1 - pw) J^(-10 pw - 2) |F|^2``.
    """
    J = np.asarray(J, dtype=float)
    if np.any(J <= 0):
        raise ValueError("J must be positive")
    f = as_matrix(F)
    f2 = np.einsum("...ij,...ij->...", f, f)
    return 2.0 ** 9 * pw * (1.0 - pw) * J ** (-10.0 * pw - 2.0) * f2


def central_hessian(grad, x, rel_step: float = 1e-6):
    """Hessian by central differences of an analytic gradient."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = np.empty(x.shape + (n,))
    for k in range(n):
        h = rel_step * np.maximum(1.0, np.abs(x[..., k]))
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        out[..., :, k] = (grad(xp) - grad(xm)) / (2.0 * h[..., None])
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def fj_power_hessian_numeric(F, J, pw):
    """Determinant of the 10x10 finite-difference Hessian (and the matrix)."""
    J = np.asarray(J, dtype=float)
    if np.any(J <= 0):
        raise ValueError("J must be positive")
    en = FJPower(pw)
    x = en.pack(as_matrix(F), J)
    hmat = central_hessian(en.grad, x, rel_step=1e-5)
    return np.linalg.det(hmat), hmat


@dataclass(frozen=True)
class DomainBox:
    """Sampling region: ``|F| <= f_radius``, ``j_min <= J <= j_max``, ``|H| <= h_radius``."""

    f_radius: float = 2.0
    j_min: float = 0.5
    j_max: float = 2.0
    h_radius: float = 2.0

    def __post_init__(self):
        if not 0 < self.j_min < self.j_max:
            raise ValueError("need 0 < j_min < j_max")


@dataclass
class ProbeReport:
    passed: bool
    min_eigenvalue: float
    scale: float
    witness: np.ndarray
    n_samples: int

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} min_eig={self.min_eigenvalue:.6e} scale={self.scale:.3e} "
                f"samples={self.n_samples} witness={np.array2string(self.witness, precision=4, max_line_width=10**6)}")


def _ball(rng, n, dim, radius):
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return d * r[:, None]


def convexity_probe(energy: ConvexEnergy, domain_box: DomainBox | None = None, n_samples: int = 2000,
                    seed: int = 0, tol: float = 1e-6) -> ProbeReport:
    """Sample finite-difference Hessians and report the most negative eigenvalue.

    The probe fails when ``min eig < -tol * scale`` with ``scale`` the largest
    eigenvalue magnitude met during sampling.
    """
    box = domain_box or DomainBox()
    rng = np.random.default_rng(seed)
    if isinstance(energy, PolyconvexEnergy):
        F = _ball(rng, n_samples, 9, box.f_radius).reshape(-1, 3, 3)
        J = rng.uniform(box.j_min, box.j_max, n_samples)
        H = _ball(rng, n_samples, 9, box.h_radius).reshape(-1, 3, 3) if energy.has_h else None
        x = energy.pack(F, J, H)
    else:
        x = _ball(rng, n_samples, energy.nvar, box.f_radius)
    hmat = central_hessian(energy.grad, x, rel_step=1e-5)
    lam = np.linalg.eigvalsh(hmat)
    lo = lam[:, 0]
    k = int(np.argmin(lo))
    scale = float(np.max(np.abs(lam)))
    return ProbeReport(bool(lo[k] >= -tol * scale), float(lo[k]), scale, x[k], n_samples)


def _hadamard(hmat):
    return np.prod(np.linalg.norm(hmat, axis=-2), axis=-1)


def kinetic_identity_check(n: int = 10_000, seed: int = 0, v_max: float = 10.0):
    """Sample ``(p, rho)`` with ``rho`` log-uniform in (1e-3, 1e3) and ``|p/rho| <= v_max``.

    Returns ``(det_ok, psd_ok, worst)`` where ``det_ok`` compares the 4x4
    determinant with zero against ``1e-10`` times its Hadamard bound.
    """
    rng = np.random.default_rng(seed)
    rho = 10.0 ** rng.uniform(-3, 3, n)
    v = _ball(rng, n, 3, v_max)
    p = rho[:, None] * v
    hmat = kinetic_hessian(p, rho)
    d = np.abs(np.linalg.det(hmat))
    scale = _hadamard(hmat)
    ratio = d / scale
    lam = np.linalg.eigvalsh(hmat)[:, 0]
    k = int(np.argmax(ratio))
    return bool(np.all(ratio <= 1e-10)), bool(np.all(lam >= -1e-12 / rho)), {"p": p[k], "rho": rho[k],
                                                                          "det_ratio": float(ratio[k])}


def fj_power_identity_check(pw: float, n: int = 1000, seed: int = 0, rtol: float = 1e-6):
    """Closed-form versus finite-difference Hessian determinant of ``|F|^2 / J^pw``.

    The error allowance is ``rtol`` relative to the closed form plus ``1e-2 rtol``
    of the Hadamard bound, which only matters where the determinant vanishes
    (``pw`` in {0, 1}).  Returns ``(ok, worst)``.
    """
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, 3, 3))
    J = rng.uniform(0.5, 2.0, n)
    closed = fj_power_hessian_det(F, J, pw)
    num, hmat = fj_power_hessian_numeric(F, J, pw)
    allow = rtol * np.abs(closed) + 1e-2 * rtol * _hadamard(hmat)
    err = np.abs(num - closed)
    k = int(np.argmax(err / np.maximum(allow, np.finfo(float).tiny)))
    return bool(np.all(err <= allow)), {"F": F[k], "J": float(J[k]), "closed": float(closed[k]),
                                        "numeric": float(num[k])}
