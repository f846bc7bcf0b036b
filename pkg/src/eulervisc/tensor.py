"""3x3 tensor algebra used by every constitutive and kinematic expression.

All functions are vectorised: they accept arrays of shape ``(..., 3, 3)`` and
operate on the trailing two axes.  Passing one of the value types
(:class:`Tensor3`, :class:`SymTensor3`, :class:`DevTensor3`) returns a value
type again, so single-tensor code reads naturally while grid code stays on
plain arrays.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor3", "SymTensor3", "DevTensor3", "SingularMatrixError",
    "as_matrix", "identity", "trace", "ddot", "norm", "sph", "dev", "sym", "skw",
    "det", "cof", "inv", "cof_prime", "b_zj",
    "sym_pack", "sym_unpack", "dev_pack", "dev_unpack", "devsym_pack", "devsym_unpack",
    "SYM_INDEX", "DEV_INDEX", "DEVSYM_INDEX",
]

# storage orders of the structured subspaces
SYM_INDEX = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
DEV_INDEX = ((0, 0), (1, 1), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1))
DEVSYM_INDEX = ((0, 0), (1, 1), (1, 2), (0, 2), (0, 1))

PIVOT_TOL = 1e-14

_LEVI = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI[_i, _j, _k] = 1.0
    _LEVI[_i, _k, _j] = -1.0


class SingularMatrixError(ArithmeticError):
    """Raised by :func:`inv` when the determinant is below the pivot tolerance."""


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} entries must be finite")
    return arr


class Tensor3:
    """A general real 3x3 tensor."""

    __slots__ = ("_m",)

    def __init__(self, entries):
        m = np.array(entries, dtype=float).reshape(3, 3)
        self._m = _finite(m, "Tensor3")
        self._m.setflags(write=False)

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self._m, dtype=dtype)

    def __add__(self, other):
        return Tensor3(self._m + as_matrix(other))

    def __sub__(self, other):
        return Tensor3(self._m - as_matrix(other))

    def __matmul__(self, other):
        return Tensor3(self._m @ as_matrix(other))

    def __mul__(self, s: float):
        return Tensor3(self._m * s)

    __rmul__ = __mul__

    @property
    def T(self):
        return Tensor3(self._m.T)

    def __eq__(self, other):
        return isinstance(other, (Tensor3, SymTensor3, DevTensor3)) and np.array_equal(self._m, other.matrix)

    def __repr__(self):
        return f"Tensor3({self._m.tolist()})"


class SymTensor3:
    """Symmetric 3x3 tensor stored by its 6 independent entries.

    Storage order is ``xx, yy, zz, yz, xz, xy``; asymmetry cannot be represented.
    """

    __slots__ = ("_c",)

    def __init__(self, components):
        c = np.array(components, dtype=float).reshape(6)
        self._c = _finite(c, "SymTensor3")
        self._c.setflags(write=False)

    @classmethod
    def from_matrix(cls, A):
        """Symmetric part of ``A`` in packed storage."""
        return cls(sym_pack(sym(as_matrix(A))))

    @property
    def components(self) -> np.ndarray:
        return self._c

    @property
    def matrix(self) -> np.ndarray:
        return sym_unpack(self._c)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)

    def __add__(self, other):
        if isinstance(other, SymTensor3):
            return SymTensor3(self._c + other._c)
        return Tensor3(self.matrix + as_matrix(other))

    def __sub__(self, other):
        if isinstance(other, SymTensor3):
            return SymTensor3(self._c - other._c)
        return Tensor3(self.matrix - as_matrix(other))

    def __mul__(self, s: float):
        return SymTensor3(self._c * s)

    __rmul__ = __mul__

    def __eq__(self, other):
        return isinstance(other, (Tensor3, SymTensor3, DevTensor3)) and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"SymTensor3({self._c.tolist()})"


class DevTensor3:
    """Trace-free 3x3 tensor.

    ``symmetric=True`` stores 5 entries (``xx, yy, yz, xz, xy``), otherwise 8
    entries (``xx, yy, xy, xz, yx, yz, zx, zy``).  In both cases ``zz`` is
    reconstructed as ``-xx - yy`` so the trace vanishes structurally.
    """

    __slots__ = ("_c", "symmetric")

    def __init__(self, components, symmetric: bool = False):
        n = 5 if symmetric else 8
        c = np.array(components, dtype=float).reshape(n)
        self._c = _finite(c, "DevTensor3")
        self._c.setflags(write=False)
        self.symmetric = symmetric

    @classmethod
    def from_matrix(cls, A, symmetric: bool = False):
        """Deviatoric part of ``A`` (symmetrised first if ``symmetric``)."""
        m = dev(as_matrix(A))
        if symmetric:
            return cls(devsym_pack(sym(m)), symmetric=True)
        return cls(dev_pack(m))

    @property
    def components(self) -> np.ndarray:
        return self._c

    @property
    def matrix(self) -> np.ndarray:
        return devsym_unpack(self._c) if self.symmetric else dev_unpack(self._c)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)

    def __eq__(self, other):
        return isinstance(other, (Tensor3, SymTensor3, DevTensor3)) and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"DevTensor3({self._c.tolist()}, symmetric={self.symmetric})"


_VALUE_TYPES = (Tensor3, SymTensor3, DevTensor3)


def as_matrix(A) -> np.ndarray:
    """Plain ``(..., 3, 3)`` array view of a tensor or tensor-valued array."""
    if isinstance(A, _VALUE_TYPES):
        return A.matrix
    return np.asarray(A, dtype=float)


def _wrap(like, out, kind=Tensor3):
    if isinstance(like, _VALUE_TYPES):
        if kind is SymTensor3:
            return SymTensor3(sym_pack(out))
        return kind(out)
    return out


def identity(shape=()) -> np.ndarray:
    return np.broadcast_to(np.eye(3), tuple(shape) + (3, 3)).copy()


def trace(A):
    return np.einsum("...ii->...", as_matrix(A))


def ddot(A, B):
    """Full contraction ``A : B``."""
    return np.einsum("...ij,...ij->...", as_matrix(A), as_matrix(B))


def norm(A):
    """Frobenius norm ``|A|``."""
    a = as_matrix(A)
    return np.sqrt(np.einsum("...ij,...ij->...", a, a))


def sph(A):
    """Spherical part ``(tr A / 3) I``."""
    a = as_matrix(A)
    out = (trace(a) / 3.0)[..., None, None] * np.eye(3)
    return _wrap(A, out)


def dev(A):
    """Deviatoric part ``A - sph(A)``."""
    a = as_matrix(A)
    out = a - (trace(a) / 3.0)[..., None, None] * np.eye(3)
    return _wrap(A, out)


def sym(A):
    a = as_matrix(A)
    out = 0.5 * (a + np.swapaxes(a, -1, -2))
    return _wrap(A, out, SymTensor3)


def skw(A):
    a = as_matrix(A)
    out = 0.5 * (a - np.swapaxes(a, -1, -2))
    return _wrap(A, out)


def det(A):
    a = as_matrix(A)
    return (a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]))


def cof(A):
    """Cofactor matrix by signed 2x2 minors; equals ``det(A) inv(A)^T`` when invertible."""
    a = as_matrix(A)
    c = np.empty_like(a)
    c[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    c[..., 0, 1] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
    c[..., 0, 2] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
    c[..., 1, 0] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    c[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    c[..., 1, 2] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
    c[..., 2, 0] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    c[..., 2, 1] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    c[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return _wrap(A, c)


def inv(A, pivot_tol: float = PIVOT_TOL):
    """Inverse via the cofactor (Cramer) formula.

    Raises
    ------
    SingularMatrixError
        If ``|det A| <= pivot_tol * max|A_ij|**3`` for any matrix in the batch.
    """
    a = as_matrix(A)
    d = det(a)
    scale = np.max(np.abs(a), axis=(-1, -2)) ** 3
    if np.any(np.abs(d) <= pivot_tol * scale) or np.any(scale == 0):
        raise SingularMatrixError("matrix is singular to within the pivot tolerance")
    out = np.swapaxes(cof(a), -1, -2) / d[..., None, None]
    return _wrap(A, out)


def cof_prime(F, G):
    """Directional derivative of ``cof`` at ``F`` in direction ``G``.

    ``cof`` is quadratic, so this is the symmetric bilinear form
    ``eps_imn eps_jpq F_mp G_nq``.  It is self-adjoint in the sense
    ``A : cof_prime(F, B) = B : cof_prime(F, A)``.
    """
    f, g = as_matrix(F), as_matrix(G)
    out = np.einsum("imn,jpq,...mp,...nq->...ij", _LEVI, _LEVI, f, g, optimize=True)
    return _wrap(F, out)


def b_zj(grad_v, v_dot_grad_e, E):
    """Bilinear part of the corotational (Zaremba-Jaumann) rate.

    ``(v.grad)E - W E + E W`` with ``W = skw(grad_v)``.  The transport term
    is supplied precomputed because it needs the grid.
    """
    w = skw(as_matrix(grad_v))
    e = as_matrix(E)
    out = as_matrix(v_dot_grad_e) - w @ e + e @ w
    if isinstance(E, SymTensor3):
        return SymTensor3(sym_pack(out))
    return _wrap(E, out)


def _pack(A, index):
    a = as_matrix(A)
    return np.stack([a[..., i, j] for i, j in index], axis=-1)


def sym_pack(A) -> np.ndarray:
    """``(..., 3, 3)`` symmetric array to ``(..., 6)`` storage (upper entries)."""
    return _pack(A, SYM_INDEX)


def sym_unpack(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    out = np.empty(c.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(SYM_INDEX):
        out[..., i, j] = c[..., k]
        out[..., j, i] = c[..., k]
    return out


def dev_pack(A) -> np.ndarray:
    """Trace-free ``(..., 3, 3)`` array to ``(..., 8)`` storage."""
    return _pack(A, DEV_INDEX)


def dev_unpack(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    out = np.empty(c.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(DEV_INDEX):
        out[..., i, j] = c[..., k]
    out[..., 2, 2] = -c[..., 0] - c[..., 1]
    return out


def devsym_pack(A) -> np.ndarray:
    return _pack(A, DEVSYM_INDEX)


def devsym_unpack(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    out = np.empty(c.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(DEVSYM_INDEX):
        out[..., i, j] = c[..., k]
        out[..., j, i] = c[..., k]
    out[..., 2, 2] = -c[..., 0] - c[..., 1]
    return out
