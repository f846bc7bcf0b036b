"""Structured-grid fields and summation-by-parts difference operators.

Every derivative is the centered difference ``D_k f = (f[i+1] - f[i-1]) / 2h``.
On periodic grids ``D_k^T = -D_k``, so ``div`` is exactly ``-grad^T``,
``laplacian = div grad`` and :meth:`Grid.hessian_adjoint` is exactly the
transpose of :meth:`Grid.hessian`.  Those identities are what make the
discrete energy balances of the steppers exact rather than approximate.

Array layout: a field on a grid with shape ``(n1, ..., nd)`` is an array of
shape ``(n1, ..., nd) + value_shape``.  Vectors and tensors are always 3D
(plane-strain embedding); derivatives along unresolved directions are zero.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

__all__ = [
    "Grid", "Field", "GridMismatchError", "BoundaryConditionError", "ExponentRangeError", "VALUE_SHAPES",
    "write_snapshot", "read_snapshot", "export_csv",
]

VALUE_SHAPES = {
    "scalar": (), "vector": (3,), "tensor": (3, 3), "sym": (6,), "dev": (8,), "devsym": (5,),
    "third": (3, 3, 3),
}

BC_TAGS = ("neumann", "impermeable", "odd")


class GridMismatchError(ValueError):
    pass


class BoundaryConditionError(ValueError):
    pass


class ExponentRangeError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on a periodic torus or a box.

    Parameters
    ----------
    n : tuple of int
        Cells per resolved dimension (1 to 3 entries, each >= 4).
    h : tuple of float
        Spacing per resolved dimension.
    topology : {'periodic', 'box'}
    """

    n: tuple
    h: tuple
    topology: str = "periodic"

    def __post_init__(self):
        n = tuple(int(k) for k in np.atleast_1d(self.n))
        h = tuple(float(k) for k in np.atleast_1d(self.h))
        if len(h) == 1 and len(n) > 1:
            h = h * len(n)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "h", h)
        if not 1 <= len(n) <= 3 or len(h) != len(n):
            raise ValueError("grid needs 1-3 resolved dimensions with one spacing each")
        if min(n) < 4:
            raise ValueError("grid needs at least 4 cells per dimension")
        if min(h) <= 0:
            raise ValueError("grid spacing must be positive")
        if self.topology not in ("periodic", "box"):
            raise ValueError("topology must be 'periodic' or 'box'")

    @classmethod
    def uniform(cls, n, length=1.0, topology="periodic"):
        n = tuple(int(k) for k in np.atleast_1d(n))
        length = np.broadcast_to(np.asarray(length, dtype=float), (len(n),))
        return cls(n, tuple(float(L / k) for L, k in zip(length, n)), topology)

    @property
    def dims(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def ncell(self) -> int:
        return int(np.prod(self.n))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def volume(self) -> float:
        return float(np.prod([k * h for k, h in zip(self.n, self.h)]))

    def coords(self):
        """Cell-centre coordinates, one broadcastable array per resolved axis."""
        axes = [(np.arange(k) + 0.5) * h for k, h in zip(self.n, self.h)]
        return np.meshgrid(*axes, indexing="ij")

    def zeros(self, kind="scalar"):
        return np.zeros(self.n + VALUE_SHAPES[kind])

    # --- difference operators -------------------------------------------
    def parity(self, bc, value_shape):
        """Reflection signs ``(dims,) + value_shape`` for a box boundary tag.

        ``neumann`` reflects evenly, ``odd`` oddly, and ``impermeable`` makes
        component ``i`` of the first value index odd across faces normal to
        axis ``i`` (zero normal velocity).  An explicit array is passed through.
        """
        if bc is None or isinstance(bc, str):
            if bc not in BC_TAGS:
                raise BoundaryConditionError(f"box topology needs a boundary tag from {BC_TAGS}, got {bc!r}")
            par = np.ones((self.dims,) + tuple(value_shape))
            if bc == "odd":
                par[:] = -1.0
            elif bc == "impermeable" and value_shape:
                for a in range(self.dims):
                    par[(a, a)] = -1.0
            return par
        return np.broadcast_to(np.asarray(bc, dtype=float), (self.dims,) + tuple(value_shape))

    def diff(self, f, axis: int, bc=None):
        """Centered derivative of ``f`` along resolved ``axis``.

        On box grids ``bc`` is a tag or a parity array for this axis with the
        field's value shape.
        """
        f = np.asarray(f)
        h2 = 2.0 * self.h[axis]
        if self.topology == "periodic":
            return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / h2
        vshape = f.shape[self.dims:]
        s = bc if isinstance(bc, np.ndarray) and bc.shape == vshape else self.parity(bc, vshape)[axis]
        n = f.shape[axis]
        first = np.take(f, [0], axis=axis) * s
        last = np.take(f, [n - 1], axis=axis) * s
        ext = np.concatenate([first, f, last], axis=axis)
        hi = np.take(ext, np.arange(2, n + 2), axis=axis)
        lo = np.take(ext, np.arange(0, n), axis=axis)
        return (hi - lo) / h2

    def _grad(self, f, par):
        out = np.zeros(f.shape + (3,))
        for k in range(self.dims):
            out[..., k] = self.diff(f, k, None if par is None else par[k])
        if par is None:
            return out, None
        pout = np.repeat(par[..., None], 3, axis=-1)
        for k in range(self.dims):
            pout[k, ..., k] *= -1.0
        return out, pout

    def _div(self, u, par):
        if u.shape[-1] != 3 or u.ndim <= self.dims:
            raise ValueError("div needs a vector- or tensor-valued field")
        out = None
        for k in range(self.dims):
            t = self.diff(u[..., k], k, None if par is None else par[k][..., k])
            out = t if out is None else out + t
        if par is None:
            return out, None
        pout = par[..., 0].copy()
        pout[0] *= -1.0
        return out, pout

    def _start(self, f, bc):
        if self.topology == "periodic":
            return None
        return np.array(self.parity(bc, np.shape(f)[self.dims:]))

    def grad(self, f, bc=None):
        """Append a derivative index: ``out[..., k] = D_k f``."""
        f = np.asarray(f, dtype=float)
        return self._grad(f, self._start(f, bc))[0]

    def div(self, u, bc=None):
        """Contract the last value index with a derivative: ``sum_k D_k u[..., k]``."""
        u = np.asarray(u, dtype=float)
        return self._div(u, self._start(u, bc))[0]

    def laplacian(self, f, bc=None):
        """``div(grad f)`` componentwise; equals the composition exactly."""
        f = np.asarray(f, dtype=float)
        g, pg = self._grad(f, self._start(f, bc))
        return self._div(g, pg)[0]

    def hessian(self, v, bc=None):
        """``out[..., i, j, k] = D_k D_j v_i``."""
        v = np.asarray(v, dtype=float)
        g, pg = self._grad(v, self._start(v, bc))
        return self._grad(g, pg)[0]

    def hessian_adjoint(self, A, bc=None):
        """Transpose of :meth:`hessian`: ``sum_jk D_j D_k A_ijk``.

        On box grids ``bc`` refers to the vector field whose Hessian ``A`` is.
        """
        A = np.asarray(A, dtype=float)
        par = None
        if self.topology != "periodic":
            pv = np.array(self.parity(bc, A.shape[self.dims:-2]))
            par = _hess_parity(pv, self.dims)
        d, pd = self._div(A, par)
        return self._div(d, pd)[0]

    def hyperstress_apply(self, v, mu: float, p_exp: float, bc: str | None = None, allow_unsafe: bool = False):
        """Variational double divergence of ``mu |hess v|^(p-2) hess v``.

        ``inner(hyperstress_apply(v), v) = integrate(mu |hess v|^p)`` holds
        exactly because the operator is ``hessian^T`` applied to the flux.
        """
        if not allow_unsafe and not p_exp > 3:
            raise ExponentRangeError(f"hyperviscosity exponent must satisfy p > 3, got {p_exp}")
        if mu == 0:
            return np.zeros_like(np.asarray(v, dtype=float))
        hv = self.hessian(v, bc)
        return self.hessian_adjoint(mu * _pow_weight(hv, p_exp, 3) * hv, bc)

    # --- quadrature -----------------------------------------------------
    def cellsum(self, f):
        """Deterministic (pairwise) sum over cells of a scalar field."""
        f = np.ascontiguousarray(f, dtype=float)
        if f.shape != self.n:
            raise GridMismatchError(f"field of shape {f.shape} does not live on grid {self.n}")
        return float(np.add.reduce(f.ravel()))

    def integrate(self, f):
        return self.cellsum(f) * self.cell_volume

    def inner(self, f, g):
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        if f.shape != g.shape:
            raise GridMismatchError("inner product of fields with different shapes")
        prod = f * g
        if prod.ndim > self.dims:
            prod = prod.reshape(self.n + (-1,)).sum(axis=-1)
        return self.integrate(prod)


def _hess_parity(pv, dims):
    """Parity of ``D_k D_j v_i`` given the parity of ``v``."""
    out = np.repeat(np.repeat(pv[..., None, None], 3, axis=-2), 3, axis=-1)
    for a in range(dims):
        out[a, ..., a, :] *= -1.0
        out[a, ..., :, a] *= -1.0
    return out


def _pow_weight(a, p, nval):
    """``|a|^(p-2)`` with the norm over the last ``nval`` axes."""
    axes = tuple(range(-nval, 0))
    s = np.sum(a * a, axis=axes)
    if p == 4:
        w = s
    else:
        w = s ** ((p - 2.0) / 2.0)
    return w.reshape(w.shape + (1,) * nval)


@dataclass
class Field:
    """A grid function with a declared value kind and finite entries."""

    grid: Grid
    values: np.ndarray
    kind: str = "scalar"

    def __post_init__(self):
        if self.kind not in VALUE_SHAPES:
            raise ValueError(f"unknown field kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        want = self.grid.n + VALUE_SHAPES[self.kind]
        if self.values.shape != want:
            raise GridMismatchError(f"{self.kind} field needs shape {want}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field entries must be finite")

    def _same_grid(self, other):
        if other.grid != self.grid:
            raise GridMismatchError("fields live on different grids")

    def integrate(self):
        if self.kind != "scalar":
            raise ValueError("integrate needs a scalar field")
        return self.grid.integrate(self.values)

    def inner(self, other: "Field"):
        self._same_grid(other)
        return self.grid.inner(self.values, other.values)

    def grad(self, bc=None):
        kind = {"scalar": "vector", "vector": "tensor"}.get(self.kind)
        if kind is None:
            raise ValueError("grad takes scalar or vector fields")
        return Field(self.grid, self.grid.grad(self.values, bc), kind)

    def div(self, bc=None):
        kind = {"vector": "scalar", "tensor": "vector"}.get(self.kind)
        if kind is None:
            raise ValueError("div takes vector or tensor fields")
        return Field(self.grid, self.grid.div(self.values, bc), kind)

    def laplacian(self, bc=None):
        return Field(self.grid, self.grid.laplacian(self.values, bc), self.kind)

    def hessian(self, bc=None):
        if self.kind != "vector":
            raise ValueError("hessian takes a vector field")
        return Field(self.grid, self.grid.hessian(self.values, bc), "third")


# --- snapshot container -------------------------------------------------
_MAGIC = b"EVSNAP1\n"


def write_snapshot(path, grid: Grid, fields: Mapping[str, tuple], time: float, extra: dict | None = None):
    """Write fields as a self-describing binary container.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (grid, time, field names, kinds and shapes), then each field's values as
    row-major little-endian float64 in header order.

    ``fields`` maps a name to ``(kind, array)``.
    """
    header = {
        "grid": {"n": list(grid.n), "h": list(grid.h), "topology": grid.topology},
        "time": float(time),
        "fields": [{"name": k, "kind": kind, "shape": list(np.shape(a))} for k, (kind, a) in fields.items()],
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for _, (_, a) in fields.items():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes(order="C"))


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns ``(grid, time, {name: (kind, array)}, header)``."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a snapshot container")
        (nh,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(nh).decode())
        g = header["grid"]
        grid = Grid(tuple(g["n"]), tuple(g["h"]), g["topology"])
        out = {}
        for spec in header["fields"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            a = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(spec["shape"])
            out[spec["name"]] = (spec["kind"], a.astype(float))
    return grid, header["time"], out, header


def export_csv(grid: Grid, fields: Mapping[str, tuple]) -> str:
    """Per-cell CSV (cell index, coordinates, flattened field components)."""
    coords = [c.ravel() for c in grid.coords()]
    cols, names = [], []
    for ax, c in zip("xyz", coords):
        cols.append(c)
        names.append(ax)
    for name, (kind, a) in fields.items():
        flat = np.asarray(a).reshape(grid.ncell, -1)
        for j in range(flat.shape[1]):
            cols.append(flat[:, j])
            names.append(name if flat.shape[1] == 1 else f"{name}_{j}")
    buf = io.StringIO()
    buf.write("cell," + ",".join(names) + "\n")
    data = np.column_stack(cols)
    for i, row in enumerate(data):
        buf.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()
