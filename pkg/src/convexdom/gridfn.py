"""Piecewise-constant vector-valued functions on a cell grid.

A :class:`GridFunction` stores an ``n``-tuple of ``R^m``-valued functions; the
value space carries one of three norms (l2, l1, l-infinity) and the pairing
between a space and its dual is the coordinate dot product.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dyadic import CellMask, GridSpec

__all__ = [
    "NormTag",
    "GridFunction",
    "Stencil",
    "lp_average",
    "lp_norm",
    "weak_lp_norm",
    "lorentz_q1_norm",
    "pairing",
    "finite_difference",
    "dilate",
    "resample",
    "project",
    "convolve",
    "apply_matrix",
    "dual_exponent",
]


def dual_exponent(p: float) -> float:
    if p == 1:
        return np.inf
    if p == np.inf:
        return 1.0
    return p / (p - 1.0)


class NormTag(enum.Enum):
    EUCLIDEAN = "euclidean"
    SUM = "sum"
    MAX = "max"

    def dual(self) -> "NormTag":
        return {
            NormTag.EUCLIDEAN: NormTag.EUCLIDEAN,
            NormTag.SUM: NormTag.MAX,
            NormTag.MAX: NormTag.SUM,
        }[self]

    def norm(self, v: np.ndarray, axis: int = -1) -> np.ndarray:
        if self is NormTag.EUCLIDEAN:
            return np.sqrt(np.sum(v * v, axis=axis))
        if self is NormTag.SUM:
            return np.sum(np.abs(v), axis=axis)
        return np.max(np.abs(v), axis=axis)

    def norming(self, v: np.ndarray) -> np.ndarray:
        """Dual-norm-one vectors ``w`` with ``<v, w> = |v|`` along the last axis."""
        if self is NormTag.EUCLIDEAN:
            nv = self.norm(v)[..., None]
            safe = np.where(nv > 0, nv, 1.0)
            return np.where(nv > 0, v / safe, 0.0)
        if self is NormTag.SUM:
            return np.sign(v)
        out = np.zeros_like(v)
        k = np.argmax(np.abs(v), axis=-1)
        np.put_along_axis(out, k[..., None], np.sign(np.take_along_axis(v, k[..., None], -1)), -1)
        return out


@dataclass(frozen=True, eq=False)
class GridFunction:
    """``values`` has shape ``grid.shape + (n, m)``."""

    grid: GridSpec
    values: np.ndarray
    norm: NormTag = NormTag.EUCLIDEAN

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape[: self.grid.d] != self.grid.shape or vals.ndim != self.grid.d + 2:
            raise ValueError(
                f"values must have shape {self.grid.shape} + (n, m), got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    # constructors ---------------------------------------------------------
    @classmethod
    def scalar(cls, grid: GridSpec, arr, norm: NormTag = NormTag.EUCLIDEAN) -> "GridFunction":
        arr = np.asarray(arr, dtype=float)
        return cls(grid, arr[..., None, None], norm)

    @classmethod
    def zeros(cls, grid: GridSpec, n: int = 1, m: int = 1, norm=NormTag.EUCLIDEAN):
        return cls(grid, np.zeros(grid.shape + (n, m)), norm)

    @classmethod
    def from_components(cls, grid: GridSpec, comps, norm=NormTag.EUCLIDEAN):
        """Stack scalar fields (``m = 1``) into an ``n``-tuple."""
        arr = np.stack([np.asarray(c, dtype=float) for c in comps], axis=-1)
        return cls(grid, arr[..., None], norm)

    # shape ----------------------------------------------------------------
    @property
    def n(self) -> int:
        return self.values.shape[-2]

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values, grid: GridSpec | None = None) -> "GridFunction":
        return GridFunction(self.grid if grid is None else grid, values, self.norm)

    # pointwise quantities -------------------------------------------------
    def component(self, i: int) -> "GridFunction":
        return self.with_values(self.values[..., i : i + 1, :])

    def pointwise_norm(self, i: int = 0) -> np.ndarray:
        return self.norm.norm(self.values[..., i, :])

    def tuple_norm(self) -> np.ndarray:
        """``|f(x)|_{B^n} = (sum_i |f_i(x)|_B^2)^(1/2)``."""
        return np.sqrt(np.sum(self.norm.norm(self.values) ** 2, axis=-1))

    def combine(self, u) -> "GridFunction":
        """``u . f = sum_i u_i f_i`` as a one-component function."""
        u = np.asarray(u, dtype=float)
        return self.with_values(np.einsum("i,...im->...m", u, self.values)[..., None, :])

    def restrict(self, mask: CellMask) -> "GridFunction":
        keep = mask.membership[(...,) + (None,) * 2]
        return self.with_values(np.where(keep, self.values, 0.0))

    def support(self) -> CellMask:
        return CellMask(self.grid, np.any(self.values != 0, axis=(-2, -1)))

    def __add__(self, other: "GridFunction") -> "GridFunction":
        _check_same(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        _check_same(self, other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c: float) -> "GridFunction":
        return self.with_values(self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def _check_same(f: GridFunction, g: GridFunction):
    if f.grid != g.grid or f.values.shape != g.values.shape:
        raise ValueError("grid functions must share grid and shape")


def _field(f, component):
    if isinstance(f, GridFunction):
        if component is None:
            if f.n != 1:
                raise ValueError("pick a component of a multi-component function")
            component = 0
        return f.pointwise_norm(component), f.grid
    arr, grid = f
    return np.abs(np.asarray(arr, dtype=float)), grid


def lp_average(f, region: CellMask, p: float, component: int | None = None) -> float:
    """``(avg_region |f|_B^p)^(1/p)``; ``p = inf`` gives the sup over the region.

    The average divides by ``region.total_measure`` so that regions extending
    past the root see the zero extension.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    vals, grid = _field(f, component)
    total = region.total_measure
    if total <= 0:
        raise ValueError("average over an empty region is undefined")
    sel = vals[region.membership]
    if p == np.inf:
        return float(sel.max()) if sel.size else 0.0
    return float((np.sum(sel ** p) * grid.cell_volume / total) ** (1.0 / p))


def lp_norm(f, p: float, component: int | None = None) -> float:
    vals, grid = _field(f, component)
    if p == np.inf:
        return float(vals.max())
    return float((np.sum(vals ** p) * grid.cell_volume) ** (1.0 / p))


def _levels(f, component):
    vals, grid = _field(f, component)
    flat = np.sort(vals.ravel())[::-1]
    levels, first = np.unique(flat[::-1], return_index=True)
    # measure of {|f| >= t} for each distinct positive value t
    counts = flat.size - first
    keep = levels > 0
    return levels[keep], counts[keep] * grid.cell_volume


def weak_lp_norm(f, p: float, component: int | None = None) -> float:
    """``sup_t t |{|f| > t}|^(1/p)``, attained as ``t`` increases to a level value."""
    levels, meas = _levels(f, component)
    if levels.size == 0:
        return 0.0
    return float(np.max(levels * meas ** (1.0 / p)))


def lorentz_q1_norm(f, q: float, component: int | None = None) -> float:
    """``int_0^inf |{|f| > t}|^(1/q) dt`` evaluated from the sorted level values."""
    levels, meas = _levels(f, component)
    if levels.size == 0:
        return 0.0
    steps = np.diff(np.concatenate([[0.0], levels]))
    return float(np.sum(steps * meas ** (1.0 / q)))


def pairing(f: GridFunction, g: GridFunction) -> float:
    """``sum_i int <f_i, g_i>``."""
    if f.grid != g.grid or f.values.shape != g.values.shape:
        raise ValueError(
            f"pairing needs matching grids and shapes, got {f.values.shape} and {g.values.shape}"
        )
    if g.norm is not f.norm.dual():
        raise ValueError(f"{g.norm} is not dual to {f.norm}")
    return float(np.sum(f.values * g.values) * f.grid.cell_volume)


def apply_matrix(A, f: GridFunction) -> GridFunction:
    """Pointwise ``(A f)(x)``; ``A`` is ``k x n`` or a per-cell field of such."""
    A = np.asarray(A, dtype=float)
    return f.with_values(np.einsum("...kn,...nm->...km", A, f.values))


def _shift(values: np.ndarray, shift, d: int) -> np.ndarray:
    """``out[x] = values[x + shift]`` with zeros outside."""
    out = np.zeros_like(values)
    src, dst = [], []
    for s, n in zip(shift, values.shape[:d]):
        if abs(s) >= n:
            return out
        if s >= 0:
            src.append(slice(s, n))
            dst.append(slice(0, n - s))
        else:
            src.append(slice(0, n + s))
            dst.append(slice(-s, n))
    out[tuple(dst)] = values[tuple(src)]
    return out


def finite_difference(f: GridFunction, h) -> GridFunction:
    """``Delta_h f(x) = f(x + h) - f(x)``; ``h`` in cell units, zero outside the root."""
    h = tuple(int(x) for x in np.atleast_1d(h))
    if len(h) != f.grid.d:
        raise ValueError("offset dimension mismatch")
    return f.with_values(_shift(f.values, h, f.grid.d) - f.values)


def resample(f: GridFunction, grid: GridSpec) -> GridFunction:
    """Exact re-indexing onto a grid whose cells are no coarser than ``f``'s."""
    src = f.grid
    if grid.d != src.d:
        raise ValueError("dimension mismatch")
    if grid.cell_level > src.cell_level:
        raise ValueError(
            f"resolution underflow: target cells 2^{grid.cell_level} are coarser than 2^{src.cell_level}"
        )
    ratio = 2 ** (src.cell_level - grid.cell_level)
    idx, valid = [], np.ones(grid.shape, dtype=bool)
    for axis in range(grid.d):
        s = np.floor_divide(grid.cell_anchors(axis), ratio) - src.origin[axis]
        ok = (s >= 0) & (s < src.n_per_axis)
        idx.append(np.clip(s, 0, src.n_per_axis - 1))
        shape = [1] * grid.d
        shape[axis] = -1
        valid = valid & ok.reshape(shape)
    mesh = np.meshgrid(*idx, indexing="ij")
    vals = f.values[tuple(mesh)] * valid[..., None, None]
    lost = np.sum(np.abs(f.values)) - np.sum(np.abs(vals)) / ratio ** grid.d
    if lost > 1e-12 * max(1.0, np.sum(np.abs(f.values))):
        raise ValueError("function support does not fit in the target root")
    return GridFunction(grid, vals, f.norm)


def project(f: GridFunction, grid: GridSpec) -> GridFunction:
    """Cell averages onto a coarser (or equal) grid; mass outside its root is dropped."""
    src = f.grid
    if grid.cell_level < src.cell_level:
        raise ValueError("project maps to coarser cells; use resample to refine")
    ratio = 2 ** (grid.cell_level - src.cell_level)
    ids, valid = [], np.ones(src.shape, dtype=bool)
    for axis in range(src.d):
        t = np.floor_divide(src.cell_anchors(axis), ratio) - grid.origin[axis]
        ok = (t >= 0) & (t < grid.n_per_axis)
        ids.append(np.clip(t, 0, grid.n_per_axis - 1))
        shape = [1] * src.d
        shape[axis] = -1
        valid = valid & ok.reshape(shape)
    flat = np.ravel_multi_index(np.meshgrid(*ids, indexing="ij"), grid.shape).ravel()
    trailing = f.values.shape[src.d :]
    vals = (f.values * valid[..., None, None]).reshape(src.n_cells, -1)
    out = np.zeros((grid.n_cells, vals.shape[1]))
    np.add.at(out, flat, vals)
    out /= ratio ** src.d
    return GridFunction(grid, out.reshape(grid.shape + trailing), f.norm)


def dilate(f: GridFunction, j: int, grid: GridSpec | None = None) -> GridFunction:
    """``Dil_{2^j} f(x) = f(2^j x)``.

    The values are re-indexed onto the rescaled grid (cells of side
    ``2^(c - j)``); when ``grid`` is given the result is resampled onto it,
    which must not be coarser than the rescaled cells.
    """
    out = GridFunction(f.grid.rescaled(j), f.values, f.norm)
    if grid is None:
        return out
    return resample(out, grid)


@dataclass(frozen=True)
class Stencil:
    """Discrete convolution kernel: ``out[x] = vol * sum_a mats[a] @ f[x - a]``.

    ``offsets`` are integer cell offsets at ``level``; ``mats`` has shape
    ``(K, m2, m1)``.
    """

    level: int
    offsets: np.ndarray
    mats: np.ndarray

    @classmethod
    def from_kernel(cls, kernel: GridFunction) -> "Stencil":
        grid = kernel.grid
        nz = np.argwhere(np.any(kernel.values != 0, axis=(-2, -1)))
        offsets = nz + np.array(grid.origin)
        mats = kernel.values[tuple(nz.T)]
        return cls(grid.cell_level, offsets.reshape(-1, grid.d), mats)

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    def adjoint(self) -> "Stencil":
        return Stencil(self.level, -self.offsets, np.swapaxes(self.mats, -1, -2))

    def refine(self, level: int) -> "Stencil":
        """Same piecewise-constant kernel seen on finer cells."""
        if level > self.level:
            raise ValueError("stencils can only be refined")
        r = 2 ** (self.level - level)
        if r == 1:
            return self
        sub = np.array(np.meshgrid(*[np.arange(r)] * self.d, indexing="ij")).reshape(self.d, -1).T
        offs = (self.offsets[:, None, :] * r + sub[None, :, :]).reshape(-1, self.d)
        mats = np.repeat(self.mats, sub.shape[0], axis=0)
        return Stencil(level, offs, mats)

    def reach(self) -> float:
        """Largest displacement ``|a| 2^level`` over nonzero offsets."""
        if len(self.offsets) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.offsets, axis=1)) * 2.0 ** self.level)


def convolve(f: GridFunction, kernel) -> GridFunction:
    """Discrete convolution scaled by the cell volume, truncated to ``f``'s root.

    ``kernel`` is a :class:`Stencil` or a GridFunction on a grid with the same
    cell level whose cell anchors are read as offsets; its values are
    ``m2 x m1`` matrices.
    """
    st = kernel if isinstance(kernel, Stencil) else Stencil.from_kernel(kernel)
    grid = f.grid
    if st.level != grid.cell_level:
        raise ValueError("kernel and function must share the cell level")
    if st.mats.shape[-1] != f.m:
        raise ValueError(f"kernel acts on R^{st.mats.shape[-1]}, function is R^{f.m}-valued")
    d = grid.d
    out = np.zeros(grid.shape + (f.n, st.mats.shape[1]))
    for a, mat in zip(st.offsets, st.mats):
        shifted = _shift(f.values, tuple(-int(x) for x in a), d)
        out += np.einsum("kl,...il->...ik", mat, shifted)
    out *= grid.cell_volume
    return GridFunction(grid, out, f.norm)
